//! Adversarial style-transfer training: self-reconstruction, cycle and style
//! losses for the generator, alternated with discriminator updates.

mod losses;

pub use losses::{
    cycle_from_soft, disc_cross_entropy, loss_cycle, loss_self, loss_style, mean, transfer, StyleLossForm,
    DEFAULT_EPSILON,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use f2r_autograd::{AdamW, AdamWConfig, Graph, Mat, Optimizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, StyleLabel, TokenId};
use crate::discriminator::{Discriminator, Sentence};
use crate::error::{Error, Result};
use crate::generator::{Generator, Source, DEFAULT_MAX_LEN, DEFAULT_REPETITION_PENALTY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub self_recon: f64,
    pub cycle: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            self_recon: 1.0,
            cycle: 1.0,
            style: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub gen_optimizer: AdamWConfig,
    pub disc_optimizer: AdamWConfig,
    pub weights: LossWeights,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    /// Discriminator-only updates on real data before adversarial training.
    pub disc_warmup_steps: usize,
    /// Weight of each generator output relative to a real example in the
    /// discriminator loss.
    pub fake_weight: f64,
    pub epsilon: f64,
    pub style_form: StyleLossForm,
    pub max_len: usize,
    pub temperature: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            gen_optimizer: AdamWConfig {
                lr: 5e-6,
                ..AdamWConfig::default()
            },
            disc_optimizer: AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
            weights: LossWeights::default(),
            disc_steps: 1,
            disc_warmup_steps: 0,
            fake_weight: 1.0,
            epsilon: DEFAULT_EPSILON,
            style_form: StyleLossForm::Log,
            max_len: DEFAULT_MAX_LEN,
            temperature: 1.0,
            clip_norm: Some(1.0),
            checkpoint_every: None,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if !(self.gen_optimizer.lr > 0.0 && self.disc_optimizer.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if [w.self_recon, w.cycle, w.style].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.fake_weight >= 0.0) {
            return Err(Error::Config("fake_weight must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-4) {
            return Err(Error::Config("epsilon must lie in (0, 1e-4]".into()));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one generator step, averaged over its batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub loss_self: f64,
    pub loss_cycle: f64,
    pub loss_style: f64,
    pub total: f64,
    pub disc_loss: f64,
    /// Fraction of the batch's soft transfers the discriminator assigned to the target style.
    pub fooling_rate: f64,
}

pub const HISTORY_HEADER: &str = "step,loss_self,loss_cycle,loss_style,disc_loss,fooling_rate";

pub fn write_history_csv<W: Write>(mut w: W, history: &[LossBreakdown]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            h.step, h.loss_self, h.loss_cycle, h.loss_style, h.disc_loss, h.fooling_rate
        )?;
    }
    Ok(())
}

/// A detached generator output labelled with its source style.
#[derive(Clone, Debug)]
pub struct FakeSample {
    pub history: Vec<TokenId>,
    pub probs: Mat,
    pub label: StyleLabel,
}

/// One cross-entropy update of the discriminator on real examples and
/// detached generator outputs, each fake counting `fake_weight` times a real
/// example. Returns the weighted mean loss before the update.
pub fn discriminator_step(
    disc: &mut Discriminator,
    opt: &mut AdamW,
    real: &[&EncodedExample],
    fakes: &[FakeSample],
    fake_weight: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    if real.is_empty() && (fakes.is_empty() || fake_weight == 0.0) {
        return Err(Error::EmptyCorpus);
    }
    let (loss, mut grads) = {
        let mut g = Graph::new();
        let slot = g.bind(&disc.params, true);
        let mut terms = Vec::with_capacity(real.len() + fakes.len());
        for ex in real {
            terms.push(disc_cross_entropy(
                disc,
                &mut g,
                slot,
                &ex.history,
                Source::Hard(&ex.response),
                ex.style,
            )?);
        }
        let fake_weight = if fakes.is_empty() { 0.0 } else { fake_weight };
        for f in fakes {
            let p = g.constant(f.probs.clone());
            let ce = disc_cross_entropy(disc, &mut g, slot, &f.history, Source::Soft(p), f.label)?;
            terms.push(g.scale(ce, fake_weight));
        }
        let all = g.concat_cols(&terms);
        let total = g.sum(all);
        let loss = g.scale(total, 1.0 / (real.len() as f64 + fake_weight * fakes.len() as f64));
        (g.scalar(loss), g.backward(loss).params(&g, slot))
    };
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged {
            step: opt.steps_taken() as usize,
        });
    }
    if let Some(c) = clip_norm {
        grads.clip_global_norm(c);
    }
    opt.step(&mut disc.params, &grads);
    Ok(loss)
}

/// Supervised discriminator training on real examples only.
pub fn train_discriminator(
    disc: &mut Discriminator,
    examples: &[EncodedExample],
    steps: usize,
    batch_size: usize,
    optimizer: AdamWConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = AdamW::new(optimizer, &disc.params);
    let mut batches = Batcher::new(examples.len(), seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&EncodedExample> = batches.next(batch_size).iter().map(|&i| &examples[i]).collect();
        losses.push(discriminator_step(disc, &mut opt, &batch, &[], 0.0, Some(1.0))?);
    }
    Ok(losses)
}

/// Endless shuffled passes over `0..n`.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Batcher {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct GenStep {
    breakdown: LossBreakdown,
    fakes: Vec<FakeSample>,
}

fn generator_step(
    gen: &mut Generator,
    disc: &Discriminator,
    opt: &mut AdamW,
    batch: &[&EncodedExample],
    config: &TrainConfig,
    step: usize,
) -> Result<GenStep> {
    let w = config.weights;
    let (sums, fakes, fooled, mut grads) = {
        let mut g = Graph::new();
        let gslot = g.bind(&gen.params, true);
        let dslot = g.bind(&disc.params, false);
        let mut totals = Vec::with_capacity(batch.len());
        let mut sums = [0.0f64; 3];
        let mut fakes = Vec::with_capacity(batch.len());
        let mut fooled = 0usize;
        for ex in batch {
            let target = ex.style.flip();
            let ls = loss_self(gen, &mut g, gslot, ex)?;
            let soft = transfer(gen, &mut g, gslot, ex, target, config.max_len, config.temperature)?;
            let lc = cycle_from_soft(gen, &mut g, gslot, ex, &soft)?;
            let lst = loss_style(
                disc,
                &mut g,
                dslot,
                &ex.history,
                Source::Soft(soft.probs),
                target,
                config.style_form,
                config.epsilon,
            )?;
            let p_target = match config.style_form {
                StyleLossForm::Log => (-g.scalar(lst)).exp(),
                StyleLossForm::Literal => -g.scalar(lst),
            };
            if p_target > 0.5 {
                fooled += 1;
            }
            sums[0] += g.scalar(ls);
            sums[1] += g.scalar(lc);
            sums[2] += g.scalar(lst);
            let a = g.scale(ls, w.self_recon);
            let b = g.scale(lc, w.cycle);
            let c = g.scale(lst, w.style);
            let ab = g.add(a, b);
            totals.push(g.add(ab, c));
            fakes.push(FakeSample {
                history: ex.history.clone(),
                probs: g.value(soft.probs).clone(),
                label: ex.style,
            });
        }
        let total = mean(&mut g, &totals);
        if !g.scalar(total).is_finite() {
            return Err(Error::Diverged { step });
        }
        (sums, fakes, fooled, g.backward(total).params(&g, gslot))
    };
    if !grads.all_finite() {
        return Err(Error::Diverged { step });
    }
    if let Some(c) = config.clip_norm {
        grads.clip_global_norm(c);
    }
    opt.step(&mut gen.params, &grads);
    let n = batch.len() as f64;
    let [s, c, st] = sums.map(|x| x / n);
    Ok(GenStep {
        breakdown: LossBreakdown {
            step,
            loss_self: s,
            loss_cycle: c,
            loss_style: st,
            total: w.self_recon * s + w.cycle * c + w.style * st,
            disc_loss: f64::NAN,
            fooling_rate: fooled as f64 / n,
        },
        fakes,
    })
}

/// Alternating adversarial training. Each step updates the generator against
/// the current discriminator, then the discriminator on a fresh real batch
/// plus the detached transfers just produced.
pub fn train(
    gen: &mut Generator,
    disc: &mut Discriminator,
    corpus: &[EncodedExample],
    config: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    train_with(gen, disc, corpus, config, |_, _, _| Ok(()))
}

/// [`train`] with a hook called after every step.
pub fn train_with<F>(
    gen: &mut Generator,
    disc: &mut Discriminator,
    corpus: &[EncodedExample],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<LossBreakdown>>
where
    F: FnMut(&LossBreakdown, &Generator, &Discriminator) -> Result<()>,
{
    config.validate()?;
    if !StyleLabel::ALL.iter().all(|s| corpus.iter().any(|e| e.style == *s)) {
        return Err(Error::Config("training corpus needs both styles".into()));
    }
    let mut gen_opt = AdamW::new(config.gen_optimizer, &gen.params);
    let mut disc_opt = AdamW::new(config.disc_optimizer, &disc.params);
    let mut gen_batches = Batcher::new(corpus.len(), config.seed);
    let mut disc_batches = Batcher::new(corpus.len(), config.seed.wrapping_add(1));
    for _ in 0..config.disc_warmup_steps {
        let real: Vec<&EncodedExample> = disc_batches
            .next(config.batch_size)
            .iter()
            .map(|&i| &corpus[i])
            .collect();
        discriminator_step(disc, &mut disc_opt, &real, &[], 0.0, config.clip_norm)?;
    }
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&EncodedExample> = gen_batches
            .next(config.batch_size)
            .iter()
            .map(|&i| &corpus[i])
            .collect();
        let mut out = generator_step(gen, disc, &mut gen_opt, &batch, config, step)?;
        let mut disc_loss = 0.0;
        for _ in 0..config.disc_steps {
            let real: Vec<&EncodedExample> = disc_batches
                .next(config.batch_size)
                .iter()
                .map(|&i| &corpus[i])
                .collect();
            disc_loss = discriminator_step(
                disc,
                &mut disc_opt,
                &real,
                &out.fakes,
                config.fake_weight,
                config.clip_norm,
            )?;
        }
        out.breakdown.disc_loss = disc_loss;
        on_step(&out.breakdown, gen, disc)?;
        history.push(out.breakdown);
        if let (Some(k), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if (step + 1) % k == 0 {
                save_pair(gen, disc, dir, step + 1)?;
            }
        }
    }
    Ok(history)
}

fn save_pair(gen: &Generator, disc: &Discriminator, dir: &Path, step: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    gen.save(&dir.join(format!("generator-{step:06}.ckpt")))?;
    disc.save(&dir.join(format!("discriminator-{step:06}.ckpt")))
}

/// Fraction of real examples whose style the discriminator predicts.
pub fn disc_accuracy(disc: &Discriminator, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut correct = 0usize;
    for ex in examples {
        if disc.classify(Sentence::Ids(&ex.response), &ex.history)?.class == ex.style {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Greedy transfer of `ex` to the opposite style.
pub fn convert(gen: &Generator, ex: &EncodedExample, max_len: usize) -> Result<Vec<TokenId>> {
    gen.generate(
        &ex.response,
        &ex.history,
        ex.style.flip(),
        max_len,
        DEFAULT_REPETITION_PENALTY,
    )
}

/// Fraction of examples whose greedy transfer the discriminator assigns to
/// the target style.
pub fn fooling_rate(gen: &Generator, disc: &Discriminator, examples: &[EncodedExample], max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut fooled = 0usize;
    for ex in examples {
        let y = convert(gen, ex, max_len)?;
        if disc.classify(Sentence::Ids(&y), &ex.history)?.class == ex.style.flip() {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorConfig;
    use crate::generator::GeneratorConfig;

    fn corpus() -> Vec<EncodedExample> {
        (0..6)
            .map(|i| EncodedExample {
                history: vec![4, 9 + i % 3],
                response: if i % 2 == 0 {
                    vec![12, 13, 14 + i % 4]
                } else {
                    vec![10, 11, 12, 14 + i % 4]
                },
                style: StyleLabel::from_index(i % 2).unwrap(),
            })
            .collect()
    }

    fn models() -> (Generator, Discriminator) {
        (
            Generator::new(GeneratorConfig::tiny(20), 1).unwrap(),
            Discriminator::new(DiscriminatorConfig::tiny(20), 2).unwrap(),
        )
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 2,
            max_len: 5,
            gen_optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let (mut g, mut d) = models();
        let (g0, d0) = (g.params.clone(), d.params.clone());
        let h = train(
            &mut g,
            &mut d,
            &corpus(),
            &TrainConfig {
                steps: 0,
                ..small_config()
            },
        )
        .unwrap();
        assert!(h.is_empty());
        assert!(g.params.iter().zip(g0.iter()).all(|(a, b)| a.1 == b.1));
        assert!(d.params.iter().zip(d0.iter()).all(|(a, b)| a.1 == b.1));
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let (mut g, mut d) = models();
            train(&mut g, &mut d, &corpus(), &small_config()).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        for h in &a {
            assert!(h.loss_self >= 0.0 && h.loss_cycle >= 0.0 && h.loss_style >= 0.0);
            let expected = h.loss_self + h.loss_cycle + h.loss_style;
            assert!((h.total - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn literal_form_stays_in_range() {
        let (mut g, mut d) = models();
        let config = TrainConfig {
            style_form: StyleLossForm::Literal,
            ..small_config()
        };
        for h in train(&mut g, &mut d, &corpus(), &config).unwrap() {
            assert!((-1.0..=0.0).contains(&h.loss_style));
        }
    }

    #[test]
    fn needs_both_styles() {
        let (mut g, mut d) = models();
        let one: Vec<_> = corpus()
            .into_iter()
            .filter(|e| e.style == StyleLabel::Natural)
            .collect();
        assert!(train(&mut g, &mut d, &one, &small_config()).is_err());
    }

    #[test]
    fn checkpoints_are_written() {
        let (mut g, mut d) = models();
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..small_config()
        };
        train(&mut g, &mut d, &corpus(), &config).unwrap();
        assert!(dir.path().join("generator-000002.ckpt").exists());
        assert!(dir.path().join("discriminator-000002.ckpt").exists());
        assert!(!dir.path().join("generator-000003.ckpt").exists());
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let (mut g, mut d) = models();
        let h = train(&mut g, &mut d, &corpus(), &small_config()).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(TrainConfig {
            epsilon: 1e-3,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weights: LossWeights {
                style: -1.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
