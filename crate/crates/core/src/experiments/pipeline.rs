use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use f2r_autograd::AdamWConfig;
use serde::{Deserialize, Serialize};

use super::settings::{run_setting, ExperimentData, ExperimentSpec, GeneratorConverter, SettingReport};
use super::synthetic::{make_synthetic_corpus, ranking_examples, token_f1, SyntheticSpec, World};
use crate::corpus::{
    assemble_history, build_style_corpus, Conversation, EncodedExample, SplitSpec, StyleLabel, StyleTransferExample,
    Turn, Vocab, DEFAULT_CONTEXT_TURNS,
};
use crate::discriminator::{Discriminator, DiscriminatorConfig, Sentence};
use crate::error::{Error, Result};
use crate::generator::{pretrain_generator, Generator, GeneratorConfig, PretrainConfig, PretrainReport};
use crate::heuristic::heuristic_convert;
use crate::training::{
    convert, disc_accuracy, fooling_rate, train_discriminator, train_with, write_history_csv, LossBreakdown,
    LossWeights, TrainConfig,
};

/// Supervised discriminator training before the adversarial phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for DiscPretrainConfig {
    fn default() -> Self {
        DiscPretrainConfig {
            steps: 100,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// End-to-end run on a synthetic world: style-transfer training, converter
/// quality, discriminator attention and the four ranker settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    pub n_turns: usize,
    pub max_history: usize,
    pub max_response: usize,
    /// Defaults to the desk preset; the vocabulary size is always taken from the corpus.
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub pretrain: PretrainConfig,
    pub disc_pretrain: DiscPretrainConfig,
    pub adversarial: TrainConfig,
    /// Validation interval for keeping the best adversarial checkpoint; `None`
    /// keeps the final one.
    pub select_every: Option<usize>,
    /// Natural conversations in the ranker's dialogue training set.
    pub ranker_dialogue: usize,
    /// Natural conversations in each of the ranker's dev and test sets.
    pub eval_conversations: usize,
    /// Ranker settings; its `setting` field is ignored since all four run.
    pub experiment: ExperimentSpec,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synthetic: SyntheticSpec::default(),
            split: SplitSpec::default(),
            n_turns: DEFAULT_CONTEXT_TURNS,
            max_history: 32,
            max_response: 20,
            generator: None,
            discriminator: None,
            pretrain: PretrainConfig {
                epochs: 4,
                ..PretrainConfig::default()
            },
            disc_pretrain: DiscPretrainConfig::default(),
            adversarial: TrainConfig {
                steps: 1000,
                batch_size: 8,
                gen_optimizer: AdamWConfig {
                    lr: 2e-5,
                    ..AdamWConfig::default()
                },
                fake_weight: 0.2,
                weights: LossWeights {
                    self_recon: 1.0,
                    cycle: 0.5,
                    style: 2.0,
                },
                max_len: 20,
                ..TrainConfig::default()
            },
            select_every: Some(100),
            ranker_dialogue: 100,
            eval_conversations: 500,
            experiment: ExperimentSpec::default(),
            seed: 0,
        }
    }
}

/// Converter quality on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverterMetrics {
    /// Discriminator accuracy on raw held-out examples of both styles.
    pub disc_accuracy: f64,
    /// Fraction of held-out feedback whose greedy conversion is classified natural.
    pub fooling_rate: f64,
    /// Mean token-overlap F1 of conversions against the oracle responses.
    pub token_f1: f64,
    pub heuristic_f1: f64,
    pub n_feedback: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionCheck {
    /// Fraction of feedback inputs whose filler tokens receive more than
    /// their uniform share of pooling attention.
    pub above_uniform: f64,
    pub mean_filler_mass: f64,
    pub mean_uniform_mass: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionSample {
    pub feedback: String,
    pub converted: String,
    pub oracle: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub vocab_size: usize,
    pub split_sizes: [usize; 3],
    pub pretrain: PretrainReport,
    pub adversarial_steps: usize,
    pub selected_step: usize,
    pub before_adversarial: ConverterMetrics,
    pub after_adversarial: ConverterMetrics,
    pub attention: AttentionCheck,
    pub settings: Vec<SettingReport>,
    pub samples: Vec<ConversionSample>,
}

impl PipelineReport {
    pub fn setting(&self, s: super::settings::Setting) -> Option<&SettingReport> {
        self.settings.iter().find(|r| r.setting == s)
    }
}

/// A held-out feedback example with its hidden oracle.
struct Labeled {
    encoded: EncodedExample,
    text: String,
    oracle: String,
    filler_tokens: usize,
}

fn key(history: &[Turn], response: &str) -> String {
    format!("{}\u{1}{}", assemble_history(history, usize::MAX), response)
}

fn converter_metrics(
    gen: &Generator,
    disc: &Discriminator,
    vocab: &Vocab,
    raw: &[EncodedExample],
    feedback: &[Labeled],
    max_len: usize,
) -> Result<(ConverterMetrics, Vec<ConversionSample>)> {
    let mut fooled = 0usize;
    let mut f1 = 0.0;
    let mut heuristic = 0.0;
    let mut samples = Vec::new();
    for ex in feedback {
        let y = convert(gen, &ex.encoded, max_len)?;
        if disc.classify(Sentence::Ids(&y), &ex.encoded.history)?.class == StyleLabel::Natural {
            fooled += 1;
        }
        let converted = vocab.decode(&y);
        f1 += token_f1(&converted, &ex.oracle);
        heuristic += token_f1(&heuristic_convert(&ex.text), &ex.oracle);
        if samples.len() < 8 {
            samples.push(ConversionSample {
                feedback: ex.text.clone(),
                converted,
                oracle: ex.oracle.clone(),
            });
        }
    }
    let n = feedback.len().max(1) as f64;
    Ok((
        ConverterMetrics {
            disc_accuracy: disc_accuracy(disc, raw)?,
            fooling_rate: fooled as f64 / n,
            token_f1: f1 / n,
            heuristic_f1: heuristic / n,
            n_feedback: feedback.len(),
        },
        samples,
    ))
}

fn attention_check(disc: &Discriminator, vocab: &Vocab, feedback: &[Labeled]) -> Result<AttentionCheck> {
    let mut above = 0usize;
    let mut mass = 0.0;
    let mut uniform = 0.0;
    for ex in feedback {
        let map = disc.attention(Sentence::Ids(&ex.encoded.response), &ex.encoded.history, vocab)?;
        let start = disc.prefix(&ex.encoded.history).len();
        let k = ex.filler_tokens.min(ex.encoded.response.len());
        let positions: Vec<usize> = (start..start + k).collect();
        let m = map.mean_mass(&positions);
        let u = k as f64 / map.tokens.len() as f64;
        if m > u {
            above += 1;
        }
        mass += m;
        uniform += u;
    }
    let n = feedback.len().max(1) as f64;
    Ok(AttentionCheck {
        above_uniform: above as f64 / n,
        mean_filler_mass: mass / n,
        mean_uniform_mass: uniform / n,
        n: feedback.len(),
    })
}

/// Vocabulary over the histories and responses of style-transfer examples.
pub fn style_vocab(examples: &[StyleTransferExample]) -> Vocab {
    Vocab::build(
        examples.iter().flat_map(|e| {
            e.history
                .iter()
                .map(|t| t.text.as_str())
                .chain(std::iter::once(e.response.as_str()))
        }),
        1,
        None,
    )
}

/// Ranker data for the synthetic world: a small natural training set plus
/// the given feedback, and fresh natural conversations for dev and test.
pub fn synthetic_ranker_data(config: &PipelineConfig, feedback: Vec<Conversation>) -> Result<ExperimentData> {
    let mut world = World::new(&config.synthetic, config.synthetic.seed.wrapping_add(1))?;
    let dialogue = (0..config.ranker_dialogue).map(|_| world.natural().0).collect();
    let dev: Vec<_> = (0..config.eval_conversations).map(|_| world.natural()).collect();
    let test: Vec<_> = (0..config.eval_conversations).map(|_| world.natural()).collect();
    let n = config.experiment.n_turns;
    Ok(ExperimentData {
        dialogue,
        feedback,
        dev: ranking_examples(&dev, n, config.seed.wrapping_add(3))?,
        test: ranking_examples(&test, n, config.seed.wrapping_add(4))?,
    })
}

/// Generator and discriminator built for `vocab_size`, the generator
/// denoising-pretrained and the discriminator trained on real examples.
pub fn pretrain_models(
    config: &PipelineConfig,
    train: &[EncodedExample],
    vocab_size: usize,
) -> Result<(Generator, Discriminator, PretrainReport)> {
    let gen_config = GeneratorConfig {
        vocab_size,
        ..config
            .generator
            .clone()
            .unwrap_or_else(|| GeneratorConfig::desk(vocab_size))
    };
    let disc_config = DiscriminatorConfig {
        vocab_size,
        ..config
            .discriminator
            .clone()
            .unwrap_or_else(|| DiscriminatorConfig::desk(vocab_size))
    };
    let mut gen = Generator::new(gen_config, config.seed)?;
    let mut disc = Discriminator::new(disc_config, config.seed.wrapping_add(1))?;
    let pretrain = pretrain_generator(&mut gen, train, &config.pretrain)?;
    let dp = &config.disc_pretrain;
    train_discriminator(
        &mut disc,
        train,
        dp.steps,
        dp.batch_size,
        dp.optimizer,
        config.seed.wrapping_add(2),
    )?;
    Ok((gen, disc, pretrain))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialOutcome {
    pub history: Vec<LossBreakdown>,
    /// Step whose models were kept; the last step when selection is off.
    pub selected_step: usize,
}

/// Adversarial training. With `select_every`, the models scoring best on
/// `valid` (minimum of raw accuracy and fooling rate) are kept.
pub fn adversarial_phase(
    config: &PipelineConfig,
    gen: &mut Generator,
    disc: &mut Discriminator,
    train: &[EncodedExample],
    valid: &[EncodedExample],
) -> Result<AdversarialOutcome> {
    let max_len = config.adversarial.max_len;
    let valid_fb: Vec<EncodedExample> = valid
        .iter()
        .filter(|e| e.style == StyleLabel::Feedback)
        .cloned()
        .collect();
    if config.select_every.is_some() && valid_fb.is_empty() {
        return Err(Error::Config(
            "checkpoint selection needs feedback in the validation split".into(),
        ));
    }
    let mut best: Option<(f64, usize, Generator, Discriminator)> = None;
    let history = train_with(gen, disc, train, &config.adversarial, |b, g, d| {
        let step = b.step + 1;
        if let Some(k) = config.select_every {
            if step % k == 0 || step == config.adversarial.steps {
                let s = fooling_rate(g, d, &valid_fb, max_len)?.min(disc_accuracy(d, valid)?);
                log::info!("step {step}: validation score {s:.3}");
                if best.as_ref().is_none_or(|(bs, ..)| s > *bs) {
                    best = Some((s, step, g.clone(), d.clone()));
                }
            }
        }
        Ok(())
    })?;
    let selected_step = match best {
        Some((_, step, g, d)) => {
            *gen = g;
            *disc = d;
            step
        }
        None => history.len(),
    };
    Ok(AdversarialOutcome { history, selected_step })
}

/// Trains the converter on the synthetic style corpus, measures it against
/// the oracle, then runs every ranker setting. Artifacts go to `out` when given.
pub fn run_synthetic_pipeline(config: &PipelineConfig, out: Option<&Path>) -> Result<PipelineReport> {
    let corpus = make_synthetic_corpus(&config.synthetic)?;
    let feedback = corpus.feedback();
    let style = build_style_corpus(&corpus.dialogue, &feedback, config.split)?;
    let oracle: HashMap<String, (String, String)> = corpus
        .pairs
        .iter()
        .map(|p| {
            (
                key(&p.feedback.turns, &p.feedback.final_response),
                (p.oracle.clone(), p.filler.clone()),
            )
        })
        .collect();

    let vocab = style_vocab(&style.train);
    let encode = |xs: &[StyleTransferExample]| -> Vec<EncodedExample> {
        xs.iter()
            .map(|e| EncodedExample::new(&vocab, e, config.n_turns, config.max_history, config.max_response))
            .collect()
    };
    let label = |xs: &[StyleTransferExample]| -> Result<Vec<Labeled>> {
        xs.iter()
            .filter(|e| e.style == StyleLabel::Feedback)
            .map(|e| {
                let (o, filler) = oracle
                    .get(&key(&e.history, &e.response))
                    .ok_or_else(|| Error::Config("feedback example without an oracle".into()))?;
                Ok(Labeled {
                    encoded: EncodedExample::new(&vocab, e, config.n_turns, config.max_history, config.max_response),
                    text: e.response.clone(),
                    oracle: o.clone(),
                    filler_tokens: vocab.encode(filler).len(),
                })
            })
            .collect()
    };
    let train = encode(&style.train);
    let valid = encode(&style.valid);
    let test = encode(&style.test);
    let test_fb = label(&style.test)?;

    let v = vocab.len();
    log::info!("pretraining generator on {} examples", train.len());
    let (mut gen, mut disc, pretrain) = pretrain_models(config, &train, v)?;
    let max_len = config.adversarial.max_len;
    let (before, _) = converter_metrics(&gen, &disc, &vocab, &test, &test_fb, max_len)?;
    log::info!("before adversarial training: {before:?}");
    let outcome = adversarial_phase(config, &mut gen, &mut disc, &train, &valid)?;
    let history = outcome.history;
    let selected_step = outcome.selected_step;
    let (after, samples) = converter_metrics(&gen, &disc, &vocab, &test, &test_fb, max_len)?;
    log::info!("after adversarial training: {after:?}");
    let attention = attention_check(&disc, &vocab, &test_fb)?;

    let data = synthetic_ranker_data(config, feedback)?;
    let converter = GeneratorConverter {
        max_history: config.max_history,
        max_len,
        n_turns: config.n_turns,
        ..GeneratorConverter::new(&gen, &vocab)
    };
    let mut settings = Vec::with_capacity(4);
    for setting in super::settings::Setting::ALL {
        let spec = ExperimentSpec {
            setting,
            ..config.experiment.clone()
        };
        log::info!("ranker setting {setting}");
        settings.push(run_setting(&spec, &data, Some(&converter))?);
    }

    let report = PipelineReport {
        vocab_size: v,
        split_sizes: [style.train.len(), style.valid.len(), style.test.len()],
        pretrain,
        adversarial_steps: history.len(),
        selected_step,
        before_adversarial: before,
        after_adversarial: after,
        attention,
        settings,
        samples,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        vocab.save(&dir.join("vocab.json"))?;
        gen.save(&dir.join("generator.ckpt"))?;
        disc.save(&dir.join("discriminator.ckpt"))?;
        write_history_csv(BufWriter::new(File::create(dir.join("history.csv"))?), &history)?;
        for r in &report.settings {
            std::fs::write(
                dir.join(format!("report-{}.json", r.setting)),
                serde_json::to_string_pretty(r)?,
            )?;
        }
        super::settings::write_aggregate_csv(
            BufWriter::new(File::create(dir.join("aggregate.csv"))?),
            &report.settings,
        )?;
        std::fs::write(dir.join("pipeline.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
