use f2r_autograd::{AdamW, AdamWConfig, Graph, Optimizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, Source};
use crate::corpus::{EncodedExample, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mask_prob: f64,
    /// Maximum displacement of a token under local shuffling; 0 disables it.
    pub shuffle_window: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            mask_prob: 0.15,
            shuffle_window: 3,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-example training NLL for each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Replaces tokens by UNK with probability `mask_prob`, then shuffles locally
/// so no token moves more than `window` positions.
pub fn add_noise<R: Rng>(x: &[TokenId], mask_prob: f64, window: usize, rng: &mut R) -> Vec<TokenId> {
    let masked: Vec<TokenId> = x
        .iter()
        .map(|&t| {
            if mask_prob > 0.0 && rng.gen::<f64>() < mask_prob {
                Vocab::UNK
            } else {
                t
            }
        })
        .collect();
    if window == 0 {
        return masked;
    }
    let mut keyed: Vec<(f64, TokenId)> = masked
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i as f64 + rng.gen::<f64>() * (window as f64 + 1.0), t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, t)| t).collect()
}

/// Denoising pretraining: `history ++ [RES] ++ noise(response)` in the
/// example's own style is trained to reproduce the clean response.
pub fn pretrain_generator(
    gen: &mut Generator,
    corpus: &[EncodedExample],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut report = PretrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer, &gen.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let noised: Vec<Vec<TokenId>> = batch
                .iter()
                .map(|&i| add_noise(&corpus[i].response, config.mask_prob, config.shuffle_window, &mut rng))
                .collect();
            let mut grads = {
                let mut g = Graph::new();
                let slot = g.bind(&gen.params, true);
                let mut losses = Vec::with_capacity(batch.len());
                for (&i, x) in batch.iter().zip(&noised) {
                    let ex = &corpus[i];
                    let memory = gen.encode(&mut g, slot, &ex.history, Source::Hard(x), ex.style)?;
                    losses.push(gen.sequence_nll(&mut g, slot, memory, &ex.response)?);
                }
                let sum = g.concat_cols(&losses);
                let sum = g.sum(sum);
                let loss = g.scale(sum, 1.0 / batch.len() as f64);
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged { step: report.steps });
                }
                total += value * batch.len() as f64;
                g.backward(loss).params(&g, slot)
            };
            if let Some(c) = config.clip_norm {
                grads.clip_global_norm(c);
            }
            opt.step(&mut gen.params, &grads);
            report.steps += 1;
        }
        report.epoch_loss.push(total / corpus.len() as f64);
    }
    Ok(report)
}

/// Mean summed NLL of reproducing each clean response from its clean input.
pub fn held_out_nll(gen: &Generator, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let slot = g.bind(&gen.params, false);
        let memory = gen.encode(&mut g, slot, &ex.history, Source::Hard(&ex.response), ex.style)?;
        let nll = gen.sequence_nll(&mut g, slot, memory, &ex.response)?;
        total += g.scalar(nll);
    }
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_keeps_length_and_bounded_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<TokenId> = (10..30).collect();
        for _ in 0..50 {
            let y = add_noise(&x, 0.0, 3, &mut rng);
            assert_eq!(y.len(), x.len());
            for (pos, t) in y.iter().enumerate() {
                assert!((t - 10).abs_diff(pos) <= 3);
            }
        }
        assert_eq!(add_noise(&x, 0.0, 0, &mut rng), x);
        assert!(add_noise(&x, 1.0, 0, &mut rng).iter().all(|&t| t == Vocab::UNK));
    }
}
