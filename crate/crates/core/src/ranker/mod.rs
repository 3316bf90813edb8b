//! Retrieval rankers: a bi-encoder and a poly-encoder trained with in-batch
//! negatives, plus the HITS@k metric.

mod metric;

pub use metric::{hits_at_k, hits_at_k_with, rank_of, MetricReport};

use std::path::Path;

use f2r_autograd::nn::{EncoderLayer, LayerNorm};
use f2r_autograd::{params, Adamax, AdamaxConfig, Graph, Mat, NodeId, Optimizer, ParamId, ParamStore, Slot};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};

pub const CANDIDATES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Bi,
    Poly,
}

/// How the bi-encoder summarizes the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// One learned query attending over the context tokens.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Number of context codes (poly-encoder only).
    pub codes: usize,
    /// Context summary of the bi-encoder.
    pub pooling: Pooling,
    pub init_std: f64,
}

impl RankerConfig {
    /// 2 layers, 64-dim; 4 codes for the poly-encoder.
    pub fn desk(architecture: Architecture, vocab_size: usize) -> Self {
        RankerConfig {
            architecture,
            vocab_size,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            max_positions: 128,
            codes: 4,
            pooling: Pooling::Mean,
            init_std: 0.1,
        }
    }

    /// Bi-encoder 2 layers/2 heads, poly-encoder 12 layers/12 heads.
    pub fn full_scale(architecture: Architecture, vocab_size: usize) -> Self {
        let (layers, heads, d_model) = match architecture {
            Architecture::Bi => (2, 2, 256),
            Architecture::Poly => (12, 12, 768),
        };
        RankerConfig {
            architecture,
            vocab_size,
            d_model,
            heads,
            layers,
            d_ff: 4 * d_model,
            max_positions: 1024,
            codes: 64,
            pooling: Pooling::Mean,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.vocab_size,
            self.d_model,
            self.heads,
            self.layers,
            self.d_ff,
            self.max_positions,
        ]
        .contains(&0)
        {
            return Err(Error::Config("ranker sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.architecture == Architecture::Poly && self.codes == 0 {
            return Err(Error::Config("poly-encoder needs at least one code".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TextEncoder {
    tokens: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TextEncoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: &RankerConfig) -> TextEncoder {
        TextEncoder {
            tokens: store.add(
                format!("{name}.tokens"),
                params::normal(rng, c.vocab_size, c.d_model, c.init_std),
            ),
            pos: store.add(
                format!("{name}.pos"),
                params::normal(rng, c.max_positions, c.d_model, c.init_std),
            ),
            layers: (0..c.layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("{name}.{i}"), c.d_model, c.heads, c.d_ff))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.ln_out"), c.d_model),
        }
    }

    /// Per-token output states, `n x d`.
    fn forward(&self, g: &mut Graph<'_>, slot: Slot, ids: &[TokenId], max_positions: usize) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > max_positions {
            return Err(Error::TooLong {
                len: ids.len(),
                max: max_positions,
            });
        }
        let e = g.param(slot, self.tokens);
        let x = g.gather(e, ids);
        let pos_table = g.param(slot, self.pos);
        let pos = g.slice_rows(pos_table, 0, ids.len());
        let mut h = g.add(x, pos);
        for layer in &self.layers {
            h = layer.forward(g, slot, h, None);
        }
        Ok(self.norm.forward(g, slot, h))
    }
}

#[derive(Clone, Debug)]
pub struct Ranker {
    config: RankerConfig,
    pub params: ParamStore,
    context: TextEncoder,
    candidate: TextEncoder,
    codes: Option<ParamId>,
}

fn mean_rows(g: &mut Graph<'_>, h: NodeId) -> NodeId {
    let n = g.shape(h).0;
    let w = g.constant(Mat::from_elem((1, n), 1.0 / n as f64));
    g.matmul(w, h)
}

/// Unscaled dot-product attention of `queries` over `keys`, values = keys.
fn attend(g: &mut Graph<'_>, queries: NodeId, keys: NodeId) -> NodeId {
    let s = g.matmul_t(queries, keys);
    let w = g.softmax(s);
    g.matmul(w, keys)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Ranker {
    pub fn new(config: RankerConfig, seed: u64) -> Result<Ranker> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let context = TextEncoder::new(&mut store, &mut rng, "ctx", &config);
        let candidate = TextEncoder::new(&mut store, &mut rng, "cand", &config);
        let n_codes = match (config.architecture, config.pooling) {
            (Architecture::Poly, _) => Some(config.codes),
            (Architecture::Bi, Pooling::Attention) => Some(1),
            (Architecture::Bi, Pooling::Mean) => None,
        };
        let codes = n_codes.map(|m| store.add("codes", params::normal(&mut rng, m, config.d_model, config.init_std)));
        Ok(Ranker {
            config,
            params: store,
            context,
            candidate,
            codes,
        })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    /// Context summary: `1 x d` for the bi-encoder, `codes x d` for the poly-encoder.
    fn context_repr(&self, g: &mut Graph<'_>, slot: Slot, ids: &[TokenId]) -> Result<NodeId> {
        let h = self.context.forward(g, slot, ids, self.config.max_positions)?;
        Ok(match self.codes {
            Some(codes) => {
                let q = g.param(slot, codes);
                attend(g, q, h)
            }
            None => mean_rows(g, h),
        })
    }

    fn candidate_repr(&self, g: &mut Graph<'_>, slot: Slot, ids: &[TokenId]) -> Result<NodeId> {
        let h = self.candidate.forward(g, slot, ids, self.config.max_positions)?;
        Ok(mean_rows(g, h))
    }

    /// Scores of `candidates` (`k x d`) against one context summary, as `1 x k`.
    fn score_row(&self, g: &mut Graph<'_>, ctx: NodeId, candidates: NodeId) -> NodeId {
        match self.config.architecture {
            Architecture::Bi => g.matmul_t(ctx, candidates),
            Architecture::Poly => {
                let per_cand = attend(g, candidates, ctx);
                let prod = g.mul(per_cand, candidates);
                let s = g.row_sum(prod);
                g.transpose(s)
            }
        }
    }

    /// Bi-encoder context and candidate summary vectors.
    pub fn embed(&self, context: &[TokenId], candidate: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.config.architecture != Architecture::Bi {
            return Err(Error::Config("embed needs a bi-encoder".into()));
        }
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let c = self.context_repr(&mut g, slot, context)?;
        let r = self.candidate_repr(&mut g, slot, candidate)?;
        Ok((
            g.value(c).iter().copied().collect(),
            g.value(r).iter().copied().collect(),
        ))
    }

    /// Bi-encoder score: dot product of the context and candidate summaries.
    pub fn score_bi(&self, context: &[TokenId], candidate: &[TokenId]) -> Result<f64> {
        if self.config.architecture != Architecture::Bi {
            return Err(Error::Config("score_bi needs a bi-encoder".into()));
        }
        Ok(self.score_candidates(context, &[candidate.to_vec()])?[0])
    }

    /// Poly-encoder scores of every candidate.
    pub fn score_poly(&self, context: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if self.config.architecture != Architecture::Poly {
            return Err(Error::Config("score_poly needs a poly-encoder".into()));
        }
        self.score_candidates(context, candidates)
    }

    pub fn score_candidates(&self, context: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Config("no candidates to score".into()));
        }
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let ctx = self.context_repr(&mut g, slot, context)?;
        let reprs = candidates
            .iter()
            .map(|c| self.candidate_repr(&mut g, slot, c))
            .collect::<Result<Vec<_>>>()?;
        let all = g.concat_rows(&reprs);
        let row = self.score_row(&mut g, ctx, all);
        Ok(g.value(row).iter().copied().collect())
    }

    /// Mean in-batch cross-entropy: context `i` should pick response `i`.
    fn batch_loss(&self, g: &mut Graph<'_>, slot: Slot, batch: &[&RankingPair]) -> Result<NodeId> {
        let cands = batch
            .iter()
            .map(|p| self.candidate_repr(g, slot, &p.response))
            .collect::<Result<Vec<_>>>()?;
        let all = g.concat_rows(&cands);
        let mut rows = Vec::with_capacity(batch.len());
        for p in batch {
            let ctx = self.context_repr(g, slot, &p.context)?;
            rows.push(self.score_row(g, ctx, all));
        }
        let scores = g.concat_rows(&rows);
        let lp = g.log_softmax(scores);
        let diag: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
        let picked = g.pick(lp, &diag);
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0 / batch.len() as f64))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_model(path, "ranker", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Ranker> {
        let (config, store) = crate::io::load_model(path, "ranker")?;
        let mut r = Ranker::new(config, 0)?;
        r.params.assign_from(&store).map_err(Error::Config)?;
        Ok(r)
    }
}

/// A context with its gold response, for training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingPair {
    pub context: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// A context with candidate responses, for evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingExample {
    pub context: String,
    pub candidates: Vec<String>,
    pub correct: usize,
}

impl RankingExample {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != CANDIDATES {
            return Err(Error::Config(format!(
                "expected {CANDIDATES} candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.correct >= self.candidates.len() {
            return Err(Error::Config("correct index out of range".into()));
        }
        Ok(())
    }
}

pub fn parse_ranking_jsonl(text: &str) -> Result<Vec<RankingExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: RankingExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamaxConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        RankerTrainConfig::for_architecture(Architecture::Bi)
    }
}

impl RankerTrainConfig {
    /// Learning rate 2.5e-3 for the bi-encoder, 5e-5 for the poly-encoder.
    pub fn for_architecture(arch: Architecture) -> Self {
        let lr = match arch {
            Architecture::Bi => 2.5e-3,
            Architecture::Poly => 5e-5,
        };
        RankerTrainConfig {
            steps: 500,
            batch_size: 16,
            optimizer: AdamaxConfig {
                lr,
                ..AdamaxConfig::default()
            },
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Trains with in-batch negatives; returns the loss of every step.
pub fn train_ranker(ranker: &mut Ranker, corpus: &[RankingPair], config: &RankerTrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size < 2 {
        return Err(Error::Config("in-batch negatives need batch_size >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adamax::new(config.optimizer, &ranker.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut pos = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(corpus.len()) {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(&corpus[order[pos]]);
            pos += 1;
        }
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let slot = g.bind(&ranker.params, true);
            let l = ranker.batch_loss(&mut g, slot, &batch)?;
            (g.scalar(l), g.backward(l).params(&g, slot))
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        if let Some(c) = config.clip_norm {
            grads.clip_global_norm(c);
        }
        opt.step(&mut ranker.params, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Keeps the last `max` ids.
pub fn fit_left(mut ids: Vec<TokenId>, max: usize) -> Vec<TokenId> {
    if ids.len() > max {
        ids.drain(..ids.len() - max);
    }
    ids
}

/// Candidate scores for every example, computed in parallel; texts are
/// encoded with `vocab` and truncated to the ranker's capacity.
pub fn score_examples(ranker: &Ranker, vocab: &Vocab, examples: &[RankingExample]) -> Result<Vec<(Vec<f64>, usize)>> {
    let max = ranker.config.max_positions;
    examples
        .par_iter()
        .map(|ex| {
            let ctx = fit_left(vocab.encode(&ex.context), max);
            let cands: Vec<Vec<TokenId>> = ex
                .candidates
                .iter()
                .map(|c| {
                    let mut ids = vocab.encode(c);
                    ids.truncate(max);
                    if ids.is_empty() {
                        ids.push(Vocab::UNK);
                    }
                    ids
                })
                .collect();
            Ok((ranker.score_candidates(&ctx, &cands)?, ex.correct))
        })
        .collect()
}

/// HITS@1 over the examples' candidate sets.
pub fn evaluate(ranker: &Ranker, vocab: &Vocab, examples: &[RankingExample]) -> Result<f64> {
    Ok(hits_at_k(&score_examples(ranker, vocab, examples)?, 1))
}
