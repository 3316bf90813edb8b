//! Style-conditioned encoder-decoder producing hard token sequences for
//! inference and soft (distributional) sequences for training.

mod pretrain;

pub use pretrain::{add_noise, held_out_nll, pretrain_generator, PretrainConfig, PretrainReport};

use std::path::Path;

use f2r_autograd::nn::{causal_mask, DecoderLayer, EncoderLayer, LayerCache, LayerNorm};
use f2r_autograd::{params, Graph, Mat, NodeId, ParamId, ParamStore, Slot};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{StyleLabel, TokenId, Vocab};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_REPETITION_PENALTY: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Must equal `d_model`: the style vector is added to every encoder position.
    pub style_dim: usize,
    /// Must equal `d_model`: learned positions are added to token embeddings.
    pub pos_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub init_std: f64,
}

impl GeneratorConfig {
    /// 2+2 layers, 4 heads, 64-dim.
    pub fn desk(vocab_size: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_model: 64,
            style_dim: 64,
            pos_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 256,
            max_positions: 128,
            init_std: 0.1,
        }
    }

    /// 2+2 layers, 16-dim; small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_model: 16,
            style_dim: 16,
            pos_dim: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 32,
            max_positions: 64,
            init_std: 0.5,
        }
    }

    /// 12+12 layers, 16 heads, 1024-dim.
    pub fn full_scale(vocab_size: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            d_model: 1024,
            style_dim: 1024,
            pos_dim: 1024,
            heads: 16,
            encoder_layers: 12,
            decoder_layers: 12,
            d_ff: 4096,
            max_positions: 1024,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.vocab_size,
            self.d_model,
            self.heads,
            self.encoder_layers,
            self.decoder_layers,
            self.d_ff,
            self.max_positions,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.style_dim != self.d_model || self.pos_dim != self.d_model {
            return Err(Error::Config("style_dim and pos_dim must equal d_model".into()));
        }
        if self.vocab_size < Vocab::RESERVED.len() {
            return Err(Error::Config("vocabulary is smaller than the reserved block".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Source sentence fed to the encoder: token ids or per-position distributions.
#[derive(Clone, Copy, Debug)]
pub enum Source<'s> {
    Hard(&'s [TokenId]),
    /// `len x vocab` probabilities.
    Soft(NodeId),
}

/// Per-position probability distributions over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSequence {
    pub probs: Mat,
}

impl SoftSequence {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn argmax(&self) -> Vec<TokenId> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().unwrap()))
            .collect()
    }

    pub fn one_hot(ids: &[TokenId], vocab_size: usize) -> SoftSequence {
        let mut probs = Mat::zeros((ids.len(), vocab_size));
        for (i, &t) in ids.iter().enumerate() {
            probs[[i, t]] = 1.0;
        }
        SoftSequence { probs }
    }
}

/// Soft decoding result inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct SoftDecode {
    /// `len x vocab` distributions, the stopping position excluded.
    pub probs: NodeId,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tokens: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    styles: ParamId,
    out_bias: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// First index of the maximum; NaN never wins.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Divides the positive logits of already generated tokens by `penalty` and
/// multiplies their negative logits by it.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[TokenId], penalty: f64) {
    let mut seen = vec![false; logits.len()];
    for &t in generated {
        if t < seen.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Tokens that may never be emitted: padding, BOS, delimiters and style tokens.
fn banned(t: TokenId) -> bool {
    matches!(
        t,
        Vocab::PAD | Vocab::BOS | Vocab::P1 | Vocab::P2 | Vocab::RES | Vocab::STYLE_NATURAL | Vocab::STYLE_FEEDBACK
    )
}

/// Additive logit mask for decoding position `step`; EOS is banned at step 0
/// so outputs are never empty.
fn decode_mask(vocab_size: usize, step: usize) -> Mat {
    Mat::from_shape_fn((1, vocab_size), |(_, t)| {
        if banned(t) || (step == 0 && t == Vocab::EOS) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Generator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let std = config.init_std;
        let tokens = store.add("tokens", params::normal(&mut rng, config.vocab_size, d, std));
        let enc_pos = store.add("enc_pos", params::normal(&mut rng, config.max_positions, d, std));
        let dec_pos = store.add("dec_pos", params::normal(&mut rng, config.max_positions, d, std));
        let styles = store.add("styles", params::normal(&mut rng, StyleLabel::ALL.len(), d, std));
        let out_bias = store.add("out_bias", Mat::zeros((1, config.vocab_size)));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("enc.{i}"), d, config.heads, config.d_ff))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "enc.ln_out", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &mut rng, &format!("dec.{i}"), d, config.heads, config.d_ff))
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "dec.ln_out", d);
        Ok(Generator {
            config,
            params: store,
            layout: Layout {
                tokens,
                enc_pos,
                dec_pos,
                styles,
                out_bias,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
            },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.layout.tokens
    }

    pub fn style_embeddings(&self) -> ParamId {
        self.layout.styles
    }

    /// Encodes `history ++ [RES] ++ x` with the style vector for `style` added
    /// to every position.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        slot: Slot,
        history: &[TokenId],
        x: Source<'_>,
        style: StyleLabel,
    ) -> Result<NodeId> {
        let e = g.param(slot, self.layout.tokens);
        let mut prefix = history.to_vec();
        prefix.push(Vocab::RES);
        let head = g.gather(e, &prefix);
        let body = match x {
            Source::Hard(ids) => {
                if ids.is_empty() {
                    return Err(Error::EmptySequence);
                }
                g.gather(e, ids)
            }
            Source::Soft(p) => {
                if g.shape(p).0 == 0 {
                    return Err(Error::EmptySequence);
                }
                g.matmul(p, e)
            }
        };
        let n = prefix.len() + g.shape(body).0;
        self.check_len(n)?;
        let tokens = g.concat_rows(&[head, body]);
        let pos_table = g.param(slot, self.layout.enc_pos);
        let pos = g.slice_rows(pos_table, 0, n);
        let styles = g.param(slot, self.layout.styles);
        let s = g.slice_rows(styles, style.index(), 1);
        let mut h = g.add(tokens, pos);
        h = g.add_row(h, s);
        for layer in &self.layout.encoder {
            h = layer.forward(g, slot, h, None);
        }
        Ok(self.layout.enc_norm.forward(g, slot, h))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_positions {
            return Err(Error::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn logits(&self, g: &mut Graph<'_>, slot: Slot, hidden: NodeId) -> NodeId {
        let h = self.layout.dec_norm.forward(g, slot, hidden);
        let e = g.param(slot, self.layout.tokens);
        let b = g.param(slot, self.layout.out_bias);
        let l = g.matmul_t(h, e);
        g.add_row(l, b)
    }

    /// Teacher-forced log-probabilities, `(len(target) + 1) x vocab`: row `i`
    /// predicts `target[i]`, the last row predicts EOS.
    pub fn teacher_forced(&self, g: &mut Graph<'_>, slot: Slot, memory: NodeId, target: &[TokenId]) -> Result<NodeId> {
        let n = target.len() + 1;
        self.check_len(n)?;
        let mut inputs = Vec::with_capacity(n);
        inputs.push(Vocab::BOS);
        inputs.extend_from_slice(target);
        let e = g.param(slot, self.layout.tokens);
        let x = g.gather(e, &inputs);
        let pos_table = g.param(slot, self.layout.dec_pos);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut h = g.add(x, pos);
        let mask = g.constant(causal_mask(n, n));
        for layer in &self.layout.decoder {
            h = layer.forward(g, slot, h, memory, mask);
        }
        let logits = self.logits(g, slot, h);
        Ok(g.log_softmax(logits))
    }

    /// Summed negative log-likelihood of `target ++ [EOS]`. Trailing PAD and
    /// EOS ids in `target` are ignored.
    pub fn sequence_nll(&self, g: &mut Graph<'_>, slot: Slot, memory: NodeId, target: &[TokenId]) -> Result<NodeId> {
        let target = strip_padding(target);
        if target.is_empty() {
            return Err(Error::EmptySequence);
        }
        let lp = self.teacher_forced(g, slot, memory, target)?;
        let gold: Vec<(usize, usize)> = target
            .iter()
            .copied()
            .chain(std::iter::once(Vocab::EOS))
            .enumerate()
            .collect();
        Ok(nll_of_picked(g, lp, &gold))
    }

    fn start_caches(&self, g: &mut Graph<'_>, slot: Slot, memory: NodeId) -> Vec<LayerCache> {
        self.layout
            .decoder
            .iter()
            .map(|l| l.start_cache(g, slot, memory))
            .collect()
    }

    fn step(&self, g: &mut Graph<'_>, slot: Slot, input: NodeId, t: usize, caches: &mut [LayerCache]) -> NodeId {
        let pos_table = g.param(slot, self.layout.dec_pos);
        let pos = g.slice_rows(pos_table, t, 1);
        let mut h = g.add(input, pos);
        for (layer, cache) in self.layout.decoder.iter().zip(caches.iter_mut()) {
            h = layer.step(g, slot, h, cache);
        }
        self.logits(g, slot, h)
    }

    /// Autoregressive soft decoding: each step feeds back the expected
    /// embedding under the previous distribution. Stops before the first
    /// position whose most likely token is EOS, or after `max_len` positions.
    pub fn soft_decode(
        &self,
        g: &mut Graph<'_>,
        slot: Slot,
        memory: NodeId,
        max_len: usize,
        temperature: f64,
    ) -> Result<SoftDecode> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        self.check_len(max_len)?;
        let v = self.config.vocab_size;
        let e = g.param(slot, self.layout.tokens);
        let mut caches = self.start_caches(g, slot, memory);
        let mut input = g.gather(e, &[Vocab::BOS]);
        let mut rows = Vec::with_capacity(max_len);
        let later_mask = g.constant(decode_mask(v, 1));
        for t in 0..max_len {
            let logits = self.step(g, slot, input, t, &mut caches);
            let mask = if t == 0 {
                g.constant(decode_mask(v, 0))
            } else {
                later_mask
            };
            let masked = g.add(logits, mask);
            let scaled = if temperature == 1.0 {
                masked
            } else {
                g.scale(masked, 1.0 / temperature)
            };
            let p = g.softmax(scaled);
            if t > 0 && argmax(g.value(p).as_slice().unwrap()) == Vocab::EOS {
                break;
            }
            rows.push(p);
            input = g.matmul(p, e);
        }
        let len = rows.len();
        let probs = if len == 1 { rows[0] } else { g.concat_rows(&rows) };
        Ok(SoftDecode { probs, len })
    }

    /// Soft transfer of `x` (given `history`) into `style`, outside any training graph.
    pub fn forward_soft(
        &self,
        x: &[TokenId],
        history: &[TokenId],
        style: StyleLabel,
        max_len: usize,
        temperature: f64,
    ) -> Result<SoftSequence> {
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let memory = self.encode(&mut g, slot, history, Source::Hard(x), style)?;
        let soft = self.soft_decode(&mut g, slot, memory, max_len, temperature)?;
        Ok(SoftSequence {
            probs: g.value(soft.probs).clone(),
        })
    }

    /// Greedy decoding over penalized logits. The output excludes EOS and has
    /// between 1 and `max_len` tokens.
    pub fn generate(
        &self,
        x: &[TokenId],
        history: &[TokenId],
        style: StyleLabel,
        max_len: usize,
        repetition_penalty: f64,
    ) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(repetition_penalty >= 1.0) {
            return Err(Error::Config("repetition penalty must be at least 1".into()));
        }
        self.check_len(max_len)?;
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let memory = self.encode(&mut g, slot, history, Source::Hard(x), style)?;
        let e = g.param(slot, self.layout.tokens);
        let mut caches = self.start_caches(&mut g, slot, memory);
        let mut out = Vec::with_capacity(max_len);
        let mut next = Vocab::BOS;
        for t in 0..max_len {
            let input = g.gather(e, &[next]);
            let logits = self.step(&mut g, slot, input, t, &mut caches);
            let mut l: Vec<f64> = g.value(logits).iter().copied().collect();
            apply_repetition_penalty(&mut l, &out, repetition_penalty);
            for (tok, v) in l.iter_mut().enumerate() {
                if banned(tok) || (t == 0 && tok == Vocab::EOS) {
                    *v = f64::NEG_INFINITY;
                }
            }
            next = argmax(&l);
            if next == Vocab::EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Next-token logits after the decoder has consumed `prefix` (without BOS).
    pub fn next_logits(
        &self,
        x: &[TokenId],
        history: &[TokenId],
        style: StyleLabel,
        prefix: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let memory = self.encode(&mut g, slot, history, Source::Hard(x), style)?;
        self.check_len(prefix.len() + 1)?;
        let e = g.param(slot, self.layout.tokens);
        let mut caches = self.start_caches(&mut g, slot, memory);
        let mut logits = None;
        for (t, &tok) in std::iter::once(&Vocab::BOS).chain(prefix).enumerate() {
            let input = g.gather(e, &[tok]);
            logits = Some(self.step(&mut g, slot, input, t, &mut caches));
        }
        Ok(g.value(logits.expect("at least BOS")).iter().copied().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_model(path, "generator", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Generator> {
        let (config, store) = crate::io::load_model(path, "generator")?;
        let mut gen = Generator::new(config, 0)?;
        gen.params.assign_from(&store).map_err(Error::Config)?;
        Ok(gen)
    }
}

/// `target` without trailing PAD/EOS ids.
pub fn strip_padding(target: &[TokenId]) -> &[TokenId] {
    let end = target
        .iter()
        .rposition(|&t| t != Vocab::PAD && t != Vocab::EOS)
        .map_or(0, |i| i + 1);
    &target[..end]
}

/// `-sum(logprobs[r, c])` over the given cells, as a `1 x 1` node.
pub fn nll_of_picked(g: &mut Graph<'_>, logprobs: NodeId, cells: &[(usize, usize)]) -> NodeId {
    let picked = g.pick(logprobs, cells);
    let total = g.sum(picked);
    g.scale(total, -1.0)
}

/// Expected embedding `probs · table` on plain matrices.
pub fn expected_embedding(probs: &Mat, table: &Mat) -> Mat {
    probs.dot(table)
}

/// Sums of each row of a soft sequence, for normalization checks.
pub fn row_sums(probs: &Mat) -> Vec<f64> {
    probs.sum_axis(Axis(1)).to_vec()
}
