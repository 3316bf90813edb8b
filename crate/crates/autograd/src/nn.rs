//! Transformer building blocks expressed as graph operations.
//!
//! Each block only stores [`ParamId`]s; the tensors live in a [`ParamStore`]
//! and are pulled into a [`Graph`] through a bound [`Slot`].

use rand::Rng;

use crate::graph::{Graph, Mat, NodeId, Slot};
use crate::params::{self, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), params::xavier(rng, d_in, d_out)),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId) -> NodeId {
        let w = g.param(slot, self.weight);
        let b = g.param(slot, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId) -> NodeId {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(slot, self.gain);
        let bias = g.param(slot, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d_model, d_ff),
            down: Linear::new(store, rng, &format!("{name}.down"), d_ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId) -> NodeId {
        let h = self.up.forward(g, slot, x);
        let h = g.gelu(h);
        self.down.forward(g, slot, h)
    }
}

/// Output of an attention call: the mixed values plus per-head weight matrices
/// (`queries x keys`, rows sum to one).
pub struct Attended {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d_model.is_multiple_of(heads),
            "d_model must be divisible by heads"
        );
        MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            output: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// Projects `memory` into keys and values.
    pub fn keys_values(&self, g: &mut Graph<'_>, slot: Slot, memory: NodeId) -> (NodeId, NodeId) {
        (self.key.forward(g, slot, memory), self.value.forward(g, slot, memory))
    }

    /// Attention of `query_input` over precomputed keys and values. `mask`, if
    /// given, is an additive `queries x keys` matrix (0 or `-inf`).
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        slot: Slot,
        query_input: NodeId,
        keys: NodeId,
        values: NodeId,
        mask: Option<NodeId>,
    ) -> Attended {
        let q = self.query.forward(g, slot, query_input);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, keys, values)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(keys, h * dh, dh),
                    g.slice_cols(values, h * dh, dh),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let w = g.softmax(scores);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let merged = g.concat_cols(&outs);
        Attended {
            out: self.output.forward(g, slot, merged),
            weights,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        slot: Slot,
        query_input: NodeId,
        memory: NodeId,
        mask: Option<NodeId>,
    ) -> Attended {
        let (k, v) = self.keys_values(g, slot, memory);
        self.attend(g, slot, query_input, k, v, mask)
    }
}

/// Additive causal mask: row `i` may see columns `0..=i + offset`.
pub fn causal_mask(queries: usize, keys: usize) -> Mat {
    let offset = keys - queries;
    Mat::from_shape_fn(
        (queries, keys),
        |(i, j)| {
            if j <= i + offset {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        },
    )
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId, mask: Option<NodeId>) -> NodeId {
        let n = self.norm_attn.forward(g, slot, x);
        let a = self.attn.forward(g, slot, n, n, mask);
        let h = g.add(x, a.out);
        let n = self.norm_ff.forward(g, slot, h);
        let f = self.ff.forward(g, slot, n);
        g.add(h, f)
    }
}

/// Pre-norm transformer decoder layer (causal self-attention, cross-attention, FFN).
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Cached keys/values for one decoder layer during step-wise decoding.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub self_kv: Option<(NodeId, NodeId)>,
    pub cross_kv: (NodeId, NodeId),
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{name}.ln_self"), d_model),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d_model, heads),
            norm_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d_model),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d_model, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    /// Full teacher-forced pass over all target positions at once.
    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId, memory: NodeId, causal: NodeId) -> NodeId {
        let n = self.norm_self.forward(g, slot, x);
        let a = self.self_attn.forward(g, slot, n, n, Some(causal));
        let h = g.add(x, a.out);
        let n = self.norm_cross.forward(g, slot, h);
        let c = self.cross_attn.forward(g, slot, n, memory, None);
        let h = g.add(h, c.out);
        let n = self.norm_ff.forward(g, slot, h);
        let f = self.ff.forward(g, slot, n);
        g.add(h, f)
    }

    pub fn start_cache(&self, g: &mut Graph<'_>, slot: Slot, memory: NodeId) -> LayerCache {
        LayerCache {
            self_kv: None,
            cross_kv: self.cross_attn.keys_values(g, slot, memory),
        }
    }

    /// One decoding position (`1 x d_model`), extending `cache` with its keys/values.
    pub fn step(&self, g: &mut Graph<'_>, slot: Slot, x: NodeId, cache: &mut LayerCache) -> NodeId {
        let n = self.norm_self.forward(g, slot, x);
        let (k_new, v_new) = self.self_attn.keys_values(g, slot, n);
        let (k, v) = match cache.self_kv {
            Some((k, v)) => (g.concat_rows(&[k, k_new]), g.concat_rows(&[v, v_new])),
            None => (k_new, v_new),
        };
        cache.self_kv = Some((k, v));
        let a = self.self_attn.attend(g, slot, n, k, v, None);
        let h = g.add(x, a.out);
        let n = self.norm_cross.forward(g, slot, h);
        let (ck, cv) = cache.cross_kv;
        let c = self.cross_attn.attend(g, slot, n, ck, cv, None);
        let h = g.add(h, c.out);
        let n = self.norm_ff.forward(g, slot, h);
        let f = self.ff.forward(g, slot, n);
        g.add(h, f)
    }
}
