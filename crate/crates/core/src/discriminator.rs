//! Transformer-encoder style classifier with a class-attention pooling query.

use std::path::Path;

use f2r_autograd::nn::{EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use f2r_autograd::{params, Graph, Mat, NodeId, ParamId, ParamStore, Slot};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{StyleLabel, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::generator::{SoftSequence, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Kept for configuration parity; the classifier itself has no style input.
    pub style_dim: usize,
    pub pos_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Classify `history ++ [RES] ++ x` rather than `x` alone.
    pub with_history: bool,
    pub init_std: f64,
}

impl DiscriminatorConfig {
    /// 4 layers, 4 heads, 256-dim.
    pub fn standard(vocab_size: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_model: 256,
            style_dim: 256,
            pos_dim: 256,
            heads: 4,
            layers: 4,
            d_ff: 256,
            max_positions: 256,
            with_history: true,
            init_std: 0.02,
        }
    }

    /// 2 layers, 4 heads, 64-dim.
    pub fn desk(vocab_size: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_model: 64,
            style_dim: 64,
            pos_dim: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            max_positions: 128,
            with_history: true,
            init_std: 0.1,
        }
    }

    /// 2 layers, 16-dim; used for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            d_model: 16,
            style_dim: 16,
            pos_dim: 16,
            heads: 2,
            layers: 2,
            d_ff: 32,
            max_positions: 64,
            with_history: true,
            init_std: 0.5,
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
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.pos_dim != self.d_model {
            return Err(Error::Config("pos_dim must equal d_model".into()));
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

/// The sentence to classify, outside a graph.
#[derive(Clone, Copy, Debug)]
pub enum Sentence<'a> {
    Ids(&'a [TokenId]),
    Soft(&'a SoftSequence),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePrediction {
    pub probs: [f64; 2],
    pub class: StyleLabel,
}

impl StylePrediction {
    pub fn prob(&self, s: StyleLabel) -> f64 {
        self.probs[s.index()]
    }
}

/// Graph nodes of one classification pass.
#[derive(Clone, Debug)]
pub struct DiscForward {
    /// `1 x 2` log-probabilities.
    pub log_probs: NodeId,
    /// Per layer, per head: `1 x n` weights of the pooling query over the input tokens.
    pub attention: Vec<Vec<NodeId>>,
    pub n_tokens: usize,
}

#[derive(Clone, Debug)]
struct ClassBlock {
    norm_query: LayerNorm,
    norm_tokens: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    tokens: ParamId,
    pos: ParamId,
    cls: ParamId,
    encoder: Vec<EncoderLayer>,
    pooling: Vec<ClassBlock>,
    out_norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Attention of the pooling query, per layer and head, with the token strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub tokens: Vec<String>,
    /// `layers[l][h][i]`: weight of head `h` in layer `l` on token `i`.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionMap {
    /// Attention mass on `positions`, averaged over layers and heads.
    pub fn mean_mass(&self, positions: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for layer in &self.layers {
            for head in layer {
                total += positions.iter().map(|&p| head[p]).sum::<f64>();
                count += 1;
            }
        }
        total / count as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let std = config.init_std;
        let tokens = store.add("tokens", params::normal(&mut rng, config.vocab_size, d, std));
        let pos = store.add("pos", params::normal(&mut rng, config.max_positions, d, std));
        let cls = store.add("cls", params::normal(&mut rng, 1, d, std));
        let mut encoder = Vec::with_capacity(config.layers);
        let mut pooling = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            pooling.push(ClassBlock {
                norm_query: LayerNorm::new(&mut store, &format!("pool.{i}.ln_q"), d),
                norm_tokens: LayerNorm::new(&mut store, &format!("pool.{i}.ln_kv"), d),
                attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("pool.{i}.attn"), d, config.heads),
                norm_ff: LayerNorm::new(&mut store, &format!("pool.{i}.ln_ff"), d),
                ff: FeedForward::new(&mut store, &mut rng, &format!("pool.{i}.ff"), d, config.d_ff),
            });
            encoder.push(EncoderLayer::new(
                &mut store,
                &mut rng,
                &format!("enc.{i}"),
                d,
                config.heads,
                config.d_ff,
            ));
        }
        let out_norm = LayerNorm::new(&mut store, "ln_out", d);
        let head = Linear {
            weight: store.add("head.weight", params::normal(&mut rng, d, 2, 0.02)),
            bias: store.add("head.bias", Mat::zeros((1, 2))),
        };
        Ok(Discriminator {
            config,
            params: store,
            layout: Layout {
                tokens,
                pos,
                cls,
                encoder,
                pooling,
                out_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.layout.tokens
    }

    /// The token ids the classifier sees before `x`.
    pub fn prefix(&self, history: &[TokenId]) -> Vec<TokenId> {
        if self.config.with_history {
            let mut p = history.to_vec();
            p.push(Vocab::RES);
            p
        } else {
            Vec::new()
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, slot: Slot, history: &[TokenId], x: Source<'_>) -> Result<DiscForward> {
        let e = g.param(slot, self.layout.tokens);
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
        let prefix = self.prefix(history);
        let emb = if prefix.is_empty() {
            body
        } else {
            let head = g.gather(e, &prefix);
            g.concat_rows(&[head, body])
        };
        let n = g.shape(emb).0;
        if n > self.config.max_positions {
            return Err(Error::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        let pos_table = g.param(slot, self.layout.pos);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut tokens = g.add(emb, pos);
        let mut cls = g.param(slot, self.layout.cls);
        let mut attention = Vec::with_capacity(self.config.layers);
        for (block, layer) in self.layout.pooling.iter().zip(&self.layout.encoder) {
            let q = block.norm_query.forward(g, slot, cls);
            let kv = block.norm_tokens.forward(g, slot, tokens);
            let a = block.attn.forward(g, slot, q, kv, None);
            cls = g.add(cls, a.out);
            let f_in = block.norm_ff.forward(g, slot, cls);
            let f = block.ff.forward(g, slot, f_in);
            cls = g.add(cls, f);
            attention.push(a.weights);
            tokens = layer.forward(g, slot, tokens, None);
        }
        let pooled = self.layout.out_norm.forward(g, slot, cls);
        let logits = self.layout.head.forward(g, slot, pooled);
        Ok(DiscForward {
            log_probs: g.log_softmax(logits),
            attention,
            n_tokens: n,
        })
    }

    fn run<T>(&self, x: Sentence<'_>, history: &[TokenId], f: impl FnOnce(&Graph<'_>, &DiscForward) -> T) -> Result<T> {
        let mut g = Graph::new();
        let slot = g.bind(&self.params, false);
        let src = match x {
            Sentence::Ids(ids) => Source::Hard(ids),
            Sentence::Soft(s) => Source::Soft(g.constant(s.probs.clone())),
        };
        let out = self.forward(&mut g, slot, history, src)?;
        Ok(f(&g, &out))
    }

    pub fn classify(&self, x: Sentence<'_>, history: &[TokenId]) -> Result<StylePrediction> {
        self.run(x, history, |g, out| {
            let lp = g.value(out.log_probs);
            let probs = [lp[[0, 0]].exp(), lp[[0, 1]].exp()];
            let class = if probs[1] > probs[0] {
                StyleLabel::Feedback
            } else {
                StyleLabel::Natural
            };
            StylePrediction { probs, class }
        })
    }

    /// Pooling-query attention over the classified tokens. Soft inputs are
    /// labelled with their most likely token.
    pub fn attention(&self, x: Sentence<'_>, history: &[TokenId], vocab: &Vocab) -> Result<AttentionMap> {
        let mut ids = self.prefix(history);
        match x {
            Sentence::Ids(x) => ids.extend_from_slice(x),
            Sentence::Soft(s) => ids.extend(s.argmax()),
        }
        let tokens = ids.iter().map(|&t| vocab.token(t).to_string()).collect();
        self.run(x, history, |g, out| AttentionMap {
            tokens,
            layers: out
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&w| g.value(w).iter().copied().collect()).collect())
                .collect(),
        })
    }

    pub fn export_attention(
        &self,
        x: Sentence<'_>,
        history: &[TokenId],
        vocab: &Vocab,
        out_path: &Path,
    ) -> Result<AttentionMap> {
        let map = self.attention(x, history, vocab)?;
        map.write_json(out_path)?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_model(path, "discriminator", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Discriminator> {
        let (config, store) = crate::io::load_model(path, "discriminator")?;
        let mut d = Discriminator::new(config, 0)?;
        d.params.assign_from(&store).map_err(Error::Config)?;
        Ok(d)
    }
}
