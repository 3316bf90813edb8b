use f2r_autograd::{Graph, NodeId, Slot};
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, StyleLabel, TokenId};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{strip_padding, Generator, SoftDecode, Source};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// How the discriminator's confidence in the target style becomes a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleLossForm {
    /// `-log(max(p, eps))`
    #[default]
    Log,
    /// `-p`
    Literal,
}

impl StyleLossForm {
    /// The loss for a target-style probability `p`.
    pub fn value(self, p: f64, eps: f64) -> f64 {
        match self {
            StyleLossForm::Log => -p.max(eps).ln(),
            StyleLossForm::Literal => -p,
        }
    }
}

/// Teacher-forced summed NLL of reproducing `x` from `(x, h, s)`. Trailing
/// PAD/EOS ids in the response are ignored here and in the losses below.
pub fn loss_self(gen: &Generator, g: &mut Graph<'_>, slot: Slot, ex: &EncodedExample) -> Result<NodeId> {
    let x = strip_padding(&ex.response);
    let memory = gen.encode(g, slot, &ex.history, Source::Hard(x), ex.style)?;
    gen.sequence_nll(g, slot, memory, x)
}

/// Soft transfer of the example's response into `target`.
pub fn transfer(
    gen: &Generator,
    g: &mut Graph<'_>,
    slot: Slot,
    ex: &EncodedExample,
    target: StyleLabel,
    max_len: usize,
    temperature: f64,
) -> Result<SoftDecode> {
    let x = strip_padding(&ex.response);
    let memory = gen.encode(g, slot, &ex.history, Source::Hard(x), target)?;
    gen.soft_decode(g, slot, memory, max_len, temperature)
}

/// NLL of reconstructing `x` in its source style from the soft transfer `soft`.
pub fn cycle_from_soft(
    gen: &Generator,
    g: &mut Graph<'_>,
    slot: Slot,
    ex: &EncodedExample,
    soft: &SoftDecode,
) -> Result<NodeId> {
    let memory = gen.encode(g, slot, &ex.history, Source::Soft(soft.probs), ex.style)?;
    gen.sequence_nll(g, slot, memory, &ex.response)
}

/// Transfer to `target` then back, scored against the original response.
pub fn loss_cycle(
    gen: &Generator,
    g: &mut Graph<'_>,
    slot: Slot,
    ex: &EncodedExample,
    target: StyleLabel,
    max_len: usize,
    temperature: f64,
) -> Result<NodeId> {
    if target == ex.style {
        return Err(Error::Config(
            "cycle target style must differ from the source style".into(),
        ));
    }
    let soft = transfer(gen, g, slot, ex, target, max_len, temperature)?;
    cycle_from_soft(gen, g, slot, ex, &soft)
}

/// Style loss of the discriminator bound at `slot` on a sentence.
pub fn loss_style(
    disc: &Discriminator,
    g: &mut Graph<'_>,
    slot: Slot,
    history: &[TokenId],
    y: Source<'_>,
    target: StyleLabel,
    form: StyleLossForm,
    eps: f64,
) -> Result<NodeId> {
    let out = disc.forward(g, slot, history, y)?;
    let lp = g.pick(out.log_probs, &[(0, target.index())]);
    let p = g.exp(lp);
    Ok(match form {
        StyleLossForm::Log => {
            let clamped = g.clamp_min(p, eps);
            let l = g.log(clamped);
            g.scale(l, -1.0)
        }
        StyleLossForm::Literal => g.scale(p, -1.0),
    })
}

/// Cross-entropy `-log p(label)` of one classification.
pub fn disc_cross_entropy(
    disc: &Discriminator,
    g: &mut Graph<'_>,
    slot: Slot,
    history: &[TokenId],
    x: Source<'_>,
    label: StyleLabel,
) -> Result<NodeId> {
    let out = disc.forward(g, slot, history, x)?;
    let lp = g.pick(out.log_probs, &[(0, label.index())]);
    Ok(g.scale(lp, -1.0))
}

/// Mean of scalar nodes.
pub fn mean(g: &mut Graph<'_>, xs: &[NodeId]) -> NodeId {
    let all = g.concat_cols(xs);
    let s = g.sum(all);
    g.scale(s, 1.0 / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_form_values() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(StyleLossForm::Log.value(1.0, eps), 0.0);
        assert_eq!(StyleLossForm::Literal.value(1.0, eps), -1.0);
        assert!((StyleLossForm::Log.value(0.5, eps) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((StyleLossForm::Log.value(0.0, eps) - 18.420680743952367).abs() < 1e-9);
    }
}
