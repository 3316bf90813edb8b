//! Central finite differences, used to validate reverse-mode gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward implementation it is testing.

use crate::params::{ParamId, ParamStore};

/// `(f(w + h) - f(w - h)) / 2h` for a single scalar entry of a parameter.
pub fn central_difference<F>(store: &mut ParamStore, id: ParamId, index: (usize, usize), h: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let original = store.get(id)[index];
    store.get_mut(id)[index] = original + h;
    let plus = f(store);
    store.get_mut(id)[index] = original - h;
    let minus = f(store);
    store.get_mut(id)[index] = original;
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::array;

    #[test]
    fn matches_analytic_gradient_of_softmax_cross_entropy() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -1.2, 0.7], [0.1, 0.4, -0.5]]);
        let x = array![[1.0, 2.0]];
        let loss = |s: &ParamStore| {
            let mut g = Graph::new();
            let slot = g.bind(s, true);
            let xn = g.constant(x.clone());
            let wn = g.param(slot, w);
            let logits = g.matmul(xn, wn);
            let lp = g.log_softmax(logits);
            let picked = g.pick(lp, &[(0, 1)]);
            let l = g.scale(picked, -1.0);
            (g.scalar(l), g.backward(l).params(&g, slot))
        };
        let (_, grads) = loss(&store);
        let analytic = grads.get(w).unwrap().clone();
        for r in 0..2 {
            for c in 0..3 {
                let numeric = central_difference(&mut store, w, (r, c), 1e-6, |s| loss(s).0);
                assert!(relative_error(analytic[[r, c]], numeric, 1e-8) < 1e-6);
            }
        }
    }
}
