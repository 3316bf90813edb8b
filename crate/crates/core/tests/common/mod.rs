#![allow(dead_code)]

use f2r_autograd::gradcheck::{central_difference, relative_error};
use f2r_autograd::{Grads, ParamId, ParamStore};
use f2r_core::corpus::{EncodedExample, StyleLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct Draw {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compares analytic gradients with central differences on `draws` random
/// entries whose analytic gradient is not negligible.
pub fn check_gradients<F>(store: &ParamStore, draws: usize, seed: u64, loss: F) -> Vec<Draw>
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    let (_, grads) = loss(store);
    let mut live: Vec<(ParamId, (usize, usize))> = Vec::new();
    for (id, g) in grads.iter() {
        for ((r, c), v) in g.indexed_iter() {
            if v.abs() > 1e-7 {
                live.push((id, (r, c)));
            }
        }
    }
    assert!(live.len() >= draws, "only {} live gradient entries", live.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    (0..draws)
        .map(|_| {
            let (id, index) = live[rng.gen_range(0..live.len())];
            let analytic = grads.get(id).unwrap()[index];
            let numeric = central_difference(&mut work, id, index, FD_STEP, |s| loss(s).0);
            Draw {
                name: work.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel: relative_error(analytic, numeric, GRAD_FLOOR),
            }
        })
        .collect()
}

pub fn worst(draws: &[Draw]) -> &Draw {
    draws.iter().max_by(|a, b| a.rel.total_cmp(&b.rel)).unwrap()
}

/// A small example over a 20-token vocabulary.
pub fn tiny_example(style: StyleLabel) -> EncodedExample {
    EncodedExample {
        history: vec![4, 11, 12, 5, 13],
        response: vec![14, 15, 16],
        style,
    }
}
