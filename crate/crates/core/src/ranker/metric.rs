use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Zero-based rank of the correct candidate. Candidates scoring higher, and
/// candidates with an equal score at a lower index, rank ahead of it.
pub fn rank_of(scores: &[f64], correct: usize) -> usize {
    let c = scores[correct];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > c || (s == c && i < correct))
        .count()
}

/// Fraction of examples whose correct candidate ranks in the top `k`.
pub fn hits_at_k(scored: &[(Vec<f64>, usize)], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if scored.is_empty() {
        return 0.0;
    }
    let hits = scored.iter().filter(|(s, c)| rank_of(s, *c) < k).count();
    hits as f64 / scored.len() as f64
}

/// [`hits_at_k`] over examples scored by `scorer`.
pub fn hits_at_k_with<E, F>(scorer: F, examples: &[E], correct: impl Fn(&E) -> usize, k: usize) -> Result<f64>
where
    F: FnMut(&E) -> Result<Vec<f64>>,
{
    let mut scorer = scorer;
    let scored = examples
        .iter()
        .map(|e| Ok((scorer(e)?, correct(e))))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits_at_k(&scored, k))
}

/// Metric report written by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "hits@1/20")]
    pub hits_at_1: f64,
    pub n: usize,
    pub seed: u64,
}
