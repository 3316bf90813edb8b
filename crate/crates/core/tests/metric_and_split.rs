use f2r_core::corpus::{build_style_corpus, Conversation, Speaker, SplitSpec, StyleLabel, StyleTransferExample};
use f2r_core::ranker::hits_at_k;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scored(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ((0..20).map(|_| rng.gen::<f64>()).collect(), rng.gen_range(0..20)))
        .collect()
}

#[test]
fn random_scorer_hits_one_in_twenty() {
    for seed in 0..3 {
        let h = hits_at_k(&random_scored(10_000, seed), 1);
        assert!((h - 0.05).abs() <= 0.01, "seed {seed}: {h}");
    }
}

#[test]
fn oracle_scorer_is_perfect() {
    let scored: Vec<_> = random_scored(10_000, 5)
        .into_iter()
        .map(|(mut s, c)| {
            s[c] = 2.0;
            (s, c)
        })
        .collect();
    assert_eq!(hits_at_k(&scored, 1), 1.0);
}

#[test]
fn constant_scorer_only_credits_index_zero() {
    let scored: Vec<_> = (0..20).map(|c| (vec![0.5; 20], c)).collect();
    assert_eq!(hits_at_k(&scored, 1), 0.05);
}

fn convs(n: usize, style: StyleLabel) -> Vec<Conversation> {
    (0..n)
        .map(|i| Conversation::from_texts(&["hi", "hello"], &format!("reply {i}"), style, Speaker::Human).unwrap())
        .collect()
}

fn counts(split: &[StyleTransferExample]) -> (usize, usize) {
    let fb = split.iter().filter(|e| e.style == StyleLabel::Feedback).count();
    (split.len() - fb, fb)
}

#[test]
fn sixty_thousand_each_split_into_96k_12k_12k() {
    let dialogue = convs(60_000, StyleLabel::Natural);
    let feedback = convs(60_000, StyleLabel::Feedback);
    let corpus = build_style_corpus(&dialogue, &feedback, SplitSpec::default()).unwrap();
    let sizes: Vec<usize> = corpus.splits().iter().map(|s| s.len()).collect();
    assert_eq!(sizes, [96_000, 12_000, 12_000]);
    for split in corpus.splits() {
        let (nat, fb) = counts(split);
        assert!(nat.abs_diff(fb) <= 1, "{nat} vs {fb}");
    }
}
