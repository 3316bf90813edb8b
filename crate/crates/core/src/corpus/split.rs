use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, StyleLabel, StyleTransferExample};
use crate::error::{Error, Result};

/// Train/valid/test ratios plus the shuffling seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.valid, self.test];
        if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                r
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items over the three ratios.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let ratios = [self.train, self.valid, self.test];
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCorpus {
    pub train: Vec<StyleTransferExample>,
    pub valid: Vec<StyleTransferExample>,
    pub test: Vec<StyleTransferExample>,
}

impl StyleCorpus {
    pub fn splits(&self) -> [&[StyleTransferExample]; 3] {
        [&self.train, &self.valid, &self.test]
    }
}

/// Balances the two styles by subsampling `dialogue` down to `|feedback|`,
/// labels dialogue 0 and feedback 1, and splits with both classes spread
/// evenly over every split.
pub fn build_style_corpus(
    dialogue: &[Conversation],
    feedback: &[Conversation],
    spec: SplitSpec,
) -> Result<StyleCorpus> {
    spec.validate()?;
    if feedback.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dialogue.len() < feedback.len() {
        return Err(Error::Config(format!(
            "need at least as many dialogue examples ({}) as feedback examples ({})",
            dialogue.len(),
            feedback.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = feedback.len();

    let mut natural: Vec<StyleTransferExample> = dialogue
        .choose_multiple(&mut rng, n)
        .map(|c| StyleTransferExample {
            style: StyleLabel::Natural,
            ..StyleTransferExample::from(c)
        })
        .collect();
    let mut fb: Vec<StyleTransferExample> = feedback
        .iter()
        .map(|c| StyleTransferExample {
            style: StyleLabel::Feedback,
            ..StyleTransferExample::from(c)
        })
        .collect();
    natural.shuffle(&mut rng);
    fb.shuffle(&mut rng);

    // Split totals first, then divide each total between the classes; odd
    // totals alternate which class gets the extra example.
    let totals = spec.apportion(2 * n);
    let mut natural_counts = [0usize; 3];
    let mut give_natural_extra = true;
    for (s, &t) in totals.iter().enumerate() {
        natural_counts[s] = t / 2;
        if t % 2 == 1 {
            if give_natural_extra {
                natural_counts[s] += 1;
            }
            give_natural_extra = !give_natural_extra;
        }
    }

    let mut nat = natural.into_iter();
    let mut fdb = fb.into_iter();
    let mut splits: Vec<Vec<StyleTransferExample>> = Vec::with_capacity(3);
    for s in 0..3 {
        let mut part: Vec<StyleTransferExample> = nat.by_ref().take(natural_counts[s]).collect();
        part.extend(fdb.by_ref().take(totals[s] - natural_counts[s]));
        part.shuffle(&mut rng);
        splits.push(part);
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(StyleCorpus { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;

    fn convs(n: usize, tag: &str) -> Vec<Conversation> {
        (0..n)
            .map(|i| {
                Conversation::from_texts(
                    &[format!("{tag} ctx {i}")],
                    &format!("{tag} resp {i}"),
                    StyleLabel::Natural,
                    Speaker::Human,
                )
                .unwrap()
            })
            .collect()
    }

    fn class_counts(split: &[StyleTransferExample]) -> (usize, usize) {
        let fb = split.iter().filter(|e| e.style == StyleLabel::Feedback).count();
        (split.len() - fb, fb)
    }

    #[test]
    fn ten_plus_ten_is_balanced_per_split() {
        let c = build_style_corpus(&convs(15, "d"), &convs(10, "f"), SplitSpec::default()).unwrap();
        assert_eq!([c.train.len(), c.valid.len(), c.test.len()], [16, 2, 2]);
        for split in c.splits() {
            let (a, b) = class_counts(split);
            assert!(a.abs_diff(b) <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn same_seed_same_splits() {
        let d = convs(30, "d");
        let f = convs(10, "f");
        let a = build_style_corpus(&d, &f, SplitSpec::default()).unwrap();
        let b = build_style_corpus(&d, &f, SplitSpec::default()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let other = build_style_corpus(
            &d,
            &f,
            SplitSpec {
                seed: 9,
                ..SplitSpec::default()
            },
        )
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn odd_sizes_stay_within_one() {
        for n in 1..40 {
            let c = build_style_corpus(&convs(n + 3, "d"), &convs(n, "f"), SplitSpec::default()).unwrap();
            let total = 2 * n;
            let targets = [0.8, 0.1, 0.1].map(|r| r * total as f64);
            for (split, t) in c.splits().iter().zip(targets) {
                assert!((split.len() as f64 - t).abs() <= 1.0, "n={n}");
                let (a, b) = class_counts(split);
                assert!(a.abs_diff(b) <= 1, "n={n}");
            }
        }
    }

    #[test]
    fn rejects_empty_feedback_and_small_dialogue() {
        assert!(build_style_corpus(&convs(3, "d"), &[], SplitSpec::default()).is_err());
        assert!(build_style_corpus(&convs(3, "d"), &convs(4, "f"), SplitSpec::default()).is_err());
    }

    #[test]
    fn rejects_bad_ratios() {
        let spec = SplitSpec {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        };
        assert!(build_style_corpus(&convs(3, "d"), &convs(3, "f"), spec).is_err());
    }
}
