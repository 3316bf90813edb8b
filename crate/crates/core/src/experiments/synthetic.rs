use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_history, normalize, Conversation, Speaker, StyleLabel};
use crate::error::{Error, Result};
use crate::ranker::{RankingExample, CANDIDATES};

/// A topic slot and the values it can take.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicSlot {
    pub name: String,
    pub values: Vec<String>,
}

/// Template pools for a synthetic dialogue world. `{v}` is the slot value
/// and `{slot}` the slot name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub fillers: Vec<String>,
    pub slots: Vec<TopicSlot>,
    pub openers: Vec<String>,
    pub questions: Vec<String>,
    pub responses: Vec<String>,
    pub n_feedback: usize,
    pub n_dialogue: usize,
    /// Fraction of feedback whose base response is rewritten in the second person.
    pub second_person_rate: f64,
    pub seed: u64,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let slot = |name: &str, values: &[&str]| TopicSlot {
            name: name.to_string(),
            values: strings(values),
        };
        SyntheticSpec {
            fillers: strings(&[
                "you should have said",
                "you could have said",
                "you could say",
                "you should say",
                "you should have told me",
                "tell me",
                "you could answer",
                "you should have answered",
                "say",
                "you could have told me",
            ]),
            slots: vec![
                slot(
                    "food",
                    &[
                        "pizza", "pasta", "sushi", "tacos", "burgers", "salad", "curry", "pancakes", "waffles",
                        "noodles",
                    ],
                ),
                slot(
                    "color",
                    &[
                        "blue", "green", "red", "purple", "yellow", "orange", "black", "pink", "teal", "gray",
                    ],
                ),
                slot(
                    "animal",
                    &[
                        "dogs", "cats", "horses", "rabbits", "parrots", "turtles", "hamsters", "dolphins",
                    ],
                ),
                slot(
                    "sport",
                    &[
                        "soccer", "tennis", "hockey", "baseball", "golf", "swimming", "boxing", "cycling",
                    ],
                ),
                slot(
                    "hobby",
                    &[
                        "painting",
                        "gardening",
                        "reading",
                        "cooking",
                        "hiking",
                        "fishing",
                        "dancing",
                        "singing",
                    ],
                ),
                slot(
                    "city",
                    &[
                        "paris", "london", "tokyo", "rome", "berlin", "madrid", "sydney", "chicago",
                    ],
                ),
                slot(
                    "drink",
                    &["coffee", "tea", "juice", "milk", "lemonade", "cocoa", "soda", "water"],
                ),
                slot(
                    "music",
                    &["jazz", "rock", "pop", "blues", "rap", "reggae", "techno", "folk"],
                ),
            ],
            openers: strings(&[
                "hi there !",
                "hello , how are you ?",
                "good morning !",
                "hey , nice to meet you .",
                "what a lovely day .",
                "hi , how is it going ?",
            ]),
            questions: strings(&[
                "do you like {v} ?",
                "what do you think of {v} ?",
                "how do you feel about {v} ?",
                "is {v} any good ?",
                "have you tried {v} ?",
                "are you into {v} ?",
            ]),
            responses: strings(&[
                "my favorite {slot} is {v}",
                "i really love {v}",
                "i would pick {v} for sure",
                "i enjoy {v} a lot",
                "{v} is the best {slot}",
                "i am a big fan of {v}",
                "yes , {v} is great",
                "i think {v} is wonderful",
            ]),
            n_feedback: 2000,
            n_dialogue: 2000,
            second_person_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fillers.is_empty()
            || self.slots.is_empty()
            || self.slots.iter().any(|s| s.values.is_empty())
            || self.openers.is_empty()
            || self.questions.is_empty()
            || self.responses.is_empty()
        {
            return Err(Error::Config("synthetic template pools must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.second_person_rate) {
            return Err(Error::Config("second_person_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every template and value string, for vocabulary-hygiene checks.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.fillers.iter().map(String::as_str));
        out.extend(self.openers.iter().map(String::as_str));
        out.extend(self.questions.iter().map(String::as_str));
        out.extend(self.responses.iter().map(String::as_str));
        for s in &self.slots {
            out.push(&s.name);
            out.extend(s.values.iter().map(String::as_str));
        }
        out
    }
}

/// First-person to second-person rewrite of a base response.
pub fn to_second_person(text: &str) -> String {
    text.split(' ')
        .map(|w| match w {
            "i" => "you",
            "my" => "your",
            "am" => "are",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One instantiated topic: slot index and value index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topic {
    pub slot: usize,
    pub value: usize,
}

/// A synthetic feedback conversation with its hidden natural counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub feedback: Conversation,
    pub oracle: String,
    pub filler: String,
    pub topic: Topic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub dialogue: Vec<Conversation>,
    pub pairs: Vec<SyntheticPair>,
}

impl SyntheticCorpus {
    pub fn feedback(&self) -> Vec<Conversation> {
        self.pairs.iter().map(|p| p.feedback.clone()).collect()
    }
}

/// Samples conversations from a spec's template pools.
pub struct World<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
}

impl<'a> World<'a> {
    pub fn new(spec: &'a SyntheticSpec, seed: u64) -> Result<World<'a>> {
        spec.validate()?;
        Ok(World {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn topic(&mut self) -> Topic {
        let slot = self.rng.gen_range(0..self.spec.slots.len());
        let value = self.rng.gen_range(0..self.spec.slots[slot].values.len());
        Topic { slot, value }
    }

    fn fill(&self, template: &str, t: Topic) -> String {
        let s = &self.spec.slots[t.slot];
        template.replace("{v}", &s.values[t.value]).replace("{slot}", &s.name)
    }

    fn pick<'s>(&mut self, pool: &'s [String]) -> &'s str {
        pool.choose(&mut self.rng).expect("validated nonempty")
    }

    /// Opening bot turn, then the human's question about the topic.
    pub fn history(&mut self, t: Topic) -> Vec<String> {
        let opener = self.pick(&self.spec.openers).to_string();
        let q = self.pick(&self.spec.questions).to_string();
        vec![opener, self.fill(&q, t)]
    }

    pub fn response(&mut self, t: Topic) -> String {
        let r = self.pick(&self.spec.responses).to_string();
        self.fill(&r, t)
    }

    pub fn natural(&mut self) -> (Conversation, Topic) {
        let t = self.topic();
        let turns = self.history(t);
        let response = self.response(t);
        let conv = Conversation::from_texts(&turns, &response, StyleLabel::Natural, Speaker::Bot)
            .expect("templates are nonempty");
        (conv, t)
    }

    pub fn feedback(&mut self) -> SyntheticPair {
        let t = self.topic();
        let turns = self.history(t);
        let oracle = self.response(t);
        let filler = self.pick(&self.spec.fillers).to_string();
        let body = if self.rng.gen::<f64>() < self.spec.second_person_rate {
            to_second_person(&oracle)
        } else {
            oracle.clone()
        };
        let text = format!("{filler} {body}");
        SyntheticPair {
            feedback: Conversation::from_texts(&turns, &text, StyleLabel::Feedback, Speaker::Bot)
                .expect("templates are nonempty"),
            oracle,
            filler,
            topic: t,
        }
    }
}

/// Balanced-by-construction synthetic corpus with the oracle pairing recorded
/// beside the feedback (the style labels never reveal it).
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let mut world = World::new(spec, spec.seed)?;
    let dialogue = (0..spec.n_dialogue).map(|_| world.natural().0).collect();
    let pairs = (0..spec.n_feedback).map(|_| world.feedback()).collect();
    Ok(SyntheticCorpus { dialogue, pairs })
}

/// Ranking examples over natural conversations: the gold response plus
/// distractors drawn from conversations on other topics.
pub fn ranking_examples(convs: &[(Conversation, Topic)], n_turns: usize, seed: u64) -> Result<Vec<RankingExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(convs.len());
    for (i, (conv, topic)) in convs.iter().enumerate() {
        let pool: Vec<&str> = convs
            .iter()
            .enumerate()
            .filter(|(j, (_, t))| *j != i && t != topic)
            .map(|(_, (c, _))| c.final_response.as_str())
            .collect();
        if pool.len() < CANDIDATES - 1 {
            return Err(Error::Config("too few conversations to draw distractors from".into()));
        }
        let mut candidates: Vec<String> = pool
            .choose_multiple(&mut rng, CANDIDATES - 1)
            .map(|s| s.to_string())
            .collect();
        let correct = rng.gen_range(0..CANDIDATES);
        candidates.insert(correct, conv.final_response.clone());
        out.push(RankingExample {
            context: assemble_history(&conv.turns, n_turns),
            candidates,
            correct,
        });
    }
    Ok(out)
}

/// Token-overlap F1 between normalized texts.
pub fn token_f1(predicted: &str, gold: &str) -> f64 {
    let p: Vec<String> = normalize(predicted)
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let g: Vec<String> = normalize(gold)
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut remaining = g.clone();
    let mut overlap = 0usize;
    for t in &p {
        if let Some(i) = remaining.iter().position(|x| x == t) {
            remaining.swap_remove(i);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristic::heuristic_convert;

    #[test]
    fn template_instantiation() {
        let spec = SyntheticSpec {
            fillers: strings(&["you should have said"]),
            responses: strings(&["i am 30"]),
            ..SyntheticSpec::default()
        };
        let mut w = World::new(&spec, 0).unwrap();
        let p = w.feedback();
        assert_eq!(p.feedback.final_response, "you should have said i am 30");
        assert_eq!(p.oracle, "i am 30");
    }

    #[test]
    fn pools_avoid_choice_markers() {
        let spec = SyntheticSpec::default();
        for t in spec.all_texts() {
            for bad in ["if", "not", "whether"] {
                assert!(!t.contains(bad), "{t:?} contains {bad:?}");
            }
        }
    }

    #[test]
    fn heuristic_inverts_every_filler() {
        let spec = SyntheticSpec {
            second_person_rate: 0.5,
            n_feedback: 300,
            n_dialogue: 10,
            ..SyntheticSpec::default()
        };
        let corpus = make_synthetic_corpus(&spec).unwrap();
        for p in &corpus.pairs {
            let converted = heuristic_convert(&p.feedback.final_response);
            assert_eq!(
                token_f1(&converted, &p.oracle),
                1.0,
                "{:?} -> {converted:?}",
                p.feedback.final_response
            );
        }
    }

    #[test]
    fn sizes_and_determinism() {
        let spec = SyntheticSpec {
            n_feedback: 50,
            n_dialogue: 50,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.dialogue.len(), a.pairs.len());
        assert_eq!(a, make_synthetic_corpus(&spec).unwrap());
        assert!(a.dialogue.iter().all(|c| c.style == StyleLabel::Natural));
        assert!(a.pairs.iter().all(|p| p.feedback.style == StyleLabel::Feedback));
    }

    #[test]
    fn ranking_examples_have_one_gold() {
        let spec = SyntheticSpec::default();
        let mut w = World::new(&spec, 4).unwrap();
        let convs: Vec<_> = (0..40).map(|_| w.natural()).collect();
        let exs = ranking_examples(&convs, 2, 0).unwrap();
        for (ex, (c, _)) in exs.iter().zip(&convs) {
            ex.validate().unwrap();
            assert_eq!(ex.candidates[ex.correct], c.final_response);
            assert!(ex.context.starts_with("[P1] "));
        }
    }

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1("a b c", "a b c"), 1.0);
        assert_eq!(token_f1("x", "a"), 0.0);
        assert!((token_f1("a b", "a b c d") - 2.0 / 3.0).abs() < 1e-12);
    }
}
