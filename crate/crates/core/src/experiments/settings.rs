use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_history, Conversation, StyleLabel, Turn, Vocab, DEFAULT_CONTEXT_TURNS};
use crate::error::{Error, Result};
use crate::generator::{Generator, DEFAULT_MAX_LEN, DEFAULT_REPETITION_PENALTY};
use crate::heuristic::heuristic_convert;
use crate::ranker::{
    evaluate, fit_left, train_ranker, Architecture, Ranker, RankerConfig, RankerTrainConfig, RankingExample,
    RankingPair,
};

/// Which extra data augments the ranker's dialogue training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "NOFEEDBACK")]
    NoFeedback,
    #[serde(rename = "FEEDBACK")]
    Feedback,
    #[serde(rename = "HEURISTIC")]
    Heuristic,
    #[serde(rename = "FEED2RESP")]
    Feed2Resp,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::NoFeedback,
        Setting::Feedback,
        Setting::Heuristic,
        Setting::Feed2Resp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::NoFeedback => "NOFEEDBACK",
            Setting::Feedback => "FEEDBACK",
            Setting::Heuristic => "HEURISTIC",
            Setting::Feed2Resp => "FEED2RESP",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Setting> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown setting {s:?}")))
    }
}

/// Rewrites a feedback response as a natural one.
pub trait Converter: Sync {
    fn convert(&self, history: &[Turn], feedback: &str) -> Result<String>;
}

pub struct HeuristicConverter;

impl Converter for HeuristicConverter {
    fn convert(&self, _history: &[Turn], feedback: &str) -> Result<String> {
        Ok(heuristic_convert(feedback))
    }
}

/// Greedy transfer to the natural style with a trained generator.
pub struct GeneratorConverter<'a> {
    pub generator: &'a Generator,
    pub vocab: &'a Vocab,
    pub n_turns: usize,
    pub max_history: usize,
    pub max_len: usize,
}

impl<'a> GeneratorConverter<'a> {
    pub fn new(generator: &'a Generator, vocab: &'a Vocab) -> Self {
        GeneratorConverter {
            generator,
            vocab,
            n_turns: DEFAULT_CONTEXT_TURNS,
            max_history: generator.config().max_positions / 2,
            max_len: DEFAULT_MAX_LEN.min(generator.config().max_positions),
        }
    }
}

impl Converter for GeneratorConverter<'_> {
    fn convert(&self, history: &[Turn], feedback: &str) -> Result<String> {
        let h = fit_left(
            self.vocab.encode(&assemble_history(history, self.n_turns)),
            self.max_history,
        );
        let room = self.generator.config().max_positions.saturating_sub(h.len() + 1).max(1);
        let mut x = self.vocab.encode(feedback);
        x.truncate(room);
        if x.is_empty() {
            x.push(Vocab::UNK);
        }
        let y = self
            .generator
            .generate(&x, &h, StyleLabel::Natural, self.max_len, DEFAULT_REPETITION_PENALTY)?;
        Ok(self.vocab.decode(&y))
    }
}

/// Converts every feedback response, keeping input order.
pub fn convert_all(converter: &dyn Converter, feedback: &[Conversation]) -> Result<Vec<String>> {
    feedback
        .par_iter()
        .map(|c| converter.convert(&c.turns, &c.final_response))
        .collect()
}

/// Inputs shared by every setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentData {
    pub dialogue: Vec<Conversation>,
    pub feedback: Vec<Conversation>,
    pub dev: Vec<RankingExample>,
    pub test: Vec<RankingExample>,
}

/// A ranker training example as text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub context: String,
    pub response: String,
}

/// Dialogue pairs, then one pair per feedback conversation whose response
/// depends on the setting.
pub fn build_training_corpus(
    setting: Setting,
    data: &ExperimentData,
    converter: Option<&dyn Converter>,
    n_turns: usize,
) -> Result<Vec<TextPair>> {
    let pair = |c: &Conversation, response: String| TextPair {
        context: assemble_history(&c.turns, n_turns),
        response,
    };
    let mut out: Vec<TextPair> = data
        .dialogue
        .iter()
        .map(|c| pair(c, c.final_response.clone()))
        .collect();
    let responses = match setting {
        Setting::NoFeedback => return Ok(out),
        Setting::Feedback => data.feedback.iter().map(|c| c.final_response.clone()).collect(),
        Setting::Heuristic => convert_all(&HeuristicConverter, &data.feedback)?,
        Setting::Feed2Resp => convert_all(converter.ok_or(Error::MissingConverter)?, &data.feedback)?,
    };
    out.extend(data.feedback.iter().zip(responses).map(|(c, r)| pair(c, r)));
    Ok(out)
}

/// Vocabulary over the contexts and responses of a training corpus.
pub fn corpus_vocab(corpus: &[TextPair], min_count: usize) -> Vocab {
    Vocab::build(
        corpus.iter().flat_map(|p| [p.context.as_str(), p.response.as_str()]),
        min_count,
        None,
    )
}

/// Token ids truncated to `max` positions: contexts keep their end, responses their start.
pub fn encode_pairs(vocab: &Vocab, corpus: &[TextPair], max: usize) -> Vec<RankingPair> {
    corpus
        .iter()
        .map(|p| {
            let mut response = vocab.encode(&p.response);
            response.truncate(max);
            if response.is_empty() {
                response.push(Vocab::UNK);
            }
            RankingPair {
                context: fit_left(vocab.encode(&p.context), max),
                response,
            }
        })
        .collect()
}

/// Paths for runs on real data; all optional so synthetic runs can omit them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPaths {
    pub dialogue: Option<PathBuf>,
    pub feedback: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub converter: Option<PathBuf>,
    pub converter_vocab: Option<PathBuf>,
}

/// Ranker architecture and sizes; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerSpec {
    pub architecture: Architecture,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub codes: usize,
}

impl Default for RankerSpec {
    fn default() -> Self {
        let c = RankerConfig::desk(Architecture::Bi, Vocab::RESERVED.len());
        RankerSpec {
            architecture: c.architecture,
            d_model: c.d_model,
            heads: c.heads,
            layers: c.layers,
            d_ff: c.d_ff,
            max_positions: c.max_positions,
            codes: c.codes,
        }
    }
}

impl RankerSpec {
    pub fn config(&self, vocab_size: usize) -> RankerConfig {
        RankerConfig {
            architecture: self.architecture,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            codes: self.codes,
            ..RankerConfig::desk(self.architecture, vocab_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub setting: Setting,
    pub seeds: Vec<u64>,
    pub corpus: CorpusPaths,
    pub ranker: RankerSpec,
    /// Its seed is replaced by each run's seed.
    pub train: RankerTrainConfig,
    pub n_turns: usize,
    pub min_count: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            setting: Setting::NoFeedback,
            seeds: vec![0, 1, 2],
            corpus: CorpusPaths::default(),
            ranker: RankerSpec::default(),
            train: RankerTrainConfig::default(),
            n_turns: DEFAULT_CONTEXT_TURNS,
            min_count: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.ranker.config(Vocab::RESERVED.len()).validate()
    }
}

/// Mean and population variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub variance: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        if xs.is_empty() {
            return Summary {
                mean: f64::NAN,
                variance: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, variance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub dev: f64,
    pub test: f64,
    pub final_loss: f64,
}

/// HITS@1/20 of every seed and their summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: Setting,
    pub train_size: usize,
    pub vocab_size: usize,
    pub runs: Vec<RunResult>,
    pub dev: Summary,
    pub test: Summary,
}

/// Builds the setting's corpus, trains one ranker per seed and evaluates it
/// on dev and test. The vocabulary comes from the training corpus only.
pub fn run_setting(
    spec: &ExperimentSpec,
    data: &ExperimentData,
    converter: Option<&dyn Converter>,
) -> Result<SettingReport> {
    spec.validate()?;
    let corpus = build_training_corpus(spec.setting, data, converter, spec.n_turns)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = corpus_vocab(&corpus, spec.min_count);
    let config = spec.ranker.config(vocab.len());
    let pairs = encode_pairs(&vocab, &corpus, config.max_positions);
    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut ranker = Ranker::new(config.clone(), seed)?;
            let train = RankerTrainConfig {
                seed,
                ..spec.train.clone()
            };
            let losses = train_ranker(&mut ranker, &pairs, &train)?;
            Ok(RunResult {
                seed,
                dev: evaluate(&ranker, &vocab, &data.dev)?,
                test: evaluate(&ranker, &vocab, &data.test)?,
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dev: Vec<f64> = runs.iter().map(|r| r.dev).collect();
    let test: Vec<f64> = runs.iter().map(|r| r.test).collect();
    Ok(SettingReport {
        setting: spec.setting,
        train_size: pairs.len(),
        vocab_size: vocab.len(),
        dev: Summary::of(&dev),
        test: Summary::of(&test),
        runs,
    })
}

pub const AGGREGATE_HEADER: &str = "setting,dev_mean,dev_variance,test_mean,test_variance";

/// One row per setting.
pub fn write_aggregate_csv<W: Write>(mut w: W, reports: &[SettingReport]) -> std::io::Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.setting, r.dev.mean, r.dev.variance, r.test.mean, r.test.variance
        )?;
    }
    Ok(())
}
