//! Ranker training settings, synthetic verification corpora and multi-seed reports.

mod pipeline;
mod settings;
pub mod synthetic;

pub use pipeline::{
    adversarial_phase, pretrain_models, run_synthetic_pipeline, style_vocab, synthetic_ranker_data, AdversarialOutcome,
    AttentionCheck, ConversionSample, ConverterMetrics, DiscPretrainConfig, PipelineConfig, PipelineReport,
};
pub use settings::{
    build_training_corpus, convert_all, corpus_vocab, encode_pairs, run_setting, write_aggregate_csv, Converter,
    CorpusPaths, ExperimentData, ExperimentSpec, GeneratorConverter, HeuristicConverter, RankerSpec, RunResult,
    Setting, SettingReport, Summary, TextPair, AGGREGATE_HEADER,
};
pub use synthetic::{
    make_synthetic_corpus, ranking_examples, to_second_person, token_f1, SyntheticCorpus, SyntheticPair, SyntheticSpec,
    Topic, TopicSlot, World,
};
