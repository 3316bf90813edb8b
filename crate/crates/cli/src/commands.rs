use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use f2r_core::corpus::{
    assemble_history, build_style_corpus, load_dialogue_corpus, parse_jsonl, write_jsonl, Conversation, EncodedExample,
    StyleLabel, StyleTransferExample, Vocab,
};
use f2r_core::discriminator::{Discriminator, Sentence};
use f2r_core::experiments::{
    adversarial_phase, convert_all, corpus_vocab, encode_pairs, make_synthetic_corpus, pretrain_models, run_setting,
    run_synthetic_pipeline, style_vocab, synthetic_ranker_data, write_aggregate_csv, Converter, ExperimentData,
    ExperimentSpec, GeneratorConverter, HeuristicConverter, Setting, TextPair,
};
use f2r_core::generator::Generator;
use f2r_core::ranker::{evaluate, fit_left, parse_ranking_jsonl, train_ranker, MetricReport, Ranker, RankingExample};
use f2r_core::training::{disc_accuracy, fooling_rate, write_history_csv};
use serde::Serialize;

use crate::config::{resolve, RunConfig};
use crate::manifest::{beside, Manifest};
use crate::{Cli, Command, Common, Mode, StyleArg};

pub fn run(cli: Cli) -> Result<()> {
    let dd = cli.data_dir.as_deref();
    match cli.command {
        Command::Ingest {
            common,
            input,
            feedback,
            style,
            out,
        } => ingest(&common, dd, &input, feedback.as_deref(), style, &out),
        Command::Convert {
            common,
            mode,
            input,
            out,
            ckpt,
            vocab,
        } => convert(&common, dd, mode, &input, &out, ckpt.as_deref(), vocab.as_deref()),
        Command::TrainF2r {
            common,
            input,
            out,
            steps,
        } => train_f2r(&common, dd, &input, &out, steps),
        Command::TrainRanker {
            common,
            input,
            out,
            steps,
        } => train_ranker_cmd(&common, dd, &input, &out, steps),
        Command::Evaluate {
            common,
            ranker,
            data,
            vocab,
            out,
        } => evaluate_cmd(&common, dd, &ranker, &data, vocab.as_deref(), out.as_deref()),
        Command::RunExperiment {
            common,
            out,
            steps,
            ckpt,
            setting,
        } => run_experiment(&common, dd, &out, steps, ckpt.as_deref(), &setting),
        Command::ExportAttention {
            common,
            ckpt,
            vocab,
            input,
            out,
        } => export_attention(&common, dd, &ckpt, vocab.as_deref(), &input, &out),
        Command::MakeSynthetic { common, out } => make_synthetic(&common, &out),
    }
}

fn load_config(common: &Common, dd: Option<&Path>) -> Result<RunConfig> {
    let path = common.config.as_deref().map(|p| resolve(p, dd));
    Ok(RunConfig::load(path.as_deref())?.with_seed(common.seed))
}

fn style_of(s: StyleArg) -> StyleLabel {
    match s {
        StyleArg::Natural => StyleLabel::Natural,
        StyleArg::Feedback => StyleLabel::Feedback,
    }
}

fn existing(path: &Path, dd: Option<&Path>) -> Result<PathBuf> {
    let p = resolve(path, dd);
    ensure!(p.exists(), "input {} does not exist", p.display());
    Ok(p)
}

/// Refuses to write over any input.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(o) = out.canonicalize() else {
        return Ok(());
    };
    for i in inputs {
        if i.canonicalize().ok().as_deref() == Some(o.as_path()) {
            bail!("output {} would overwrite an input", out.display());
        }
    }
    Ok(())
}

fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_jsonl(&mut w, convs)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn vocab_path(explicit: Option<&Path>, ckpt: &Path, dd: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(v) => existing(v, dd),
        None => {
            let p = ckpt.with_file_name("vocab.json");
            ensure!(p.exists(), "no --vocab given and {} does not exist", p.display());
            Ok(p)
        }
    }
}

fn to_conversation(e: &StyleTransferExample) -> Conversation {
    Conversation {
        turns: e.history.clone(),
        final_response: e.response.clone(),
        style: e.style,
    }
}

fn ingest(
    common: &Common,
    dd: Option<&Path>,
    input: &Path,
    feedback: Option<&Path>,
    style: StyleArg,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common, dd)?;
    let input = existing(input, dd)?;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("ingest", common.seed, &cfg);
    m.input(&input)?;
    match feedback {
        None => {
            let convs = load_dialogue_corpus(&input, cfg.format, style_of(style))?;
            let path = out.join("conversations.jsonl");
            guard_output(&path, &[&input])?;
            write_conversations(&path, &convs)?;
            m.output(&path);
            println!("{}", serde_json::json!({ "conversations": convs.len() }));
        }
        Some(fb) => {
            let fb = existing(fb, dd)?;
            m.input(&fb)?;
            let dialogue = load_dialogue_corpus(&input, cfg.format, StyleLabel::Natural)?;
            let feedback = load_dialogue_corpus(&fb, cfg.format, StyleLabel::Feedback)?;
            let corpus = build_style_corpus(&dialogue, &feedback, cfg.pipeline.split)?;
            for (name, split) in ["train.jsonl", "valid.jsonl", "test.jsonl"]
                .into_iter()
                .zip(corpus.splits())
            {
                let path = out.join(name);
                guard_output(&path, &[&input, &fb])?;
                write_conversations(&path, &split.iter().map(to_conversation).collect::<Vec<_>>())?;
                m.output(&path);
            }
            let vocab = style_vocab(&corpus.train);
            let path = out.join("vocab.json");
            vocab.save(&path)?;
            m.output(&path);
            println!(
                "{}",
                serde_json::json!({
                    "train": corpus.train.len(),
                    "valid": corpus.valid.len(),
                    "test": corpus.test.len(),
                    "vocab": vocab.len(),
                })
            );
        }
    }
    m.write(&out.join("manifest.json"))
}

fn convert(
    common: &Common,
    dd: Option<&Path>,
    mode: Mode,
    input: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    vocab: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common, dd)?;
    let input = existing(input, dd)?;
    guard_output(out, &[&input])?;
    let mut m = Manifest::new("convert", common.seed, &cfg);
    m.input(&input)?;
    let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let convs = parse_jsonl(&text, StyleLabel::Feedback)?;
    let converted = match mode {
        Mode::Heuristic => convert_all(&HeuristicConverter, &convs)?,
        Mode::F2r => {
            let Some(ckpt) = ckpt else {
                bail!("--mode f2r needs --ckpt");
            };
            let ckpt = existing(ckpt, dd)?;
            let vp = vocab_path(vocab, &ckpt, dd)?;
            m.input(&ckpt)?;
            m.input(&vp)?;
            let gen = Generator::load(&ckpt)?;
            let vocab = Vocab::load(&vp)?;
            let p = &cfg.pipeline;
            let converter = GeneratorConverter {
                n_turns: p.n_turns,
                max_history: p.max_history,
                max_len: p.adversarial.max_len,
                ..GeneratorConverter::new(&gen, &vocab)
            };
            convert_all(&converter, &convs)?
        }
    };
    let rewritten: Vec<Conversation> = convs
        .iter()
        .zip(converted)
        .map(|(c, r)| Conversation {
            turns: c.turns.clone(),
            final_response: if r.trim().is_empty() {
                c.final_response.clone()
            } else {
                r
            },
            style: StyleLabel::Natural,
        })
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_conversations(out, &rewritten)?;
    m.output(out);
    m.write(&beside(out))
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<StyleTransferExample>> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_jsonl(&text, StyleLabel::Natural)?
        .iter()
        .map(StyleTransferExample::from)
        .collect())
}

#[derive(Serialize)]
struct F2rMetrics {
    steps: usize,
    selected_step: usize,
    pretrain_final_loss: Option<f64>,
    valid_disc_accuracy: f64,
    valid_fooling_rate: f64,
}

fn train_f2r(common: &Common, dd: Option<&Path>, input: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common, dd)?;
    if let Some(s) = steps {
        cfg.pipeline.adversarial.steps = s;
    }
    let dir = existing(input, dd)?;
    let mut m = Manifest::new("train-f2r", common.seed, &cfg);
    for f in ["train.jsonl", "valid.jsonl", "vocab.json"] {
        m.input(&dir.join(f))?;
    }
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    let p = &cfg.pipeline;
    let encode = |xs: &[StyleTransferExample]| -> Vec<EncodedExample> {
        xs.iter()
            .map(|e| EncodedExample::new(&vocab, e, p.n_turns, p.max_history, p.max_response))
            .collect()
    };
    let train = encode(&load_split(&dir, "train.jsonl")?);
    let valid = encode(&load_split(&dir, "valid.jsonl")?);
    ensure!(!train.is_empty(), "train.jsonl is empty");

    log::info!("pretraining on {} examples", train.len());
    let (mut gen, mut disc, pretrain) = pretrain_models(p, &train, vocab.len())?;
    let outcome = adversarial_phase(p, &mut gen, &mut disc, &train, &valid)?;
    let valid_fb: Vec<EncodedExample> = valid
        .iter()
        .filter(|e| e.style == StyleLabel::Feedback)
        .cloned()
        .collect();
    let metrics = F2rMetrics {
        steps: outcome.history.len(),
        selected_step: outcome.selected_step,
        pretrain_final_loss: pretrain.epoch_loss.last().copied(),
        valid_disc_accuracy: if valid.is_empty() {
            0.0
        } else {
            disc_accuracy(&disc, &valid)?
        },
        valid_fooling_rate: if valid_fb.is_empty() {
            0.0
        } else {
            fooling_rate(&gen, &disc, &valid_fb, p.adversarial.max_len)?
        },
    };

    fs::create_dir_all(out)?;
    guard_output(out, &[&dir])?;
    let path = out.join("generator.ckpt");
    gen.save(&path)?;
    m.output(&path);
    let path = out.join("discriminator.ckpt");
    disc.save(&path)?;
    m.output(&path);
    let path = out.join("vocab.json");
    vocab.save(&path)?;
    m.output(&path);
    let path = out.join("history.csv");
    write_history_csv(BufWriter::new(File::create(&path)?), &outcome.history)?;
    m.output(&path);
    let path = out.join("metrics.json");
    write_json(&path, &metrics)?;
    m.output(&path);
    println!("{}", serde_json::to_string(&metrics)?);
    m.write(&out.join("manifest.json"))
}

fn train_ranker_cmd(
    common: &Common,
    dd: Option<&Path>,
    inputs: &[PathBuf],
    out: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common, dd)?;
    if let Some(s) = steps {
        cfg.pipeline.experiment.train.steps = s;
    }
    let mut m = Manifest::new("train-ranker", common.seed, &cfg);
    let spec = &cfg.pipeline.experiment;
    let mut pairs = Vec::new();
    for input in inputs {
        let path = existing(input, dd)?;
        m.input(&path)?;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for c in parse_jsonl(&text, StyleLabel::Natural)? {
            pairs.push(TextPair {
                context: assemble_history(&c.turns, spec.n_turns),
                response: c.final_response,
            });
        }
    }
    let vocab = corpus_vocab(&pairs, spec.min_count);
    let config = spec.ranker.config(vocab.len());
    let encoded = encode_pairs(&vocab, &pairs, config.max_positions);
    let mut ranker = Ranker::new(config, common.seed)?;
    let losses = train_ranker(&mut ranker, &encoded, &spec.train)?;

    fs::create_dir_all(out)?;
    let path = out.join("ranker.ckpt");
    ranker.save(&path)?;
    m.output(&path);
    let path = out.join("vocab.json");
    vocab.save(&path)?;
    m.output(&path);
    let path = out.join("losses.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    m.output(&path);
    println!(
        "{}",
        serde_json::json!({ "pairs": pairs.len(), "vocab": vocab.len(), "final_loss": losses.last() })
    );
    m.write(&out.join("manifest.json"))
}

fn read_ranking(path: &Path) -> Result<Vec<RankingExample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_ranking_jsonl(&text).with_context(|| format!("parsing {}", path.display()))
}

fn evaluate_cmd(
    common: &Common,
    dd: Option<&Path>,
    ranker: &Path,
    data: &Path,
    vocab: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common, dd)?;
    let ckpt = existing(ranker, dd)?;
    let data = existing(data, dd)?;
    let vp = vocab_path(vocab, &ckpt, dd)?;
    let ranker = Ranker::load(&ckpt)?;
    let vocab = Vocab::load(&vp)?;
    let examples = read_ranking(&data)?;
    let report = MetricReport {
        hits_at_1: evaluate(&ranker, &vocab, &examples)?,
        n: examples.len(),
        seed: common.seed,
    };
    let json = serde_json::to_string(&report)?;
    println!("{json}");
    if let Some(dir) = out {
        let mut m = Manifest::new("evaluate", common.seed, &cfg);
        m.input(&ckpt)?;
        m.input(&vp)?;
        m.input(&data)?;
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.json");
        fs::write(&path, json + "\n")?;
        m.output(&path);
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn run_experiment(
    common: &Common,
    dd: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    ckpt: Option<&Path>,
    settings: &[String],
) -> Result<()> {
    let mut cfg = load_config(common, dd)?;
    if let Some(s) = steps {
        cfg.pipeline.adversarial.steps = s;
    }
    let c = &cfg.pipeline.experiment.corpus;
    let real = [&c.dialogue, &c.feedback, &c.dev, &c.test];
    if real.iter().all(|p| p.is_none()) && ckpt.is_none() {
        return run_synthetic(common, &cfg, out);
    }
    let missing: Vec<&str> = ["dialogue", "feedback", "dev", "test"]
        .into_iter()
        .zip(real)
        .filter(|(_, p)| p.is_none())
        .map(|(n, _)| n)
        .collect();
    ensure!(
        missing.is_empty(),
        "experiment corpus paths missing: {}",
        missing.join(", ")
    );
    let path = |p: &Option<PathBuf>| existing(p.as_deref().expect("checked above"), dd);
    let (dialogue_p, feedback_p, dev_p, test_p) =
        (path(&c.dialogue)?, path(&c.feedback)?, path(&c.dev)?, path(&c.test)?);

    let settings: Vec<Setting> = if settings.is_empty() {
        Setting::ALL.to_vec()
    } else {
        settings
            .iter()
            .map(|s| s.parse::<Setting>().map_err(|e| anyhow::anyhow!("{e}")))
            .collect::<Result<_>>()?
    };
    let mut m = Manifest::new("run-experiment", common.seed, &cfg);
    for p in [&dialogue_p, &feedback_p, &dev_p, &test_p] {
        m.input(p)?;
    }
    let data = ExperimentData {
        dialogue: load_dialogue_corpus(&dialogue_p, cfg.format, StyleLabel::Natural)?,
        feedback: load_dialogue_corpus(&feedback_p, cfg.format, StyleLabel::Feedback)?,
        dev: read_ranking(&dev_p)?,
        test: read_ranking(&test_p)?,
    };

    let gen_path = match ckpt {
        Some(p) => Some(existing(p, dd)?),
        None => c.converter.as_deref().map(|p| existing(p, dd)).transpose()?,
    };
    let model = match &gen_path {
        Some(g) => {
            let vp = vocab_path(c.converter_vocab.as_deref(), g, dd)?;
            m.input(g)?;
            m.input(&vp)?;
            Some((Generator::load(g)?, Vocab::load(&vp)?))
        }
        None => None,
    };
    let p = &cfg.pipeline;
    let converter = model.as_ref().map(|(g, v)| GeneratorConverter {
        n_turns: p.n_turns,
        max_history: p.max_history,
        max_len: p.adversarial.max_len,
        ..GeneratorConverter::new(g, v)
    });

    fs::create_dir_all(out)?;
    let mut reports = Vec::with_capacity(settings.len());
    for setting in settings {
        let spec = ExperimentSpec {
            setting,
            ..p.experiment.clone()
        };
        log::info!("ranker setting {setting}");
        let report = run_setting(&spec, &data, converter.as_ref().map(|c| c as &dyn Converter))?;
        let path = out.join(format!("report-{setting}.json"));
        write_json(&path, &report)?;
        m.output(&path);
        reports.push(report);
    }
    let path = out.join("aggregate.csv");
    let mut buf = Vec::new();
    write_aggregate_csv(&mut buf, &reports)?;
    fs::write(&path, &buf)?;
    m.output(&path);
    print!("{}", String::from_utf8(buf)?);
    m.write(&out.join("manifest.json"))
}

fn run_synthetic(common: &Common, cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = run_synthetic_pipeline(&cfg.pipeline, Some(out))?;
    let mut m = Manifest::new("run-experiment", common.seed, cfg);
    let mut names = vec![
        "vocab.json".to_string(),
        "generator.ckpt".into(),
        "discriminator.ckpt".into(),
        "history.csv".into(),
    ];
    names.extend(report.settings.iter().map(|r| format!("report-{}.json", r.setting)));
    names.extend(["aggregate.csv".into(), "pipeline.json".into()]);
    for n in &names {
        m.output(&out.join(n));
    }
    let summary: Vec<_> = report
        .settings
        .iter()
        .map(
            |r| serde_json::json!({ "setting": r.setting, "test_mean": r.test.mean, "test_variance": r.test.variance }),
        )
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "converter": report.after_adversarial,
            "attention": report.attention,
            "settings": summary,
        })
    );
    m.write(&out.join("manifest.json"))
}

fn export_attention(
    common: &Common,
    dd: Option<&Path>,
    ckpt: &Path,
    vocab: Option<&Path>,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common, dd)?;
    let ckpt = existing(ckpt, dd)?;
    let vp = vocab_path(vocab, &ckpt, dd)?;
    let input = existing(input, dd)?;
    guard_output(out, &[&input, &ckpt, &vp])?;
    let mut m = Manifest::new("export-attention", common.seed, &cfg);
    m.input(&ckpt)?;
    m.input(&vp)?;
    m.input(&input)?;
    let disc = Discriminator::load(&ckpt)?;
    let vocab = Vocab::load(&vp)?;
    let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let convs = parse_jsonl(&text, StyleLabel::Feedback)?;
    let p = &cfg.pipeline;
    let max_positions = disc.config().max_positions;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for c in &convs {
        let history = fit_left(vocab.encode(&assemble_history(&c.turns, p.n_turns)), p.max_history);
        let room = max_positions.saturating_sub(disc.prefix(&history).len()).max(1);
        let mut x = vocab.encode(&c.final_response);
        x.truncate(room);
        if x.is_empty() {
            x.push(Vocab::UNK);
        }
        let map = disc.attention(Sentence::Ids(&x), &history, &vocab)?;
        serde_json::to_writer(&mut w, &map)?;
        writeln!(w)?;
    }
    w.flush()?;
    m.output(out);
    m.write(&beside(out))
}

#[derive(Serialize)]
struct OracleRecord<'a> {
    feedback: &'a str,
    oracle: &'a str,
    filler: &'a str,
    slot: &'a str,
    value: &'a str,
}

fn make_synthetic(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common, None)?;
    let p = &cfg.pipeline;
    let corpus = make_synthetic_corpus(&p.synthetic)?;
    let feedback = corpus.feedback();
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("make-synthetic", common.seed, &cfg);

    let path = out.join("dialogue.jsonl");
    write_conversations(&path, &corpus.dialogue)?;
    m.output(&path);
    let path = out.join("feedback.jsonl");
    write_conversations(&path, &feedback)?;
    m.output(&path);
    let path = out.join("oracle.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    for pair in &corpus.pairs {
        let rec = OracleRecord {
            feedback: &pair.feedback.final_response,
            oracle: &pair.oracle,
            filler: &pair.filler,
            slot: &p.synthetic.slots[pair.topic.slot].name,
            value: &p.synthetic.slots[pair.topic.slot].values[pair.topic.value],
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    m.output(&path);

    let data = synthetic_ranker_data(p, feedback)?;
    let path = out.join("ranker-dialogue.jsonl");
    write_conversations(&path, &data.dialogue)?;
    m.output(&path);
    for (name, examples) in [("dev.jsonl", &data.dev), ("test.jsonl", &data.test)] {
        let path = out.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        for ex in examples {
            serde_json::to_writer(&mut w, ex)?;
            writeln!(w)?;
        }
        w.flush()?;
        m.output(&path);
    }
    println!(
        "{}",
        serde_json::json!({
            "dialogue": corpus.dialogue.len(),
            "feedback": corpus.pairs.len(),
            "ranker_dialogue": data.dialogue.len(),
            "dev": data.dev.len(),
            "test": data.test.len(),
        })
    );
    m.write(&out.join("manifest.json"))
}
