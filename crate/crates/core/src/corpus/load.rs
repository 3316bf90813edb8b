use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Speaker, StyleLabel, Turn};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    #[default]
    Jsonl,
    ParlaiText,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTurn {
    Text(String),
    Tagged { speaker: Speaker, text: String },
}

#[derive(Deserialize)]
struct RawRecord {
    turns: Vec<RawTurn>,
    response: String,
    #[serde(default)]
    style: Option<StyleLabel>,
    // Persona and any other fields are ignored.
}

/// Reads a corpus file. `default_style` labels records that carry no style of
/// their own (every ParlAI record, and JSONL records without a `style` field).
pub fn load_dialogue_corpus(path: &Path, format: CorpusFormat, default_style: StyleLabel) -> Result<Vec<Conversation>> {
    let text = std::fs::read_to_string(path)?;
    match format {
        CorpusFormat::Jsonl => parse_jsonl(&text, default_style),
        CorpusFormat::ParlaiText => parse_parlai(&text, default_style),
    }
}

pub fn parse_jsonl(text: &str, default_style: StyleLabel) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let style = rec.style.unwrap_or(default_style);
        out.push(conversation_from_record(rec, style).ok_or_else(|| Error::Parse {
            line: line_no,
            message: "record needs at least one nonempty turn and a nonempty response".into(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    turns: &'a [Turn],
    response: &'a str,
    style: StyleLabel,
}

/// One JSONL record with speaker-tagged turns; [`parse_jsonl`] reads it back unchanged.
pub fn conversation_record(c: &Conversation) -> String {
    serde_json::to_string(&RecordOut {
        turns: &c.turns,
        response: &c.final_response,
        style: c.style,
    })
    .expect("records serialize")
}

pub fn write_jsonl<W: Write>(mut w: W, convs: &[Conversation]) -> Result<()> {
    for c in convs {
        writeln!(w, "{}", conversation_record(c))?;
    }
    w.flush()?;
    Ok(())
}

fn conversation_from_record(rec: RawRecord, style: StyleLabel) -> Option<Conversation> {
    let tagged = rec.turns.iter().all(|t| matches!(t, RawTurn::Tagged { .. }));
    if tagged && !rec.turns.is_empty() {
        let turns: Vec<_> = rec
            .turns
            .into_iter()
            .filter_map(|t| match t {
                RawTurn::Tagged { speaker, text } => super::Turn::new(speaker, &text),
                RawTurn::Text(_) => None,
            })
            .collect();
        let final_response = super::sanitize(rec.response.trim());
        if turns.is_empty() || final_response.is_empty() {
            return None;
        }
        return Some(Conversation {
            turns,
            final_response,
            style,
        });
    }
    let texts: Vec<String> = rec
        .turns
        .into_iter()
        .map(|t| match t {
            RawTurn::Text(s) => s,
            RawTurn::Tagged { text, .. } => text,
        })
        .collect();
    let nonempty = texts.iter().filter(|t| !t.trim().is_empty()).count();
    Conversation::from_texts(&texts, &rec.response, style, first_speaker(nonempty))
}

/// The speaker of the first turn such that the last turn is the human's and
/// the response belongs to the bot.
fn first_speaker(n_turns: usize) -> Speaker {
    if n_turns % 2 == 1 {
        Speaker::Human
    } else {
        Speaker::Bot
    }
}

fn unescape(v: &str) -> String {
    v.replace("\\n", "\n").replace("\\t", "\t").replace("\\\\", "\\")
}

fn is_persona(line: &str) -> bool {
    let l = line.trim_start().to_lowercase();
    l.starts_with("your persona:") || l.starts_with("partner's persona:")
}

/// ParlAI tab-separated episodes: `text:...\tlabels:...\tepisode_done:True`.
/// History accumulates within an episode: each line adds its text turns and
/// then its label.
pub fn parse_parlai(text: &str, style: StyleLabel) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut history: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut utterance = None;
        let mut label = None;
        let mut done = false;
        for field in line.split('\t') {
            let Some((key, value)) = field.split_once(':') else {
                continue;
            };
            match key {
                "text" => utterance = Some(unescape(value)),
                "labels" | "eval_labels" => {
                    label = Some(unescape(value.split('|').next().unwrap_or_default()));
                }
                "episode_done" => done = value.trim().eq_ignore_ascii_case("true"),
                _ => {}
            }
        }
        let (Some(utterance), Some(label)) = (utterance, label) else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected both text: and labels: fields".into(),
            });
        };
        let utterance = utterance.replace("__p1__", "\n").replace("__p2__", "\n");
        for turn in utterance.split('\n') {
            if !turn.trim().is_empty() && !is_persona(turn) && turn.trim() != "__null__" {
                history.push(turn.trim().to_string());
            }
        }
        let conv = Conversation::from_texts(&history, &label, style, first_speaker(history.len()));
        match conv {
            Some(c) => out.push(c),
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "episode has no usable turns or the label is empty".into(),
                })
            }
        }
        history.push(label.trim().to_string());
        if done {
            history.clear();
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let convs = vec![
            Conversation::from_texts(&["hi", "how are you ?"], "fine", StyleLabel::Natural, Speaker::Bot).unwrap(),
            Conversation::from_texts(&["so ?"], "tell me fine", StyleLabel::Feedback, Speaker::Human).unwrap(),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &convs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_jsonl(&text, StyleLabel::Natural).unwrap(), convs);
    }

    #[test]
    fn single_plain_record() {
        let convs = parse_jsonl(r#"{"turns":["hi"],"response":"hello"}"#, StyleLabel::Feedback).unwrap();
        assert_eq!(convs.len(), 1);
        assert_eq!(convs[0].final_response, "hello");
        assert_eq!(convs[0].style, StyleLabel::Feedback);
        assert_eq!(convs[0].turns[0].speaker, Speaker::Human);
    }

    #[test]
    fn tagged_turns_and_record_style() {
        let line = r#"{"turns":[{"speaker":"bot","text":"hey"},{"speaker":"human","text":"sup"}],"response":"ok","style":0,"persona":["i like cats"]}"#;
        let convs = parse_jsonl(line, StyleLabel::Feedback).unwrap();
        assert_eq!(convs[0].style, StyleLabel::Natural);
        assert_eq!(convs[0].turns[0].speaker, Speaker::Bot);
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "{\"turns\":[\"a\"],\"response\":\"b\"}\n\n{\"turns\": 5}\n";
        match parse_jsonl(text, StyleLabel::Natural) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_response_is_malformed() {
        assert!(matches!(
            parse_jsonl(r#"{"turns":["a"],"response":"  "}"#, StyleLabel::Natural),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            parse_jsonl("\n\n", StyleLabel::Natural),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(parse_parlai("", StyleLabel::Natural), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn parlai_accumulates_history_and_drops_persona() {
        let text = "text:your persona: i like dogs.\\nhi there\tlabels:hello!\tepisode_done:False\n\
                    text:how are you?\tlabels:great|fine\tepisode_done:True\n\
                    text:new episode\tlabels:yes\tepisode_done:True\n";
        let convs = parse_parlai(text, StyleLabel::Natural).unwrap();
        assert_eq!(convs.len(), 3);
        let texts: Vec<_> = convs[1].turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["hi there", "hello!", "how are you?"]);
        assert_eq!(convs[1].final_response, "great");
        assert_eq!(convs[1].turns.last().unwrap().speaker, Speaker::Human);
        assert_eq!(convs[2].turns.len(), 1);
    }

    #[test]
    fn parlai_missing_label_is_an_error() {
        assert!(matches!(
            parse_parlai("text:hi\tepisode_done:True\n", StyleLabel::Natural),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
