//! Dialogue and feedback corpora: data model, ingestion, context assembly and
//! style-corpus splits.

mod load;
mod split;
mod vocab;

pub use load::{conversation_record, load_dialogue_corpus, parse_jsonl, parse_parlai, write_jsonl, CorpusFormat};
pub use split::{build_style_corpus, SplitSpec, StyleCorpus};
pub use vocab::{normalize, tokenize_words, TokenId, Vocab};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub const P1: &str = "[P1]";
pub const P2: &str = "[P2]";
pub const RES: &str = "[RES]";

/// Delimiters that may never appear verbatim inside turn text.
pub const DELIMITERS: [&str; 3] = [P1, P2, RES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Bot,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::Human => Speaker::Bot,
            Speaker::Bot => Speaker::Human,
        }
    }
}

/// Two styles: natural dialogue responses (0) and user feedback (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum StyleLabel {
    Natural = 0,
    Feedback = 1,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 2] = [StyleLabel::Natural, StyleLabel::Feedback];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn flip(self) -> StyleLabel {
        match self {
            StyleLabel::Natural => StyleLabel::Feedback,
            StyleLabel::Feedback => StyleLabel::Natural,
        }
    }

    pub fn from_index(i: usize) -> Option<StyleLabel> {
        match i {
            0 => Some(StyleLabel::Natural),
            1 => Some(StyleLabel::Feedback),
            _ => None,
        }
    }
}

impl TryFrom<u8> for StyleLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        StyleLabel::from_index(v as usize).ok_or_else(|| format!("style label must be 0 or 1, got {v}"))
    }
}

impl From<StyleLabel> for u8 {
    fn from(s: StyleLabel) -> u8 {
        s as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    /// Builds a turn with sanitized, trimmed text. Returns `None` if nothing is left.
    pub fn new(speaker: Speaker, text: &str) -> Option<Turn> {
        let text = sanitize(text.trim());
        if text.is_empty() {
            None
        } else {
            Some(Turn { speaker, text })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
    pub final_response: String,
    pub style: StyleLabel,
}

impl Conversation {
    /// Builds a conversation from raw texts with alternating speakers, the
    /// first being `first`. Empty turns are skipped.
    pub fn from_texts<S: AsRef<str>>(
        turns: &[S],
        response: &str,
        style: StyleLabel,
        first: Speaker,
    ) -> Option<Conversation> {
        let mut speaker = first;
        let mut out = Vec::with_capacity(turns.len());
        for t in turns {
            if let Some(turn) = Turn::new(speaker, t.as_ref()) {
                out.push(turn);
                speaker = speaker.other();
            }
        }
        let final_response = sanitize(response.trim());
        if out.is_empty() || final_response.is_empty() {
            return None;
        }
        Some(Conversation {
            turns: out,
            final_response,
            style,
        })
    }
}

/// One example for the style-transfer models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTransferExample {
    pub history: Vec<Turn>,
    pub response: String,
    pub style: StyleLabel,
}

impl From<&Conversation> for StyleTransferExample {
    fn from(c: &Conversation) -> Self {
        StyleTransferExample {
            history: c.turns.clone(),
            response: c.final_response.clone(),
            style: c.style,
        }
    }
}

/// Escapes reserved delimiters so raw text can never forge one:
/// `[P1]` becomes `[_P1_]` (case-insensitive).
pub fn sanitize(text: &str) -> String {
    static RESERVED: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\[(p1|p2|res)\]").unwrap());
    RESERVED
        .replace_all(text, |caps: &regex::Captures<'_>| {
            format!("[_{}_]", caps[1].to_uppercase())
        })
        .into_owned()
}

/// The last `n_turns` turns joined with alternating `[P1]`/`[P2]` markers,
/// `[P1]` on the earliest selected turn.
pub fn assemble_history(turns: &[Turn], n_turns: usize) -> String {
    let n = n_turns.max(1);
    let window = &turns[turns.len().saturating_sub(n)..];
    let mut out = String::new();
    for (i, t) in window.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(if i % 2 == 0 { P1 } else { P2 });
        out.push(' ');
        out.push_str(&t.text);
    }
    out
}

/// `"[P1] t_k [P2] t_k+1 ... [RES] response"` over the last `n_turns` turns.
pub fn assemble_context(conv: &Conversation, n_turns: usize) -> String {
    let history = assemble_history(&conv.turns, n_turns);
    if history.is_empty() {
        format!("{RES} {}", conv.final_response)
    } else {
        format!("{history} {RES} {}", conv.final_response)
    }
}

pub const DEFAULT_CONTEXT_TURNS: usize = 2;

/// Token ids for one style-transfer example: the assembled history window and
/// the response, each truncated to fit model capacity (history from the left).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub history: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub style: StyleLabel,
}

impl EncodedExample {
    pub fn new(
        vocab: &Vocab,
        example: &StyleTransferExample,
        n_turns: usize,
        max_history: usize,
        max_response: usize,
    ) -> EncodedExample {
        let mut history = vocab.encode(&assemble_history(&example.history, n_turns));
        if history.len() > max_history {
            history.drain(..history.len() - max_history);
        }
        let mut response = vocab.encode(&example.response);
        response.truncate(max_response);
        EncodedExample {
            history,
            response,
            style: example.style,
        }
    }
}
