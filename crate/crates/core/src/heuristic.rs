//! Rule-based feedback-to-response conversion.

use once_cell::sync::Lazy;
use regex::Regex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    /// Delete every match.
    StripAll,
    /// Delete the first match (patterns are anchored at the start).
    StripFirst,
    /// Replace every match by its mapped counterpart in one left-to-right pass.
    Substitute,
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub name: &'static str,
    pattern: Regex,
    kind: RuleKind,
    replacements: &'static [(&'static str, &'static str)],
}

impl Rule {
    fn strip(name: &'static str, pattern: &str, kind: RuleKind) -> Rule {
        Rule {
            name,
            pattern: Regex::new(pattern).expect("rule pattern compiles"),
            kind,
            replacements: &[],
        }
    }

    fn substitute(name: &'static str, replacements: &'static [(&'static str, &'static str)]) -> Rule {
        let alternation = replacements
            .iter()
            .map(|(from, _)| regex::escape(from))
            .collect::<Vec<_>>()
            .join("|");
        Rule {
            name,
            pattern: Regex::new(&alternation).expect("rule pattern compiles"),
            kind: RuleKind::Substitute,
            replacements,
        }
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn apply(&self, text: &str) -> String {
        match self.kind {
            RuleKind::StripAll => self.pattern.replace_all(text, "").into_owned(),
            RuleKind::StripFirst => self.pattern.replace(text, "").into_owned(),
            RuleKind::Substitute => self
                .pattern
                .replace_all(text, |caps: &regex::Captures<'_>| {
                    let m = &caps[0];
                    self.replacements
                        .iter()
                        .find(|(from, _)| *from == m)
                        .map(|(_, to)| *to)
                        .unwrap_or(m)
                        .to_string()
                })
                .into_owned(),
        }
    }
}

const FLIPS: &[(&str, &str)] = &[
    ("you are ", "i am "),
    ("your ", "my "),
    ("you've ", "i've "),
    ("you were", "i was"),
    ("you ", "i "),
];

/// An ordered cascade of rules. Whitespace is collapsed after every rule.
#[derive(Clone, Debug)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn standard() -> RuleSet {
        RuleSet {
            rules: vec![
                Rule::strip(
                    "modal",
                    r"you could have|you should have|you could|you should",
                    RuleKind::StripAll,
                ),
                Rule::strip(
                    "verb",
                    r"^said|^saying|^say|^tell |^told |^admit |^asked |^ask |^answer |^answered |^talked |^talk ",
                    RuleKind::StripFirst,
                ),
                Rule::strip("lead", r"^about|^me|^that", RuleKind::StripFirst),
                Rule::strip("hedge", r"if|whether|not", RuleKind::StripAll),
                Rule::substitute("person", FLIPS),
            ],
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Lowercases, runs the cascade, and falls back to the input unchanged if
    /// nothing is left.
    pub fn convert(&self, feedback: &str) -> String {
        let mut text = collapse(&feedback.to_lowercase());
        for rule in &self.rules {
            text = collapse(&rule.apply(&text));
        }
        if text.is_empty() {
            feedback.to_string()
        } else {
            text
        }
    }
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Converts feedback with the standard rule cascade.
pub fn heuristic_convert(feedback: &str) -> String {
    static RULES: Lazy<RuleSet> = Lazy::new(RuleSet::standard);
    RULES.convert(feedback)
}

/// Applies only the pronoun substitution rule.
pub fn flip_person(text: &str) -> String {
    static RULE: Lazy<Rule> = Lazy::new(|| Rule::substitute("person", FLIPS));
    RULE.apply(text)
}
