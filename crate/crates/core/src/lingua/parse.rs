use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, LabelSet};

/// Outcome of reading a label out of a free-text completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedLabel {
    Label(ClassLabel),
    Unparseable,
}

impl ParsedLabel {
    pub fn label(&self) -> Option<&ClassLabel> {
        match self {
            ParsedLabel::Label(l) => Some(l),
            ParsedLabel::Unparseable => None,
        }
    }

    /// Label equality; an unparseable answer agrees with nothing.
    pub fn agrees_with(&self, other: &ParsedLabel) -> bool {
        matches!((self, other), (ParsedLabel::Label(a), ParsedLabel::Label(b)) if a == b)
    }

    pub fn is(&self, truth: &ClassLabel) -> bool {
        self.label() == Some(truth)
    }

    pub fn name(&self) -> &str {
        match self {
            ParsedLabel::Label(l) => &l.name,
            ParsedLabel::Unparseable => "Unparseable",
        }
    }
}

impl std::fmt::Display for ParsedLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fallback phrases, tried in order after the canonical names.
/// Each entry maps to a canonical label name.
const SYNONYMS: &[(&str, &str)] = &[
    ("non-covid-19 pneumonia", "Non-COVID Pneumonia"),
    ("non covid-19 pneumonia", "Non-COVID Pneumonia"),
    ("non covid pneumonia", "Non-COVID Pneumonia"),
    ("noncovid pneumonia", "Non-COVID Pneumonia"),
    ("non-covid", "Non-COVID Pneumonia"),
    ("noncovid", "Non-COVID Pneumonia"),
    ("covid 19", "COVID-19"),
    ("covid19", "COVID-19"),
    ("sars-cov-2", "COVID-19"),
    ("coronavirus", "COVID-19"),
    ("covid", "COVID-19"),
    ("pneumonia", "Non-COVID Pneumonia"),
    ("no findings", "Normal"),
    ("no abnormality", "Normal"),
    ("no abnormalities", "Normal"),
    ("unremarkable", "Normal"),
    ("healthy", "Normal"),
];

const NEGATIONS: &[&str] = &["non-", "non ", "non", "not "];

/// Map a completion to one of the labels or `Unparseable`.
///
/// Matching is case-insensitive. Canonical names are tried longest first,
/// then the synonym table; the first hit wins. Multi-word names match as
/// plain substrings, single words need word boundaries, and a hit directly
/// preceded by a negation ("non-", "not ") is skipped unless the phrase is
/// itself a negated form.
pub fn parse_label(raw: &str, labels: &LabelSet) -> ParsedLabel {
    let text = normalize(raw);
    let mut canonical: Vec<ClassLabel> = labels.iter().collect();
    canonical.sort_by(|a, b| b.name.len().cmp(&a.name.len()).then(a.index.cmp(&b.index)));
    for label in canonical {
        let needle = normalize(&label.name);
        let bounded = needle.chars().all(|c| c.is_alphanumeric());
        if find_unnegated(&text, &needle, bounded) {
            return ParsedLabel::Label(label);
        }
    }
    for (phrase, target) in SYNONYMS {
        if let Some(label) = labels.by_name(target) {
            if find_unnegated(&text, phrase, true) {
                return ParsedLabel::Label(label);
            }
        }
    }
    ParsedLabel::Unparseable
}

/// Lowercase, map unicode dashes to '-', collapse whitespace.
fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        let c = match c {
            '\u{2010}'..='\u{2015}' | '\u{2212}' | '\u{FE63}' | '\u{FF0D}' => '-',
            c => c,
        };
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

fn find_unnegated(text: &str, needle: &str, bounded: bool) -> bool {
    let mut start = 0;
    while let Some(pos) = text[start..].find(needle) {
        let at = start + pos;
        let end = at + needle.len();
        let before = &text[..at];
        let boundary_ok = !bounded
            || (!before.chars().next_back().is_some_and(char::is_alphanumeric)
                && !text[end..].chars().next().is_some_and(char::is_alphanumeric));
        let negated = !needle.starts_with("non") && NEGATIONS.iter().any(|n| before.ends_with(n));
        if boundary_ok && !negated {
            return true;
        }
        start = at + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}
