//! Final-answer extraction and correctness judgement.
//!
//! MCQ precedence:
//! 1. a labelled answer phrase (`answer is <L>`, `correct answer is <L>`, ...);
//! 2. a lone label on the final non-empty line;
//! 3. the text of exactly one presented option.
//!
//! Within a rule the last match in the text wins. Phrases are matched
//! ASCII-case-insensitively; labels are matched case-sensitively.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Question, QuestionKind};
use crate::mutation::PresentedQuestion;

const DEFAULT_PHRASES: &str = include_str!("../resources/answer_phrases.txt");

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?[$€£¥]?\d(?:[\d,]*\d)?(?:\.\d+)?").expect("number regex"));

static DEFAULT_RULES: LazyLock<ExtractionRules> = LazyLock::new(ExtractionRules::default);

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("variant for {variant:?} does not belong to question {question:?}")]
    VariantMismatch { question: String, variant: String },
    #[error("extracted {extracted:?} answer cannot be judged against a {question:?} question")]
    KindMismatch {
        extracted: AnswerKind,
        question: QuestionKind,
    },
    #[error("phrase file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    McqLabel,
    Numeric,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedBy {
    AnswerPhrase,
    LoneLabel,
    OptionText,
    LastNumber,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub kind: AnswerKind,
    pub presented_label: Option<String>,
    /// 0 for a distractor.
    pub canonical_index: Option<usize>,
    pub numeric_value: Option<String>,
    pub matched_by: MatchedBy,
}

impl ExtractedAnswer {
    pub fn failure() -> Self {
        ExtractedAnswer {
            kind: AnswerKind::Failure,
            presented_label: None,
            canonical_index: None,
            numeric_value: None,
            matched_by: MatchedBy::None,
        }
    }

    fn label(label: &str, canonical_index: usize, matched_by: MatchedBy) -> Self {
        ExtractedAnswer {
            kind: AnswerKind::McqLabel,
            presented_label: Some(label.to_string()),
            canonical_index: Some(canonical_index),
            numeric_value: None,
            matched_by,
        }
    }

    fn number(value: String, matched_by: MatchedBy) -> Self {
        ExtractedAnswer {
            kind: AnswerKind::Numeric,
            presented_label: None,
            canonical_index: None,
            numeric_value: Some(value),
            matched_by,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.kind == AnswerKind::Failure
    }
}

/// Final-answer phrase list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionRules {
    phrases: Vec<String>,
}

impl Default for ExtractionRules {
    fn default() -> Self {
        Self::parse(DEFAULT_PHRASES)
    }
}

impl ExtractionRules {
    /// One phrase per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let phrases = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_ascii_lowercase())
            .collect();
        ExtractionRules { phrases }
    }

    pub fn from_file(path: &Path) -> Result<Self, ExtractionError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExtractionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Byte offsets just past every phrase occurrence.
    fn phrase_ends(&self, text: &str) -> Vec<usize> {
        let lower = text.to_ascii_lowercase();
        let mut ends = Vec::new();
        for p in &self.phrases {
            let mut from = 0;
            while let Some(i) = lower[from..].find(p.as_str()) {
                let end = from + i + p.len();
                ends.push(end);
                from = end;
            }
        }
        ends
    }

    pub fn extract_mcq(&self, text: &str, variant: &PresentedQuestion) -> ExtractedAnswer {
        let mut labels: Vec<&str> = variant.answer_key.keys().map(String::as_str).collect();
        labels.sort_by_key(|l| std::cmp::Reverse(l.len()));

        let mut best: Option<(usize, &str)> = None;
        for end in self.phrase_ends(text) {
            let start = skip_answer_lead(text, end);
            if let Some(label) = label_at(text, start, &labels) {
                if best.is_none_or(|(pos, _)| start > pos) {
                    best = Some((start, label));
                }
            }
        }
        if let Some((_, label)) = best {
            return ExtractedAnswer::label(
                label,
                variant.answer_key[label],
                MatchedBy::AnswerPhrase,
            );
        }

        if let Some(line) = text.lines().rev().find(|l| !l.trim().is_empty()) {
            let token = line
                .trim()
                .trim_matches(|c: char| c.is_whitespace() || "*()[].:,;\"'`".contains(c));
            if let Some(label) = labels.iter().find(|l| **l == token) {
                return ExtractedAnswer::label(
                    label,
                    variant.answer_key[*label],
                    MatchedBy::LoneLabel,
                );
            }
        }

        let lower = text.to_lowercase();
        let hits: Vec<_> = variant
            .presented_options
            .iter()
            .filter(|o| lower.contains(&o.text.to_lowercase()))
            .collect();
        let maximal: Vec<_> = hits
            .iter()
            .filter(|o| {
                let t = o.text.to_lowercase();
                !hits.iter().any(|other| {
                    let ot = other.text.to_lowercase();
                    ot.len() > t.len() && ot.contains(&t)
                })
            })
            .collect();
        if let [only] = maximal.as_slice() {
            return ExtractedAnswer::label(
                &only.label,
                only.canonical_index,
                MatchedBy::OptionText,
            );
        }
        ExtractedAnswer::failure()
    }

    /// Number after the last final-answer marker, else the last number.
    pub fn extract_numeric(&self, text: &str) -> ExtractedAnswer {
        let mut best: Option<(usize, String)> = None;
        for end in self.phrase_ends(text) {
            let start = skip_answer_lead(text, end);
            if let Some(m) = NUMBER.find_at(text, start).filter(|m| m.start() == start) {
                if let Some(v) = normalize_number(m.as_str()) {
                    if best.as_ref().is_none_or(|(pos, _)| start > *pos) {
                        best = Some((start, v));
                    }
                }
            }
        }
        if let Some((_, v)) = best {
            return ExtractedAnswer::number(v, MatchedBy::AnswerPhrase);
        }
        let last = NUMBER.find_iter(text).last().and_then(|m| {
            let mut s = m.as_str();
            let preceded_by_word = text[..m.start()]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
            if preceded_by_word && s.starts_with(['-', '+']) {
                s = &s[1..];
            }
            normalize_number(s)
        });
        match last {
            Some(v) => ExtractedAnswer::number(v, MatchedBy::LastNumber),
            None => ExtractedAnswer::failure(),
        }
    }

    /// Dispatches on the question kind.
    pub fn extract(&self, text: &str, variant: &PresentedQuestion) -> ExtractedAnswer {
        match variant.kind {
            QuestionKind::Mcq => self.extract_mcq(text, variant),
            QuestionKind::Numeric => self.extract_numeric(text),
        }
    }
}

fn skip_answer_lead(text: &str, mut i: usize) -> usize {
    let bytes = text.as_bytes();
    loop {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || b"*([\"':$".contains(&bytes[i]))
        {
            i += 1;
        }
        if bytes.len() - i >= 7 && bytes[i..i + 7].eq_ignore_ascii_case(b"option ") {
            i += 7;
            continue;
        }
        return i;
    }
}

fn label_at<'a>(text: &str, start: usize, labels: &[&'a str]) -> Option<&'a str> {
    let rest = &text[start..];
    labels.iter().copied().find(|l| {
        rest.starts_with(l)
            && !rest[l.len()..]
                .chars()
                .next()
                .is_some_and(|c| c.is_alphanumeric())
    })
}

/// Canonical numeric string: no commas, sign `+`, currency symbols or
/// redundant zeros. `None` if `s` is not a plain decimal number.
pub fn normalize_number(s: &str) -> Option<String> {
    let s = s
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || "$€£¥".contains(c));
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let body = body
        .trim_start_matches(|c: char| "$€£¥".contains(c))
        .replace(',', "");
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body.as_str(), ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = frac.trim_end_matches('0');
    let mut out = String::new();
    if negative && !(int == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

pub fn extract_mcq(text: &str, variant: &PresentedQuestion) -> ExtractedAnswer {
    DEFAULT_RULES.extract_mcq(text, variant)
}

pub fn extract_numeric(text: &str) -> ExtractedAnswer {
    DEFAULT_RULES.extract_numeric(text)
}

pub fn extract(text: &str, variant: &PresentedQuestion) -> ExtractedAnswer {
    DEFAULT_RULES.extract(text, variant)
}

/// Correctness `p` of an extracted answer. Failures and distractors are 0.
pub fn judge(
    extracted: &ExtractedAnswer,
    q: &Question,
    variant: &PresentedQuestion,
) -> Result<u8, ExtractionError> {
    if variant.question_id != q.id || variant.kind != q.kind {
        return Err(ExtractionError::VariantMismatch {
            question: q.id.clone(),
            variant: variant.question_id.clone(),
        });
    }
    let correct = match (extracted.kind, q.kind) {
        (AnswerKind::Failure, _) => false,
        (AnswerKind::McqLabel, QuestionKind::Mcq) => {
            let label = extracted.presented_label.as_deref().unwrap_or_default();
            let mapped = variant.answer_key.get(label).copied();
            mapped.is_some() && mapped == q.gold_index()
        }
        (AnswerKind::Numeric, QuestionKind::Numeric) => {
            let got = extracted
                .numeric_value
                .as_deref()
                .and_then(normalize_number);
            got.is_some() && got == q.gold_number()
        }
        (kind, question) => {
            return Err(ExtractionError::KindMismatch {
                extracted: kind,
                question,
            })
        }
    };
    Ok(u8::from(correct))
}

/// Canonical option score for fuzziness: the chosen option's canonical
/// index, `m + 1` for a distractor, `None` for failures.
pub fn option_score(extracted: &ExtractedAnswer, q: &Question) -> Option<usize> {
    if q.kind != QuestionKind::Mcq || extracted.kind != AnswerKind::McqLabel {
        return None;
    }
    match extracted.canonical_index? {
        0 => Some(q.option_count() + 1),
        i => Some(i),
    }
}
