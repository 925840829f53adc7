//! Question sets: loading, validation and train/eval splitting.
//!
//! On disk a question set is UTF-8 JSON lines:
//!
//! ```text
//! {"id":"q1","kind":"mcq","stem":"...","options":[{"text":"..."}],"gold":2,"tags":[]}
//! {"id":"q2","kind":"numeric","stem":"2+2?","gold":"4","tags":["math"]}
//! ```
//!
//! Options keep their source order with 1-based canonical indices. Mutations
//! happen at render time only, so gold keys never move.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extraction::normalize_number;
use crate::seed::{self, Stream};

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 26;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse failure: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: missing gold")]
    MissingGold { line: usize },
    #[error("line {line}: gold out of range ({gold} with {options} options)")]
    GoldOutOfRange {
        line: usize,
        gold: i64,
        options: usize,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("question set is empty")]
    Empty,
    #[error("split fraction {fraction} of {n} questions leaves an empty part")]
    EmptySplit { fraction: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Mcq,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOption {
    /// 1-based position in source order.
    pub canonical_index: usize,
    pub text: String,
    #[serde(default)]
    pub is_distractor: bool,
}

/// Gold answer: a canonical option index for MCQ, a numeric string otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Option(usize),
    Number(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub stem: String,
    pub options: Vec<QuestionOption>,
    pub gold: Gold,
    pub tags: Vec<String>,
}

impl Question {
    pub fn mcq(id: &str, stem: &str, options: &[&str], gold: usize) -> Self {
        Question {
            id: id.to_string(),
            kind: QuestionKind::Mcq,
            stem: stem.to_string(),
            options: options
                .iter()
                .enumerate()
                .map(|(i, t)| QuestionOption {
                    canonical_index: i + 1,
                    text: t.to_string(),
                    is_distractor: false,
                })
                .collect(),
            gold: Gold::Option(gold),
            tags: Vec::new(),
        }
    }

    pub fn numeric(id: &str, stem: &str, gold: &str) -> Self {
        Question {
            id: id.to_string(),
            kind: QuestionKind::Numeric,
            stem: stem.to_string(),
            options: Vec::new(),
            gold: Gold::Number(gold.to_string()),
            tags: Vec::new(),
        }
    }

    /// Gold canonical index; `None` for numeric questions.
    pub fn gold_index(&self) -> Option<usize> {
        match self.gold {
            Gold::Option(i) => Some(i),
            Gold::Number(_) => None,
        }
    }

    /// Normalized numeric gold; `None` for MCQ.
    pub fn gold_number(&self) -> Option<String> {
        match &self.gold {
            Gold::Number(s) => normalize_number(s),
            Gold::Option(_) => None,
        }
    }

    pub fn option_count(&self) -> usize {
        self.options.len()
    }

    pub fn option_text(&self, canonical_index: usize) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.canonical_index == canonical_index)
            .map(|o| o.text.as_str())
    }

    /// Checks every invariant that does not involve other questions.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        match self.kind {
            QuestionKind::Mcq => {
                let m = self.options.len();
                if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&m) {
                    return Err(format!(
                        "mcq needs {MIN_OPTIONS}..={MAX_OPTIONS} options, got {m}"
                    ));
                }
                for (i, o) in self.options.iter().enumerate() {
                    if o.canonical_index != i + 1 {
                        return Err("canonical indices must be 1..m in order".into());
                    }
                    if o.text.trim().is_empty() {
                        return Err(format!("option {} has empty text", i + 1));
                    }
                }
                let mut seen = HashSet::new();
                for o in &self.options {
                    if !seen.insert(normalize_option_text(&o.text)) {
                        return Err(format!("duplicate option text {:?}", o.text));
                    }
                }
                match self.gold {
                    Gold::Option(g) if (1..=m).contains(&g) => Ok(()),
                    Gold::Option(g) => Err(format!("gold out of range ({g} with {m} options)")),
                    Gold::Number(_) => Err("mcq gold must be an integer index".into()),
                }
            }
            QuestionKind::Numeric => {
                if !self.options.is_empty() {
                    return Err("numeric question must not have options".into());
                }
                match &self.gold {
                    Gold::Number(s) if normalize_number(s).is_some() => Ok(()),
                    Gold::Number(s) => Err(format!("numeric gold {s:?} is not a number")),
                    Gold::Option(_) => Err("numeric gold must be a string".into()),
                }
            }
        }
    }
}

/// Case- and whitespace-insensitive form used for option uniqueness.
pub fn normalize_option_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSet {
    questions: Vec<Question>,
}

impl QuestionSet {
    /// Validates invariants, including id uniqueness.
    pub fn new(questions: Vec<Question>) -> Result<Self, CorpusError> {
        if questions.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut ids = HashSet::new();
        for (i, q) in questions.iter().enumerate() {
            q.validate().map_err(|message| CorpusError::Invalid {
                line: i + 1,
                message,
            })?;
            if !ids.insert(q.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: q.id.clone(),
                });
            }
        }
        Ok(QuestionSet { questions })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn n(&self) -> usize {
        self.questions.len()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter()
    }
}

#[derive(Deserialize)]
struct RawOption {
    text: String,
}

#[derive(Deserialize)]
struct RawQuestion {
    id: String,
    kind: QuestionKind,
    stem: String,
    #[serde(default)]
    options: Vec<RawOption>,
    #[serde(default)]
    gold: Option<Value>,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Serialize)]
struct RawOptionOut<'a> {
    text: &'a str,
}

#[derive(Serialize)]
struct RawQuestionOut<'a> {
    id: &'a str,
    kind: QuestionKind,
    stem: &'a str,
    options: Vec<RawOptionOut<'a>>,
    gold: Value,
    tags: &'a [String],
}

fn parse_line(line_no: usize, line: &str) -> Result<Question, CorpusError> {
    let raw: RawQuestion = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let gold_value = match raw.gold {
        None | Some(Value::Null) => return Err(CorpusError::MissingGold { line: line_no }),
        Some(v) => v,
    };
    let options: Vec<QuestionOption> = raw
        .options
        .into_iter()
        .enumerate()
        .map(|(i, o)| QuestionOption {
            canonical_index: i + 1,
            text: o.text,
            is_distractor: false,
        })
        .collect();
    let invalid = |message: String| CorpusError::Invalid {
        line: line_no,
        message,
    };
    let gold = match raw.kind {
        QuestionKind::Mcq => {
            let g = gold_value
                .as_i64()
                .ok_or_else(|| invalid("mcq gold must be a 1-based integer".into()))?;
            if g < 1 || g as usize > options.len() {
                return Err(CorpusError::GoldOutOfRange {
                    line: line_no,
                    gold: g,
                    options: options.len(),
                });
            }
            Gold::Option(g as usize)
        }
        QuestionKind::Numeric => match gold_value {
            Value::String(s) => Gold::Number(s),
            _ => return Err(invalid("numeric gold must be a string".into())),
        },
    };
    let q = Question {
        id: raw.id,
        kind: raw.kind,
        stem: raw.stem,
        options,
        gold,
        tags: raw.tags,
    };
    q.validate().map_err(invalid)?;
    Ok(q)
}

/// Loads and validates a question file, preserving order. Blank lines are
/// skipped; reported line numbers are 1-based physical lines.
pub fn load_questions(path: impl AsRef<Path>) -> Result<QuestionSet, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut questions = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_line(i + 1, &line)?;
        if !ids.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: i + 1,
                id: q.id,
            });
        }
        questions.push(q);
    }
    QuestionSet::new(questions)
}

/// Writes a set in the on-disk format; `load_questions` reads it back unchanged.
pub fn write_questions(qs: &QuestionSet, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for q in qs.iter() {
        let gold = match &q.gold {
            Gold::Option(i) => Value::from(*i),
            Gold::Number(s) => Value::from(s.as_str()),
        };
        let raw = RawQuestionOut {
            id: &q.id,
            kind: q.kind,
            stem: &q.stem,
            options: q
                .options
                .iter()
                .map(|o| RawOptionOut { text: &o.text })
                .collect(),
            gold,
            tags: &q.tags,
        };
        let line = serde_json::to_string(&raw).expect("question serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Deterministic disjoint split. The first part holds `round(n * fraction)`
/// questions; both parts keep source order.
pub fn split_set(
    qs: &QuestionSet,
    fraction: f64,
    seed: u64,
) -> Result<(QuestionSet, QuestionSet), CorpusError> {
    let n = qs.n();
    let first = (n as f64 * fraction).round();
    if !(fraction > 0.0 && fraction < 1.0) || first < 1.0 || first as usize >= n {
        return Err(CorpusError::EmptySplit { fraction, n });
    }
    let first = first as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Split, 0));
    let mut chosen = vec![false; n];
    for &i in &order[..first] {
        chosen[i] = true;
    }
    let (a, b): (Vec<_>, Vec<_>) = qs
        .questions
        .iter()
        .cloned()
        .zip(chosen)
        .partition(|(_, c)| *c);
    Ok((
        QuestionSet {
            questions: a.into_iter().map(|(q, _)| q).collect(),
        },
        QuestionSet {
            questions: b.into_iter().map(|(q, _)| q).collect(),
        },
    ))
}

/// Content hash of a set as written to disk, for run manifests.
pub fn content_hash(qs: &QuestionSet) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for q in qs.iter() {
        h.update(serde_json::to_vec(q).expect("question serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const MCQ1: &str = r#"{"id":"a","kind":"mcq","stem":"Pick","options":[{"text":"x"},{"text":"y"},{"text":"z"},{"text":"w"}],"gold":2,"tags":[]}"#;
    const MCQ2: &str = r#"{"id":"b","kind":"mcq","stem":"Pick again","options":[{"text":"x"},{"text":"y"}],"gold":1,"tags":["t"]}"#;

    #[test]
    fn loads_two_mcq_rows() {
        let f = write_tmp(&[MCQ1, MCQ2]);
        let qs = load_questions(f.path()).unwrap();
        assert_eq!(qs.n(), 2);
        assert_eq!(qs.questions()[0].id, "a");
        assert_eq!(qs.questions()[1].options[1].canonical_index, 2);
        assert!(!qs.questions()[0].options[0].is_distractor);
    }

    #[test]
    fn gold_out_of_range() {
        let f = write_tmp(&[
            r#"{"id":"a","kind":"mcq","stem":"s","options":[{"text":"1"},{"text":"2"},{"text":"3"},{"text":"4"}],"gold":5}"#,
        ]);
        let err = load_questions(f.path()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::GoldOutOfRange {
                line: 1,
                gold: 5,
                options: 4
            }
        ));
        assert!(err.to_string().contains("gold out of range"));
    }

    #[test]
    fn numeric_row() {
        let f = write_tmp(&[r#"{"id":"n","kind":"numeric","stem":"2+2?","gold":"4"}"#]);
        let qs = load_questions(f.path()).unwrap();
        assert_eq!(qs.questions()[0].kind, QuestionKind::Numeric);
        assert_eq!(qs.questions()[0].gold_number().as_deref(), Some("4"));
    }

    #[test]
    fn reports_line_numbers() {
        let f = write_tmp(&[MCQ1, "", "{not json"]);
        match load_questions(f.path()).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_and_missing_gold() {
        let f = write_tmp(&[MCQ1, MCQ1]);
        assert!(matches!(
            load_questions(f.path()).unwrap_err(),
            CorpusError::DuplicateId { line: 2, .. }
        ));
        let f = write_tmp(&[
            r#"{"id":"a","kind":"mcq","stem":"s","options":[{"text":"1"},{"text":"2"}]}"#,
        ]);
        assert!(matches!(
            load_questions(f.path()).unwrap_err(),
            CorpusError::MissingGold { line: 1 }
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        let cases = [
            r#"{"id":"a","kind":"mcq","stem":"s","options":[{"text":"only"}],"gold":1}"#,
            r#"{"id":"a","kind":"mcq","stem":"s","options":[{"text":"Same"},{"text":" same "}],"gold":1}"#,
            r#"{"id":"","kind":"numeric","stem":"s","gold":"1"}"#,
            r#"{"id":"a","kind":"numeric","stem":"s","gold":"abc"}"#,
            r#"{"id":"a","kind":"numeric","stem":"s","gold":4}"#,
        ];
        for c in cases {
            let f = write_tmp(&[c]);
            assert!(
                matches!(
                    load_questions(f.path()).unwrap_err(),
                    CorpusError::Invalid { .. }
                ),
                "{c}"
            );
        }
        let f = write_tmp(&[]);
        assert!(matches!(
            load_questions(f.path()).unwrap_err(),
            CorpusError::Empty
        ));
    }

    fn ten() -> QuestionSet {
        QuestionSet::new(
            (0..10)
                .map(|i| Question::numeric(&format!("q{i}"), "s", &i.to_string()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let qs = ten();
        let (a, b) = split_set(&qs, 0.8, 7).unwrap();
        assert_eq!((a.n(), b.n()), (8, 2));
        let (a2, b2) = split_set(&qs, 0.8, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut ids: Vec<_> = a.iter().chain(b.iter()).map(|q| q.id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = qs.iter().map(|q| q.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn split_rejects_empty_part() {
        let qs = QuestionSet::new(vec![Question::numeric("q", "s", "1")]).unwrap();
        assert!(matches!(
            split_set(&qs, 0.5, 1).unwrap_err(),
            CorpusError::EmptySplit { .. }
        ));
        assert!(split_set(&ten(), 1.0, 1).is_err());
    }
}
