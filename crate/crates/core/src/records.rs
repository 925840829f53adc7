//! Append-only answer record store (`records.jsonl`).
//!
//! Each line is one [`AnswerRecord`]: the question, the judged answer and the
//! presentation/decoding metadata of the draw. A run can be resumed from any
//! prefix; a partially written last line is dropped on open and reported.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::BackendKind;
use crate::corpus::{QuestionKind, QuestionSet};
use crate::extraction::{option_score, AnswerKind, ExtractedAnswer};
use crate::mutation::VariantSpec;
use crate::sampling::{fuzziness_mcq, fuzziness_numeric, DecodingProfile, FuzzinessMeasure};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate record key ({question_id:?}, {draw_index})")]
    Duplicate {
        question_id: String,
        draw_index: u64,
    },
    #[error("record store {path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub draw_index: u64,
    pub raw_text: String,
    pub extracted: ExtractedAnswer,
    pub p: u8,
    pub variant: VariantSpec,
    pub variant_digest: String,
    pub profile: DecodingProfile,
    pub backend: BackendKind,
    /// Unix milliseconds; `None` on the simulator backend so reruns are
    /// byte-identical.
    pub timestamp: Option<u64>,
    pub failed: bool,
    #[serde(default)]
    pub first_token_probability: Option<f64>,
}

impl AnswerRecord {
    pub fn check(&self) -> Result<(), String> {
        if self.p > 1 {
            return Err(format!("p = {} is not 0 or 1", self.p));
        }
        if self.failed && self.p != 0 {
            return Err("failed draw must have p = 0".into());
        }
        Ok(())
    }
}

/// Everything recorded for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionHistory {
    pub question_id: String,
    pub records: Vec<AnswerRecord>,
    /// Non-failed draws.
    pub k_effective: usize,
    /// Correct draws.
    pub f: usize,
    /// `None` when no draw produced a usable answer.
    pub fuzziness: Option<f64>,
}

impl QuestionHistory {
    pub fn failure_ratio(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        (self.records.len() - self.k_effective) as f64 / self.records.len() as f64
    }
}

/// Result of reading a store from disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub records: Vec<AnswerRecord>,
    /// Bytes of a trailing partial line that were ignored.
    pub truncated_tail: usize,
    /// Byte offset of each loaded record.
    pub offsets: Vec<u64>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads all complete records. A final line without a trailing newline that
/// fails to parse is treated as a torn write and skipped.
pub fn load_records(path: impl AsRef<Path>) -> Result<LoadReport, RecordError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut report = LoadReport::default();
    let mut offset = 0usize;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, complete) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], offset + i + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<AnswerRecord>(line) {
            Ok(r) => {
                r.check().map_err(|message| RecordError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    message,
                })?;
                report.offsets.push(offset as u64);
                report.records.push(r);
            }
            Err(_) if !complete => {
                report.truncated_tail = line.len();
                log::warn!(
                    "{}: ignoring {} bytes of a partial final record",
                    path.display(),
                    line.len()
                );
            }
            Err(e) => {
                return Err(RecordError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset = next;
    }
    Ok(report)
}

/// Single-writer append handle.
pub struct RecordStore {
    path: PathBuf,
    out: BufWriter<File>,
    keys: HashSet<(String, u64)>,
    len: usize,
    pending: usize,
    flush_every: usize,
}

impl RecordStore {
    /// Opens (creating if needed) a store; existing records are loaded, and a
    /// torn final line is cut off so appends start on a clean boundary.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, LoadReport), RecordError> {
        let path = path.as_ref().to_path_buf();
        let report = if path.exists() {
            load_records(&path)?
        } else {
            LoadReport::default()
        };
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        let keep = len - report.truncated_tail as u64;
        if keep != len {
            file.set_len(keep).map_err(io_err(&path))?;
        }
        let mut file = file;
        if keep > 0 {
            // a complete last record might still lack its newline
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(keep - 1))
                .map_err(io_err(&path))?;
            file.read_exact(&mut last).map_err(io_err(&path))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io_err(&path))?;
            }
        }
        let keys = report
            .records
            .iter()
            .map(|r| (r.question_id.clone(), r.draw_index))
            .collect();
        let store = RecordStore {
            out: BufWriter::new(file),
            keys,
            len: report.records.len(),
            pending: 0,
            flush_every: 256,
            path,
        };
        Ok((store, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, question_id: &str, draw_index: u64) -> bool {
        self.keys.contains(&(question_id.to_string(), draw_index))
    }

    pub fn append(&mut self, r: &AnswerRecord) -> Result<(), RecordError> {
        let key = (r.question_id.clone(), r.draw_index);
        if self.keys.contains(&key) {
            return Err(RecordError::Duplicate {
                question_id: key.0,
                draw_index: key.1,
            });
        }
        r.check().map_err(|message| RecordError::Corrupt {
            path: self.path.display().to_string(),
            line: self.len + 1,
            message,
        })?;
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.keys.insert(key);
        self.len += 1;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordError> {
        self.pending = 0;
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_data().map_err(io_err(&self.path))
    }
}

impl Drop for RecordStore {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Byte offsets of each question's records, for random access in large runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub offsets: BTreeMap<String, Vec<u64>>,
}

impl RecordIndex {
    pub fn build(report: &LoadReport) -> Self {
        let mut offsets: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (r, &o) in report.records.iter().zip(&report.offsets) {
            offsets.entry(r.question_id.clone()).or_default().push(o);
        }
        RecordIndex { offsets }
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        let text = serde_json::to_string(self).expect("index serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, RecordError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RecordError::Corrupt {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Reads one question's records straight from the store file.
    pub fn load_question(
        &self,
        store: &Path,
        question_id: &str,
    ) -> Result<Vec<AnswerRecord>, RecordError> {
        let Some(offsets) = self.offsets.get(question_id) else {
            return Ok(Vec::new());
        };
        let mut reader = BufReader::new(File::open(store).map_err(io_err(store))?);
        let mut out = Vec::with_capacity(offsets.len());
        let mut line = String::new();
        for &o in offsets {
            reader.seek(SeekFrom::Start(o)).map_err(io_err(store))?;
            line.clear();
            reader.read_line(&mut line).map_err(io_err(store))?;
            out.push(
                serde_json::from_str(&line).map_err(|e| RecordError::Corrupt {
                    path: store.display().to_string(),
                    line: 0,
                    message: e.to_string(),
                })?,
            );
        }
        Ok(out)
    }
}

/// One history per question in question-set order, records sorted by draw
/// index. Questions that were never drawn get no history; records of ids not
/// in the set follow in first-seen order without a fuzziness value.
pub fn group_histories(
    records: &[AnswerRecord],
    qs: &QuestionSet,
    measure: FuzzinessMeasure,
) -> Vec<QuestionHistory> {
    let mut groups: HashMap<&str, Vec<&AnswerRecord>> = HashMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for r in records {
        let e = groups.entry(r.question_id.as_str()).or_default();
        if e.is_empty() {
            first_seen.push(r.question_id.as_str());
        }
        e.push(r);
    }
    let mut order: Vec<&str> = qs
        .iter()
        .map(|q| q.id.as_str())
        .filter(|id| groups.contains_key(id))
        .collect();
    order.extend(first_seen.into_iter().filter(|id| qs.get(id).is_none()));

    order
        .into_iter()
        .map(|id| {
            let mut recs: Vec<AnswerRecord> = groups[id].iter().map(|r| (*r).clone()).collect();
            recs.sort_by_key(|r| r.draw_index);
            let live: Vec<&AnswerRecord> = recs.iter().filter(|r| !r.failed).collect();
            let fuzziness = qs.get(id).and_then(|q| match q.kind {
                QuestionKind::Mcq => {
                    let scores: Vec<usize> = live
                        .iter()
                        .filter_map(|r| option_score(&r.extracted, q))
                        .collect();
                    fuzziness_mcq(&scores, measure).ok()
                }
                QuestionKind::Numeric => {
                    let answers: Vec<&str> = live
                        .iter()
                        .filter(|r| r.extracted.kind == AnswerKind::Numeric)
                        .filter_map(|r| r.extracted.numeric_value.as_deref())
                        .collect();
                    fuzziness_numeric(&answers).ok()
                }
            });
            QuestionHistory {
                question_id: id.to_string(),
                k_effective: live.len(),
                f: live.iter().map(|r| r.p as usize).sum(),
                fuzziness,
                records: recs,
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::corpus::Question;
    use crate::mutation::VariantSpec;

    pub fn record(q: &Question, draw_index: u64, p: u8, failed: bool) -> AnswerRecord {
        let variant = VariantSpec::identity(q, crate::mutation::template::TASK);
        let extracted = if failed {
            ExtractedAnswer::failure()
        } else {
            match q.kind {
                QuestionKind::Mcq => {
                    let idx = if p == 1 {
                        q.gold_index().unwrap()
                    } else {
                        (q.gold_index().unwrap() % q.option_count()) + 1
                    };
                    ExtractedAnswer {
                        kind: AnswerKind::McqLabel,
                        presented_label: Some(((b'A' + idx as u8 - 1) as char).to_string()),
                        canonical_index: Some(idx),
                        numeric_value: None,
                        matched_by: crate::extraction::MatchedBy::AnswerPhrase,
                    }
                }
                QuestionKind::Numeric => ExtractedAnswer {
                    kind: AnswerKind::Numeric,
                    presented_label: None,
                    canonical_index: None,
                    numeric_value: Some(if p == 1 {
                        q.gold_number().unwrap()
                    } else {
                        format!("9{draw_index}")
                    }),
                    matched_by: crate::extraction::MatchedBy::AnswerPhrase,
                },
            }
        };
        AnswerRecord {
            question_id: q.id.clone(),
            draw_index,
            raw_text: format!("draw {draw_index}"),
            extracted,
            p,
            variant_digest: variant.digest(),
            variant,
            profile: DecodingProfile::RandomTemperature { temperature: 1.0 },
            backend: BackendKind::Simulator,
            timestamp: None,
            failed,
            first_token_probability: None,
        }
    }
}
