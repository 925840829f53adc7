//! Stem paraphrases from a helper model, cached as JSONL sidecars.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::client::{Backend, CompletionRequest};
use crate::corpus::Question;
use crate::sampling::DecodingProfile;

const PARAPHRASE_PROMPT: &str = "Rewrite the following question so that it keeps exactly the same \
meaning and the same correct answer. Reply with the rewritten question only.\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub question_id: String,
    pub paraphrase_id: String,
    pub text: String,
}

/// Paraphrase cache. Reads are concurrent; appends go through one lock.
#[derive(Debug)]
pub struct ParaphraseCache {
    entries: Mutex<BTreeMap<(String, String), String>>,
    file: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl ParaphraseCache {
    pub fn in_memory() -> Self {
        ParaphraseCache {
            entries: Mutex::new(BTreeMap::new()),
            file: Mutex::new(None),
            path: None,
        }
    }

    /// Loads `path` if present and appends new entries to it.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert((e.question_id, e.paraphrase_id), e.text);
                    }
                    Err(e) => log::warn!("{}: skipping bad cache line: {e}", path.display()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ParaphraseCache {
            entries: Mutex::new(entries),
            file: Mutex::new(Some(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, question_id: &str, paraphrase_id: &str) -> Option<String> {
        self.entries
            .lock()
            .unwrap()
            .get(&(question_id.to_string(), paraphrase_id.to_string()))
            .cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> std::io::Result<()> {
        let mut file = self.file.lock().unwrap();
        if let Some(f) = file.as_mut() {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&entry).expect("entry serializes")
            )?;
            f.flush()?;
        }
        self.entries
            .lock()
            .unwrap()
            .insert((entry.question_id, entry.paraphrase_id), entry.text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParaphraseSource {
    Cache,
    Generated,
    /// The helper failed; the original stem is used and nothing is cached.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paraphrase {
    pub text: String,
    pub source: ParaphraseSource,
}

/// Cached paraphrase of `q`'s stem, generating one on a miss.
pub fn paraphrase_stem<B: Backend + ?Sized>(
    q: &Question,
    paraphrase_id: &str,
    client: &B,
    cache: &ParaphraseCache,
) -> Paraphrase {
    if let Some(text) = cache.get(&q.id, paraphrase_id) {
        return Paraphrase {
            text,
            source: ParaphraseSource::Cache,
        };
    }
    let req = CompletionRequest {
        max_tokens: 256,
        ..CompletionRequest::new(
            format!("paraphrase:{}:{paraphrase_id}", q.id),
            format!("{PARAPHRASE_PROMPT}{}", q.stem),
            DecodingProfile::RandomTemperature { temperature: 1.0 },
        )
    };
    let fallback = |why: String| {
        log::warn!(
            "paraphrase of {} ({paraphrase_id}) unavailable, using original stem: {why}",
            q.id
        );
        Paraphrase {
            text: q.stem.clone(),
            source: ParaphraseSource::Fallback,
        }
    };
    match client.complete(&req) {
        Ok(resp) if !resp.text.trim().is_empty() => {
            let text = resp.text.trim().to_string();
            if let Err(e) = cache.insert(CacheEntry {
                question_id: q.id.clone(),
                paraphrase_id: paraphrase_id.to_string(),
                text: text.clone(),
            }) {
                log::warn!("could not persist paraphrase of {}: {e}", q.id);
            }
            Paraphrase {
                text,
                source: ParaphraseSource::Generated,
            }
        }
        Ok(_) => fallback("empty response".into()),
        Err(e) => fallback(e.to_string()),
    }
}
