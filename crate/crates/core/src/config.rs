//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationConfig;
use crate::client::{BackendKind, HttpConfig, RetryPolicy};
use crate::labeling::LabelingConfig;
use crate::mutation::MutationConfig;
use crate::sampling::{DecodingProfile, FuzzinessMeasure};
use crate::simulator::{LatentMode, LatentSpec, WrongAnswerPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Share of questions used for `test`/`build`; the rest feed
    /// `simulate`/`eval`. Without it every stage uses the whole corpus.
    #[serde(default)]
    pub split_fraction: Option<f64>,
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestingConfig {
    pub k: usize,
    pub tau: f64,
    /// Requery draws per fuzzy question; defaults to `k`.
    pub m: Option<usize>,
    pub fuzziness: FuzzinessMeasure,
    pub concurrency: usize,
    pub max_tokens: u32,
    pub retry: RetryPolicy,
    /// Warn when a question's failed share exceeds this.
    pub failure_warn_ratio: f64,
}

impl Default for TestingConfig {
    fn default() -> Self {
        TestingConfig {
            k: 10,
            tau: 0.3,
            m: None,
            fuzziness: FuzzinessMeasure::Mad,
            concurrency: 4,
            max_tokens: 512,
            retry: RetryPolicy::default(),
            failure_warn_ratio: 0.2,
        }
    }
}

impl TestingConfig {
    pub fn m(&self) -> usize {
        self.m.unwrap_or(self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub profiles: Vec<DecodingProfile>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            profiles: DecodingProfile::defaults(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub latent: LatentSpec,
    pub mode: LatentMode,
    pub wrong_answers: WrongAnswerPolicy,
    /// Seed for θ; defaults to the master seed.
    pub latent_seed: Option<u64>,
    /// Share of draws that fail on every attempt.
    pub failure_rate: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            latent: LatentSpec::default(),
            mode: LatentMode::Plain,
            wrong_answers: WrongAnswerPolicy::default(),
            latent_seed: None,
            failure_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub http: Option<HttpConfig>,
    #[serde(default)]
    pub simulator: SimulatorConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulator,
            http: None,
            simulator: SimulatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Responder mode for `simulate`; the testing stage uses `backend`.
    pub mode: LatentMode,
    /// Response lines per evaluation question.
    pub repeats: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            mode: LatentMode::CalibratedResponder,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub testing: TestingConfig,
    #[serde(default)]
    pub mutation: MutationConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Backend for paraphrases and prompt rephrasing; defaults to `backend`.
    #[serde(default)]
    pub helper: Option<BackendConfig>,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    /// Answer-phrase list replacing the built-in one, one phrase per line.
    #[serde(default)]
    pub answer_phrases: Option<PathBuf>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn minimal(corpus: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: output_dir.into(),
            corpus: CorpusConfig {
                path: corpus.into(),
                split_fraction: None,
                split_seed: None,
            },
            testing: TestingConfig::default(),
            mutation: MutationConfig::default(),
            decoding: DecodingConfig::default(),
            backend: BackendConfig::default(),
            helper: None,
            labeling: LabelingConfig::default(),
            calibration: CalibrationConfig::default(),
            simulate: SimulateConfig::default(),
            answer_phrases: None,
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Loads, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut c.output_dir);
        rebase(base, &mut c.corpus.path);
        for p in c
            .mutation
            .template_dir
            .iter_mut()
            .chain(c.answer_phrases.iter_mut())
        {
            rebase(base, p);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.testing;
        if t.k == 0 {
            return bad("testing.k must be at least 1".into());
        }
        if !(0.0..=f64::MAX).contains(&t.tau) {
            return bad(format!("testing.tau must be >= 0, got {}", t.tau));
        }
        if t.concurrency == 0 {
            return bad("testing.concurrency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.failure_warn_ratio) {
            return bad("testing.failure_warn_ratio must lie in [0, 1]".into());
        }
        if let Some(f) = self.corpus.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("corpus.split_fraction must lie in (0, 1), got {f}"));
            }
        }
        self.mutation.validate().map_err(ConfigError::Invalid)?;
        if self.decoding.profiles.is_empty() {
            return bad("decoding.profiles must not be empty".into());
        }
        for p in &self.decoding.profiles {
            p.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for (name, b) in std::iter::once(("backend", &self.backend))
            .chain(self.helper.iter().map(|h| ("helper", h)))
        {
            if b.kind == BackendKind::Http && b.http.is_none() {
                return bad(format!(
                    "{name}.kind = \"http\" needs a [{name}.http] table"
                ));
            }
            b.simulator
                .latent
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !(0.0..=1.0).contains(&b.simulator.failure_rate) {
                return bad(format!("{name}.simulator.failure_rate must lie in [0, 1]"));
            }
        }
        if self.labeling.pool_size == 0 {
            return bad("labeling.pool_size must be at least 1".into());
        }
        self.calibration
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.simulate.repeats == 0 {
            return bad("simulate.repeats must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the settings that shape outputs. Concurrency, the output
    /// directory and the corpus location are left out; the manifest records
    /// the corpus content hash separately.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.testing.concurrency = 0;
        c.output_dir = PathBuf::new();
        c.corpus.path = PathBuf::new();
        hex::encode(Sha256::digest(
            serde_json::to_vec(&c).expect("config serializes"),
        ))
    }

    pub fn helper_backend(&self) -> &BackendConfig {
        self.helper.as_ref().unwrap_or(&self.backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
output_dir = "out"
answer_phrases = "phrases.txt"

[corpus]
path = "questions.jsonl"
split_fraction = 0.5

[testing]
k = 5
tau = 0.2
concurrency = 8

[mutation]
label_styles = ["upper", "arabic"]
distractors = ["none_of_the_above"]
paraphrases = 2

[[decoding.profiles]]
strategy = "top_p"
temperature = 0.7
p_cutoff = 0.95

[backend]
kind = "simulator"

[backend.simulator]
mode = "sycophantic"
latent = { distribution = "two_point", low = 0.2, high = 0.9, p_high = 0.5 }

[helper]
kind = "http"
http = { base_url = "http://localhost:8000/v1", model = "helper" }

[calibration]
bins = 5
"#;

    #[test]
    fn parses_and_rebases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lepe.toml");
        std::fs::write(&path, SAMPLE).unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.corpus.path, dir.path().join("questions.jsonl"));
        assert_eq!(c.answer_phrases, Some(dir.path().join("phrases.txt")));
        assert_eq!(c.testing.m(), 5);
        assert_eq!(c.testing.failure_warn_ratio, 0.2);
        assert_eq!(c.backend.simulator.mode, LatentMode::Sycophantic);
        assert_eq!(c.helper_backend().kind, BackendKind::Http);
        assert_eq!(c.calibration.bins, 5);
        assert_eq!(c.calibration.min_dp, 0.2);
        assert_eq!(c.decoding.profiles.len(), 1);
    }

    #[test]
    fn rejects_bad_values() {
        let p = Path::new("x.toml");
        for (from, to) in [
            ("k = 5", "k = 0"),
            ("bins = 5", "bins = 1"),
            ("split_fraction = 0.5", "split_fraction = 1.0"),
            ("p_high = 0.5", "p_high = 2.0"),
        ] {
            let c = PipelineConfig::parse(&SAMPLE.replace(from, to), p).unwrap();
            assert!(c.validate().is_err(), "{to}");
        }
        assert!(
            PipelineConfig::parse(&SAMPLE.replace("tau = 0.2", "tau = 0.2\nbogus = 1"), p).is_err()
        );
        let c = PipelineConfig::parse(
            &SAMPLE.replace("kind = \"http\"\n", "kind = \"http\"\nhttp = 3\n"),
            p,
        );
        assert!(c.is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let p = Path::new("x.toml");
        let a = PipelineConfig::parse(SAMPLE, p).unwrap();
        let b = PipelineConfig::parse(SAMPLE, p).unwrap();
        let c = PipelineConfig::parse(&SAMPLE.replace("seed = 7", "seed = 8"), p).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.testing.concurrency += 3;
        d.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), d.hash());
        let round = PipelineConfig::parse(&a.to_toml(), p).unwrap();
        assert_eq!(round, a);
    }
}
