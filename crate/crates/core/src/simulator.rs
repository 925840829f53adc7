//! Synthetic respondents with a known per-question correctness probability.
//!
//! Each question gets a latent θ. A simulated draw is correct with
//! probability θ (or 1 − θ for paraphrased stems in sycophantic mode), and the
//! reply is written in the answer format extraction understands.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Backend, BackendError, BackendKind, CompletionRequest, CompletionResponse};
use crate::corpus::{Question, QuestionKind, QuestionSet};
use crate::labeling::{
    format_confidence_statement, mcq_answer_statement, numeric_answer_statement,
};
use crate::mutation::PresentedQuestion;
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("malformed latent spec: {0}")]
    Malformed(String),
    #[error("no theta for question {0}")]
    MissingTheta(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Answers only, no confidence statement.
    #[default]
    Plain,
    /// Appends "My confidence is θ%".
    CalibratedResponder,
    /// Appends "My confidence is (1 − θ)%".
    AntiCalibrated,
    /// Correct with probability 1 − θ when the stem is paraphrased.
    Sycophantic,
}

impl LatentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentMode::Plain => "plain",
            LatentMode::CalibratedResponder => "calibrated_responder",
            LatentMode::AntiCalibrated => "anti_calibrated",
            LatentMode::Sycophantic => "sycophantic",
        }
    }
}

/// How wrong answers are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrongAnswerPolicy {
    /// Injected distractors are eligible wrong choices.
    pub include_distractors: bool,
    /// Numeric wrong answers add a nonzero integer in `±1..=max`.
    pub numeric_max_offset: u32,
}

impl Default for WrongAnswerPolicy {
    fn default() -> Self {
        WrongAnswerPolicy {
            include_distractors: true,
            numeric_max_offset: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentSpec {
    Constant {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// θ = `high` with probability `p_high`, else `low`.
    TwoPoint {
        low: f64,
        high: f64,
        p_high: f64,
    },
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec::Uniform {
            low: 0.0,
            high: 1.0,
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimulatorError::Malformed(format!(
                    "{name} = {v} is outside [0, 1]"
                )))
            }
        };
        match *self {
            LatentSpec::Constant { value } => unit("value", value),
            LatentSpec::Uniform { low, high } | LatentSpec::TwoPoint { low, high, .. } => {
                unit("low", low)?;
                unit("high", high)?;
                if low > high {
                    return Err(SimulatorError::Malformed(format!(
                        "low {low} exceeds high {high}"
                    )));
                }
                if let LatentSpec::TwoPoint { p_high, .. } = *self {
                    unit("p_high", p_high)?;
                }
                Ok(())
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            LatentSpec::Constant { value } => value,
            LatentSpec::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            LatentSpec::TwoPoint { low, high, p_high } => {
                if rng.random::<f64>() < p_high {
                    high
                } else {
                    low
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub theta: BTreeMap<String, f64>,
    pub mode: LatentMode,
    pub wrong_answer_policy: WrongAnswerPolicy,
}

/// θ for every question, drawn independently per question position.
pub fn make_latent(
    qs: &QuestionSet,
    spec: &LatentSpec,
    seed: u64,
) -> Result<LatentModel, SimulatorError> {
    spec.validate()?;
    let theta = qs
        .iter()
        .enumerate()
        .map(|(i, q)| {
            (
                q.id.clone(),
                spec.sample(&mut seed::rng(seed, Stream::Latent, i as u64)),
            )
        })
        .collect();
    Ok(LatentModel {
        theta,
        mode: LatentMode::Plain,
        wrong_answer_policy: WrongAnswerPolicy::default(),
    })
}

impl LatentModel {
    pub fn with_mode(mut self, mode: LatentMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn theta(&self, question_id: &str) -> Result<f64, SimulatorError> {
        self.theta
            .get(question_id)
            .copied()
            .ok_or_else(|| SimulatorError::MissingTheta(question_id.to_string()))
    }

    /// Probability that a draw is answered correctly.
    pub fn p_correct(&self, question_id: &str, paraphrased: bool) -> Result<f64, SimulatorError> {
        let t = self.theta(question_id)?;
        Ok(match self.mode {
            LatentMode::Sycophantic if paraphrased => 1.0 - t,
            _ => t,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SimulatorError> {
        let mut s = serde_json::to_string_pretty(self).expect("latent serializes");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedAnswer {
    pub text: String,
    pub correct: bool,
    pub first_token_probability: Option<f64>,
}

fn offset_number(gold: &str, delta: i64) -> String {
    let (neg, digits) = match gold.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, gold),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let scale = frac.len() as u32;
    let shifted = format!("{int}{frac}").parse::<i128>().ok().and_then(|m| {
        let v = if neg { -m } else { m };
        10i128
            .checked_pow(scale)
            .and_then(|p| v.checked_add(delta as i128 * p))
    });
    let Some(v) = shifted else {
        return format!("{gold}1");
    };
    let abs = v.unsigned_abs().to_string();
    let abs = if scale == 0 {
        abs
    } else {
        let padded = format!("{abs:0>width$}", width = scale as usize + 1);
        let (i, f) = padded.split_at(padded.len() - scale as usize);
        format!("{i}.{f}")
    };
    let s = if v < 0 { format!("-{abs}") } else { abs };
    crate::extraction::normalize_number(&s).unwrap_or(s)
}

/// One simulated reply to `presented`. Deterministic in `seed`.
pub fn simulate_answer(
    q: &Question,
    presented: &PresentedQuestion,
    latent: &LatentModel,
    paraphrased: bool,
    seed: u64,
) -> Result<SimulatedAnswer, SimulatorError> {
    let theta = latent.theta(&q.id)?;
    let p = latent.p_correct(&q.id, paraphrased)?;
    let mut rng = seed::rng(seed, Stream::Simulator, 0);
    let correct = rng.random::<f64>() < p;
    let policy = latent.wrong_answer_policy;
    let mut text = match q.kind {
        QuestionKind::Mcq => {
            let gold = presented
                .gold_option()
                .ok_or_else(|| SimulatorError::Malformed(format!("{} has no gold option", q.id)))?;
            let chosen = if correct {
                gold
            } else {
                let wrong: Vec<_> = presented
                    .presented_options
                    .iter()
                    .filter(|o| o.label != gold.label)
                    .filter(|o| policy.include_distractors || o.canonical_index != 0)
                    .collect();
                if wrong.is_empty() {
                    gold
                } else {
                    wrong[rng.random_range(0..wrong.len())]
                }
            };
            mcq_answer_statement(&chosen.label, &chosen.text)
        }
        QuestionKind::Numeric => {
            let gold = q.gold_number().unwrap_or_default();
            let answer = if correct || policy.numeric_max_offset == 0 {
                gold
            } else {
                let max = policy.numeric_max_offset as i64;
                let mag = rng.random_range(1..=max);
                let delta = if rng.random_bool(0.5) { mag } else { -mag };
                offset_number(&gold, delta)
            };
            numeric_answer_statement(&answer)
        }
    };
    let stated = match latent.mode {
        LatentMode::CalibratedResponder => Some(theta),
        LatentMode::AntiCalibrated => Some(1.0 - theta),
        LatentMode::Plain | LatentMode::Sycophantic => None,
    };
    if let Some(c) = stated {
        text.push(' ');
        text.push_str(&format_confidence_statement(c));
    }
    Ok(SimulatedAnswer {
        text,
        correct,
        first_token_probability: Some(p.clamp(0.01, 1.0)),
    })
}

const ECHO_PREFIXES: [&str; 5] = [
    "In other words,",
    "Put differently,",
    "Restated:",
    "To rephrase,",
    "Consider this:",
];

/// Offline backend. Answer requests must carry a `DrawContext`; requests
/// without one (paraphrasing, prompt rephrasing) get a deterministic echo of
/// the prompt's last paragraph.
#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    latent: LatentModel,
    questions: BTreeMap<String, Question>,
    failure_rate: f64,
}

impl SimulatorBackend {
    pub fn new(latent: LatentModel, qs: &QuestionSet) -> Self {
        SimulatorBackend {
            latent,
            questions: qs.iter().map(|q| (q.id.clone(), q.clone())).collect(),
            failure_rate: 0.0,
        }
    }

    /// Fails a deterministic fraction of draws with a transient error on
    /// every attempt, for exercising failure handling.
    pub fn with_failure_rate(mut self, rate: f64) -> Self {
        self.failure_rate = rate.clamp(0.0, 1.0);
        self
    }

    pub fn latent(&self) -> &LatentModel {
        &self.latent
    }
}

fn echo(req: &CompletionRequest) -> String {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(req.request_id.as_bytes());
    let prefix = ECHO_PREFIXES[h[0] as usize % ECHO_PREFIXES.len()];
    let last = req
        .prompt_text
        .trim()
        .rsplit("\n\n")
        .next()
        .unwrap_or_default()
        .trim();
    let mut chars = last.chars();
    match chars.next() {
        Some(c) if prefix.ends_with(',') => {
            format!("{prefix} {}{}", c.to_lowercase(), chars.as_str())
        }
        _ => format!("{prefix} {last}"),
    }
}

impl Backend for SimulatorBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulator
    }

    fn identity(&self) -> String {
        format!("simulator:{}", self.latent.mode.as_str())
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let Some(ctx) = &req.draw else {
            return Ok(CompletionResponse {
                text: echo(req),
                first_token_probability: None,
                backend: BackendKind::Simulator,
                latency: Duration::ZERO,
            });
        };
        if self.failure_rate > 0.0 {
            let mut rng = seed::rng(ctx.seed, Stream::Simulator, 1);
            if rng.random::<f64>() < self.failure_rate {
                return Err(BackendError::Transient(format!(
                    "simulated failure for {}",
                    req.request_id
                )));
            }
        }
        let q = self.questions.get(&ctx.question_id).ok_or_else(|| {
            BackendError::Fatal(format!("simulator has no question {}", ctx.question_id))
        })?;
        let a = simulate_answer(q, &ctx.presented, &self.latent, ctx.paraphrased, ctx.seed)
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(CompletionResponse {
            text: a.text,
            first_token_probability: a.first_token_probability,
            backend: BackendKind::Simulator,
            latency: Duration::ZERO,
        })
    }
}
