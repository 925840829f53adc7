//! Confidence-annotated instruction data from answer histories.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Backend, CompletionRequest};
use crate::corpus::{normalize_option_text, Question, QuestionKind};
use crate::extraction::AnswerKind;
use crate::mutation::{
    template, Distractor, MutationError, PresentedQuestion, Renderer, VariantSpec,
};
use crate::records::{AnswerRecord, QuestionHistory};
use crate::sampling::DecodingProfile;
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("question {0} has no completed draws")]
    NoLiveDraws(String),
    #[error("history is for {history} but question is {question}")]
    Mismatch { history: String, question: String },
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Render(#[from] MutationError),
    #[error("prompt pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    AllCorrect,
    Partial,
    AllWrong,
}

/// One row of instruction.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub prompt: String,
    pub response: String,
    pub confidence: f64,
    pub loss_masked: bool,
    pub case: Case,
    pub question_id: String,
}

/// How many rows an all-wrong history yields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllWrongPolicy {
    /// One sampled incorrect answer.
    #[default]
    One,
    /// One row per distinct incorrect answer.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub all_wrong: AllWrongPolicy,
    /// One row per completed draw instead of one per question.
    pub per_draw: bool,
    /// Instruction pool size, seed prompt included.
    pub pool_size: usize,
    /// Distractors shown in training prompts.
    pub prompt_distractors: Vec<Distractor>,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            all_wrong: AllWrongPolicy::One,
            per_draw: false,
            pool_size: 5,
            prompt_distractors: vec![Distractor::NoneOfTheAbove],
        }
    }
}

pub fn compute_confidence(h: &QuestionHistory) -> Result<f64, LabelingError> {
    if h.k_effective == 0 {
        return Err(LabelingError::NoLiveDraws(h.question_id.clone()));
    }
    Ok(h.f as f64 / h.k_effective as f64)
}

pub fn case_of(h: &QuestionHistory) -> Result<Case, LabelingError> {
    if h.k_effective == 0 {
        return Err(LabelingError::NoLiveDraws(h.question_id.clone()));
    }
    Ok(match h.f {
        0 => Case::AllWrong,
        f if f >= h.k_effective => Case::AllCorrect,
        _ => Case::Partial,
    })
}

/// Percent with one decimal, half-up, trailing ".0" dropped.
pub fn format_percent(conf: f64) -> String {
    let tenths = (conf.clamp(0.0, 1.0) * 1000.0 + 0.5 + 1e-9).floor() as u64;
    if tenths.is_multiple_of(10) {
        (tenths / 10).to_string()
    } else {
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

pub fn format_confidence_statement(conf: f64) -> String {
    format!("My confidence is {}%.", format_percent(conf))
}

fn sentence(text: &str) -> String {
    let t = text.trim();
    if t.ends_with(['.', '!', '?']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

pub fn mcq_answer_statement(label: &str, text: &str) -> String {
    format!("The correct answer is {label}. {}", sentence(text))
}

pub fn numeric_answer_statement(answer: &str) -> String {
    format!("The answer is {answer}.")
}

/// The confidence-expression rendering of `q`: source order, upper-case
/// labels, `distractors` appended.
pub fn confidence_view(
    renderer: &Renderer,
    q: &Question,
    distractors: &[Distractor],
    instruction: &str,
) -> Result<PresentedQuestion, LabelingError> {
    let mut spec = VariantSpec::identity(q, template::CONFIDENCE);
    if q.kind == QuestionKind::Mcq {
        spec.distractors = distractors.to_vec();
    }
    Ok(renderer.render(q, &spec, None, Some(instruction))?)
}

fn question_key(id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Emits instruction rows, cycling instructions round-robin over the pool.
#[derive(Debug, Clone)]
pub struct Labeler {
    renderer: Renderer,
    config: LabelingConfig,
    pool: Vec<String>,
    seed: u64,
    emitted: usize,
}

impl Labeler {
    pub fn new(
        renderer: Renderer,
        config: LabelingConfig,
        pool: Vec<String>,
        seed: u64,
    ) -> Result<Self, LabelingError> {
        if pool.is_empty() {
            return Err(LabelingError::EmptyPool);
        }
        Ok(Labeler {
            renderer,
            config,
            pool,
            seed,
            emitted: 0,
        })
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    fn next_instruction(&mut self) -> String {
        let s = self.pool[self.emitted % self.pool.len()].clone();
        self.emitted += 1;
        s
    }

    fn training_view(
        &self,
        q: &Question,
        instruction: &str,
    ) -> Result<PresentedQuestion, LabelingError> {
        confidence_view(
            &self.renderer,
            q,
            &self.config.prompt_distractors,
            instruction,
        )
    }

    fn gold_statement(q: &Question, view: &PresentedQuestion) -> String {
        match q.kind {
            QuestionKind::Mcq => {
                let g = view.gold_option().expect("gold is always presented");
                mcq_answer_statement(&g.label, &g.text)
            }
            QuestionKind::Numeric => numeric_answer_statement(&q.gold_number().unwrap_or_default()),
        }
    }

    /// The record's answer restated against the training view, if it is an
    /// incorrect answer that view can express.
    fn wrong_statement(
        &self,
        q: &Question,
        view: &PresentedQuestion,
        r: &AnswerRecord,
    ) -> Option<String> {
        if r.failed || r.p != 0 {
            return None;
        }
        match (q.kind, r.extracted.kind) {
            (QuestionKind::Mcq, AnswerKind::McqLabel) => {
                let label = r.extracted.presented_label.as_deref()?;
                let shown = self.renderer.render(q, &r.variant, None, None).ok()?;
                let chosen = shown.option_by_label(label)?;
                let target = if chosen.canonical_index != 0 {
                    view.presented_options
                        .iter()
                        .find(|o| o.canonical_index == chosen.canonical_index)
                } else {
                    let want = normalize_option_text(&chosen.text);
                    view.presented_options
                        .iter()
                        .find(|o| o.canonical_index == 0 && normalize_option_text(&o.text) == want)
                }?;
                (Some(target.canonical_index) != q.gold_index())
                    .then(|| mcq_answer_statement(&target.label, &target.text))
            }
            (QuestionKind::Numeric, AnswerKind::Numeric) => {
                let v = r.extracted.numeric_value.as_deref()?;
                (Some(v.to_string()) != q.gold_number()).then(|| numeric_answer_statement(v))
            }
            _ => None,
        }
    }

    fn wrong_or_raw(&self, q: &Question, view: &PresentedQuestion, r: &AnswerRecord) -> String {
        self.wrong_statement(q, view, r)
            .unwrap_or_else(|| r.raw_text.trim().to_string())
    }

    /// Answer statements for the rows of `h`, with their case.
    fn answers(
        &self,
        h: &QuestionHistory,
        q: &Question,
        view: &PresentedQuestion,
    ) -> Result<(Case, Vec<String>), LabelingError> {
        if h.question_id != q.id {
            return Err(LabelingError::Mismatch {
                history: h.question_id.clone(),
                question: q.id.clone(),
            });
        }
        let case = case_of(h)?;
        let live: Vec<&AnswerRecord> = h.records.iter().filter(|r| !r.failed).collect();
        if case != Case::AllWrong {
            let n = if self.config.per_draw { live.len() } else { 1 };
            return Ok((case, vec![Self::gold_statement(q, view); n]));
        }
        if self.config.per_draw {
            return Ok((
                case,
                live.iter().map(|r| self.wrong_or_raw(q, view, r)).collect(),
            ));
        }
        let mut usable: Vec<String> = Vec::new();
        for r in &live {
            if let Some(s) = self.wrong_statement(q, view, r) {
                if !usable.contains(&s) {
                    usable.push(s);
                }
            }
        }
        let mut rng = seed::rng(
            seed::derive(self.seed, Stream::Labeling, question_key(&q.id)),
            Stream::Labeling,
            0,
        );
        Ok((
            case,
            match (self.config.all_wrong, usable.is_empty()) {
                (AllWrongPolicy::All, false) => usable,
                (AllWrongPolicy::One, false) => {
                    vec![usable.swap_remove(rng.random_range(0..usable.len()))]
                }
                (_, true) => {
                    vec![self.wrong_or_raw(q, view, live[rng.random_range(0..live.len())])]
                }
            },
        ))
    }

    fn rows(
        &mut self,
        h: &QuestionHistory,
        q: &Question,
        mut confidence: impl FnMut(Case, usize) -> f64,
    ) -> Result<Vec<InstructionRecord>, LabelingError> {
        // The view only fixes labels and options, so any instruction works here.
        let probe = self.training_view(q, &self.pool[0])?;
        let (case, answers) = self.answers(h, q, &probe)?;
        let mut out = Vec::with_capacity(answers.len());
        for (j, answer) in answers.into_iter().enumerate() {
            let instruction = self.next_instruction();
            let view = self.training_view(q, &instruction)?;
            let c = confidence(case, j);
            out.push(InstructionRecord {
                prompt: view.prompt_text,
                response: format!("{answer} {}", format_confidence_statement(c)),
                confidence: c,
                loss_masked: case == Case::AllWrong,
                case,
                question_id: q.id.clone(),
            });
        }
        Ok(out)
    }

    /// Rows for `h` under the configured all-wrong and per-draw policies.
    pub fn emit(
        &mut self,
        h: &QuestionHistory,
        q: &Question,
    ) -> Result<Vec<InstructionRecord>, LabelingError> {
        let conf = compute_confidence(h)?;
        self.rows(
            h,
            q,
            |case, _| if case == Case::AllWrong { 0.0 } else { conf },
        )
    }

    /// The single row for `h` (first row under per-draw emission).
    pub fn emit_instruction(
        &mut self,
        h: &QuestionHistory,
        q: &Question,
    ) -> Result<InstructionRecord, LabelingError> {
        Ok(self.emit(h, q)?.swap_remove(0))
    }

    /// Same rows as `emit` with confidences drawn uniformly from
    /// {0, 0.1, ..., 1}.
    pub fn random_confidence(
        &mut self,
        h: &QuestionHistory,
        q: &Question,
    ) -> Result<Vec<InstructionRecord>, LabelingError> {
        let base = seed::derive(self.seed, Stream::Labeling, question_key(&q.id));
        self.rows(h, q, |_, j| {
            let mut rng = seed::rng(base, Stream::Labeling, 1 + j as u64);
            rng.random_range(0..=10u32) as f64 / 10.0
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolCache {
    seed: String,
    instructions: Vec<String>,
}

const REPHRASE_PROMPT: &str =
    "Rephrase the following instruction so that it asks for exactly the same \
thing in different words. Reply with the rephrased instruction only.\n\n";

/// Confidence-expression instructions: the seed prompt plus helper-model
/// rephrasings, `size` in total. A cache at `cache` is reused when its seed
/// matches. Any client failure yields just the seed prompt, uncached.
pub fn rephrase_prompt_pool<B: Backend + ?Sized>(
    client: &B,
    cache: Option<&Path>,
    size: usize,
) -> Vec<String> {
    let seed_prompt = template::CONFIDENCE_INSTRUCTION.to_string();
    if let Some(path) = cache {
        if let Ok(s) = std::fs::read_to_string(path) {
            match serde_json::from_str::<PoolCache>(&s) {
                Ok(c) if c.seed == seed_prompt && !c.instructions.is_empty() => {
                    return c.instructions
                }
                Ok(_) => log::info!(
                    "{}: cached pool is for a different seed prompt",
                    path.display()
                ),
                Err(e) => log::warn!("{}: unreadable prompt pool cache: {e}", path.display()),
            }
        }
    }
    let mut pool = vec![seed_prompt.clone()];
    let attempts = size.saturating_sub(1) * 2;
    for i in 0..attempts {
        if pool.len() >= size {
            break;
        }
        let req = CompletionRequest {
            max_tokens: 128,
            ..CompletionRequest::new(
                format!("instruction-pool:{i}"),
                format!("{REPHRASE_PROMPT}{seed_prompt}"),
                DecodingProfile::RandomTemperature { temperature: 1.0 },
            )
        };
        match client.complete(&req) {
            Ok(r) => {
                let t = r.text.trim().to_string();
                if !t.is_empty() && !pool.contains(&t) {
                    pool.push(t);
                }
            }
            Err(e) => {
                log::warn!("prompt rephrasing failed, using the seed prompt only: {e}");
                return vec![seed_prompt];
            }
        }
    }
    if let Some(path) = cache {
        let c = PoolCache {
            seed: seed_prompt,
            instructions: pool.clone(),
        };
        let body = serde_json::to_string_pretty(&c).expect("pool serializes") + "\n";
        if let Err(e) = std::fs::write(path, body) {
            log::warn!("could not cache prompt pool at {}: {e}", path.display());
        }
    }
    pool
}
