//! Mutated renderings of a question.
//!
//! A [`VariantSpec`] fixes one presentation: label alphabet, option order,
//! injected distractors, prompt template and an optional stem paraphrase.
//! [`Renderer::render`] turns `(question, spec)` into a [`PresentedQuestion`]
//! whose `answer_key` maps every presented label back to a canonical option
//! index (0 for distractors), so judging never depends on the presentation.

mod labels;
pub mod paraphrase;
pub mod template;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_option_text, Question, QuestionKind};
use crate::seed::{self, Stream};

pub use labels::LabelStyle;
pub use template::{Template, TemplateSet};

#[derive(Debug, Error)]
pub enum MutationError {
    #[error("question {0:?} is not multiple choice")]
    NotMcq(String),
    #[error("{count} options exceed the {style:?} label alphabet")]
    TooManyOptions { style: LabelStyle, count: usize },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template files: {0}")]
    TemplateIo(String),
    #[error("permutation {perm:?} is not a bijection over {slots} options")]
    BadPermutation { perm: Vec<usize>, slots: usize },
}

/// Injected never-correct options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distractor {
    NoneOfTheAbove,
    AllOfTheAbove,
}

impl Distractor {
    pub const ALL: [Distractor; 2] = [Distractor::NoneOfTheAbove, Distractor::AllOfTheAbove];

    pub fn text(self) -> &'static str {
        match self {
            Distractor::NoneOfTheAbove => "None of the above",
            Distractor::AllOfTheAbove => "All of the above",
        }
    }
}

/// Presentation order of the real options: `slot -> canonical index` (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(m: usize) -> Self {
        Permutation((1..=m).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self, MutationError> {
        let m = order.len();
        let mut seen = vec![false; m + 1];
        for &c in &order {
            if c == 0 || c > m || seen[c] {
                return Err(MutationError::BadPermutation {
                    perm: order,
                    slots: m,
                });
            }
            seen[c] = true;
        }
        Ok(Permutation(order))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical index shown in 0-based `slot`.
    pub fn canonical_at(&self, slot: usize) -> usize {
        self.0[slot]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `self.inverse()` maps canonical `c` to the 1-based slot it occupies.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (slot, &c) in self.0.iter().enumerate() {
            inv[c - 1] = slot + 1;
        }
        Permutation(inv)
    }

    /// `(self ∘ other)[i] = self[other[i]]`.
    pub fn compose(&self, other: &Permutation) -> Self {
        assert_eq!(self.len(), other.len(), "permutation sizes differ");
        Permutation(other.0.iter().map(|&i| self.0[i - 1]).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &c)| c == i + 1)
    }
}

/// One presentation of a question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub label_style: LabelStyle,
    /// Empty for numeric questions.
    pub permutation: Permutation,
    pub distractors: Vec<Distractor>,
    pub template_id: String,
    #[serde(default)]
    pub paraphrase_id: Option<String>,
    pub seed: u64,
}

impl VariantSpec {
    /// Source order, upper-case letters, no distractors.
    pub fn identity(q: &Question, template_id: &str) -> Self {
        VariantSpec {
            label_style: LabelStyle::Upper,
            permutation: Permutation::identity(q.option_count()),
            distractors: Vec::new(),
            template_id: template_id.to_string(),
            paraphrase_id: None,
            seed: 0,
        }
    }

    /// Short stable digest of the spec.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("variant serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }
}

/// A real or injected option before labelling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionSlot {
    pub text: String,
    /// 0 for distractors.
    pub canonical_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedOption {
    pub label: String,
    pub text: String,
    pub canonical_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedQuestion {
    pub question_id: String,
    pub kind: QuestionKind,
    pub prompt_text: String,
    pub presented_options: Vec<PresentedOption>,
    /// Presented label -> canonical index, 0 for distractors.
    pub answer_key: BTreeMap<String, usize>,
    /// `None` for numeric questions.
    pub gold_label: Option<String>,
    pub label_style: LabelStyle,
}

impl PresentedQuestion {
    pub fn option_by_label(&self, label: &str) -> Option<&PresentedOption> {
        self.presented_options.iter().find(|o| o.label == label)
    }

    pub fn gold_option(&self) -> Option<&PresentedOption> {
        self.gold_label
            .as_deref()
            .and_then(|l| self.option_by_label(l))
    }
}

fn require_mcq(q: &Question) -> Result<(), MutationError> {
    match q.kind {
        QuestionKind::Mcq => Ok(()),
        QuestionKind::Numeric => Err(MutationError::NotMcq(q.id.clone())),
    }
}

/// Uniform random permutation of the options, deterministic in `seed`.
pub fn shuffle_options(q: &Question, seed: u64) -> Result<Permutation, MutationError> {
    require_mcq(q)?;
    let mut order: Vec<usize> = (1..=q.option_count()).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Shuffle, 0));
    Ok(Permutation(order))
}

/// Real options in `perm` order.
pub fn permuted_options(
    q: &Question,
    perm: &Permutation,
) -> Result<Vec<OptionSlot>, MutationError> {
    require_mcq(q)?;
    if perm.len() != q.option_count() {
        return Err(MutationError::BadPermutation {
            perm: perm.0.clone(),
            slots: q.option_count(),
        });
    }
    Ok(perm
        .0
        .iter()
        .map(|&c| OptionSlot {
            text: q.option_text(c).expect("validated permutation").to_string(),
            canonical_index: c,
        })
        .collect())
}

/// Appends distractors after the real options in the listed order. A
/// distractor whose text collides with an existing option is skipped with a
/// warning; the skipped ones are returned.
pub fn add_distractors(
    q: &Question,
    mut options: Vec<OptionSlot>,
    which: &[Distractor],
) -> Result<(Vec<OptionSlot>, Vec<Distractor>), MutationError> {
    require_mcq(q)?;
    let mut skipped = Vec::new();
    let mut added: Vec<Distractor> = Vec::new();
    for &d in which {
        if added.contains(&d) {
            continue;
        }
        let norm = normalize_option_text(d.text());
        if options
            .iter()
            .any(|o| normalize_option_text(&o.text) == norm)
        {
            log::warn!(
                "question {}: distractor {:?} collides with an existing option, skipped",
                q.id,
                d.text()
            );
            skipped.push(d);
            continue;
        }
        options.push(OptionSlot {
            text: d.text().to_string(),
            canonical_index: 0,
        });
        added.push(d);
    }
    Ok((options, skipped))
}

pub fn apply_label_style(
    options: &[OptionSlot],
    style: LabelStyle,
) -> Result<Vec<PresentedOption>, MutationError> {
    let labels = style.labels(options.len())?;
    Ok(options
        .iter()
        .zip(labels)
        .map(|(o, label)| PresentedOption {
            label,
            text: o.text.clone(),
            canonical_index: o.canonical_index,
        })
        .collect())
}

/// Renders prompts from a template set.
#[derive(Debug, Clone, Default)]
pub struct Renderer {
    templates: TemplateSet,
}

impl Renderer {
    pub fn new(templates: TemplateSet) -> Self {
        Renderer { templates }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// `stem` replaces the question stem (a paraphrase); `instruction`
    /// replaces the template's instruction text.
    pub fn render(
        &self,
        q: &Question,
        spec: &VariantSpec,
        stem: Option<&str>,
        instruction: Option<&str>,
    ) -> Result<PresentedQuestion, MutationError> {
        let template = self.templates.get(&spec.template_id)?;
        let instruction = instruction.unwrap_or_else(|| template.instruction(q.kind));
        let stem = stem.unwrap_or(&q.stem);
        let (presented, answer_key, gold_label) = match q.kind {
            QuestionKind::Numeric => (Vec::new(), BTreeMap::new(), None),
            QuestionKind::Mcq => {
                let slots = permuted_options(q, &spec.permutation)?;
                let (slots, _) = add_distractors(q, slots, &spec.distractors)?;
                let presented = apply_label_style(&slots, spec.label_style)?;
                let answer_key: BTreeMap<String, usize> = presented
                    .iter()
                    .map(|o| (o.label.clone(), o.canonical_index))
                    .collect();
                let gold = q.gold_index().expect("mcq has index gold");
                let gold_label = presented
                    .iter()
                    .find(|o| o.canonical_index == gold)
                    .map(|o| o.label.clone());
                (presented, answer_key, gold_label)
            }
        };
        let options = presented
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(PresentedQuestion {
            question_id: q.id.clone(),
            kind: q.kind,
            prompt_text: template.fill(q.kind, instruction, stem, &options),
            presented_options: presented,
            answer_key,
            gold_label,
            label_style: spec.label_style,
        })
    }
}

/// Which mutations a sampled variant may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    pub label_styles: Vec<LabelStyle>,
    pub shuffle: bool,
    pub distractors: Vec<Distractor>,
    pub templates: Vec<String>,
    /// Paraphrases per stem; 0 disables stem rewriting.
    pub paraphrases: usize,
    pub template_dir: Option<std::path::PathBuf>,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            label_styles: LabelStyle::ALL.to_vec(),
            shuffle: true,
            distractors: Distractor::ALL.to_vec(),
            templates: vec![
                template::TASK.to_string(),
                template::COT.to_string(),
                template::FEW_SHOT.to_string(),
            ],
            paraphrases: 0,
            template_dir: None,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.label_styles.is_empty() {
            return Err("mutation.label_styles must not be empty".into());
        }
        if self.templates.is_empty() {
            return Err("mutation.templates must not be empty".into());
        }
        Ok(())
    }

    /// Draws a fresh variant: each enabled mutation is sampled uniformly and
    /// independently.
    pub fn sample(&self, q: &Question, seed: u64) -> VariantSpec {
        let mut rng = seed::rng(seed, Stream::Variant, 0);
        let template_id = self.templates[rng.random_range(0..self.templates.len())].clone();
        let label_style = self.label_styles[rng.random_range(0..self.label_styles.len())];
        let paraphrase_id = if self.paraphrases > 0 {
            let pick = rng.random_range(0..=self.paraphrases);
            (pick > 0).then(|| format!("p{}", pick - 1))
        } else {
            None
        };
        let (permutation, distractors) = match q.kind {
            QuestionKind::Numeric => (Permutation(Vec::new()), Vec::new()),
            QuestionKind::Mcq => {
                let perm = if self.shuffle {
                    shuffle_options(q, seed).expect("mcq")
                } else {
                    Permutation::identity(q.option_count())
                };
                let ds = self
                    .distractors
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(0.5))
                    .collect();
                (perm, ds)
            }
        };
        VariantSpec {
            label_style,
            permutation,
            distractors,
            template_id,
            paraphrase_id,
            seed,
        }
    }
}
