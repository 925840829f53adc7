use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::QuestionKind;

use super::MutationError;

pub const TASK: &str = "task";
pub const COT: &str = "cot";
pub const FEW_SHOT: &str = "few_shot";
pub const CONFIDENCE: &str = "confidence";

const DEFAULT_BODY: &str = "{instruction}\n{stem}\n{options}";

const FEW_SHOT_MCQ: &str = "{instruction}\n\
Question: Which of these is a primary colour?\n\
A. green\nB. red\nC. purple\n\
The correct answer is B. red\n\n\
Question: {stem}\n{options}";

const FEW_SHOT_NUMERIC: &str = "{instruction}\n\
Question: A box holds 3 rows of 4 apples. How many apples are in the box?\n\
3 rows of 4 apples is 3 * 4 = 12 apples. The answer is 12\n\n\
Question: {stem}\n{options}";

/// The instruction used for confidence-expression prompts.
pub const CONFIDENCE_INSTRUCTION: &str =
    "For the following question, please provide your answer and your confidence about this answer.";

/// A prompt template: per-kind instruction text plus per-kind body with
/// `{instruction}`, `{stem}` and `{options}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub instruction_mcq: String,
    pub instruction_numeric: String,
    pub body_mcq: String,
    pub body_numeric: String,
}

impl Template {
    pub fn instruction(&self, kind: QuestionKind) -> &str {
        match kind {
            QuestionKind::Mcq => &self.instruction_mcq,
            QuestionKind::Numeric => &self.instruction_numeric,
        }
    }

    pub fn body(&self, kind: QuestionKind) -> &str {
        match kind {
            QuestionKind::Mcq => &self.body_mcq,
            QuestionKind::Numeric => &self.body_numeric,
        }
    }

    pub fn fill(&self, kind: QuestionKind, instruction: &str, stem: &str, options: &str) -> String {
        let mut body = self.body(kind).to_string();
        if options.is_empty() {
            body = body.replace("\n{options}", "");
        }
        body.replace("{instruction}", instruction)
            .replace("{stem}", stem)
            .replace("{options}", options)
    }
}

fn simple(mcq: &str, numeric: &str) -> Template {
    Template {
        instruction_mcq: mcq.to_string(),
        instruction_numeric: numeric.to_string(),
        body_mcq: DEFAULT_BODY.to_string(),
        body_numeric: DEFAULT_BODY.to_string(),
    }
}

/// Templates keyed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let task_mcq = "Examine the following options carefully and select the correct one.";
        let mut templates = BTreeMap::new();
        templates.insert(
            TASK.to_string(),
            simple(
                task_mcq,
                "Solve the following problem and state the final answer.",
            ),
        );
        templates.insert(
            COT.to_string(),
            simple(
                &format!(
                    "{task_mcq} Please select the correct option from the provided choices \
                     and offer a comprehensive problem-solving process."
                ),
                "For the given math problem, please give a comprehensive problem-solving \
                 process and then state the final answer.",
            ),
        );
        templates.insert(
            FEW_SHOT.to_string(),
            Template {
                instruction_mcq: "Answer the question in the same way as the example.".into(),
                instruction_numeric: "Answer the question in the same way as the example.".into(),
                body_mcq: FEW_SHOT_MCQ.to_string(),
                body_numeric: FEW_SHOT_NUMERIC.to_string(),
            },
        );
        templates.insert(
            CONFIDENCE.to_string(),
            simple(CONFIDENCE_INSTRUCTION, CONFIDENCE_INSTRUCTION),
        );
        TemplateSet { templates }
    }

    /// Builtins overridden by files in `dir`: `<id>.txt` replaces both bodies,
    /// `<id>.numeric.txt` the numeric body, and `<id>.instruction.txt` both
    /// instructions. Unknown ids become new templates.
    pub fn with_overrides(dir: &Path) -> Result<Self, MutationError> {
        let mut set = Self::builtin();
        let io = |e: std::io::Error| MutationError::TemplateIo(format!("{}: {e}", dir.display()));
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_stem().unwrap().to_string_lossy().to_string();
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let text = text.trim_end_matches('\n').to_string();
            let (id, part) = match name.split_once('.') {
                Some((id, part)) => (id.to_string(), Some(part.to_string())),
                None => (name, None),
            };
            let entry = set.templates.entry(id).or_insert_with(|| simple("", ""));
            match part.as_deref() {
                None => {
                    entry.body_mcq = text.clone();
                    entry.body_numeric = text;
                }
                Some("numeric") => entry.body_numeric = text,
                Some("instruction") => {
                    entry.instruction_mcq = text.clone();
                    entry.instruction_numeric = text;
                }
                Some(other) => {
                    return Err(MutationError::TemplateIo(format!(
                        "unknown template part {other:?} in {}",
                        path.display()
                    )))
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&Template, MutationError> {
        self.templates
            .get(id)
            .ok_or_else(|| MutationError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
