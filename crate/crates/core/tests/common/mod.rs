#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lepe::corpus::{Question, QuestionSet};
use lepe::extraction::{extract, judge};
use lepe::labeling::{mcq_answer_statement, InstructionRecord, Labeler, LabelingConfig};
use lepe::mutation::{template, MutationConfig, Renderer, VariantSpec};
use lepe::records::{group_histories, AnswerRecord, QuestionHistory};
use lepe::sampling::{DecodingProfile, FuzzinessMeasure};

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn atlas() -> Question {
    Question::mcq(
        "gps",
        "Google Maps and other highway and street GPS services have replaced what?",
        &["united states", "mexico", "countryside", "atlas"],
        4,
    )
}

pub fn bread() -> Question {
    Question::mcq(
        "bread",
        "What do you need to make bread rise?",
        &["salt", "yeast", "butter", "sugar", "ice"],
        2,
    )
}

pub fn sand() -> Question {
    Question::mcq(
        "sand",
        "Where would you find a lot of sand that is not near water?",
        &["populated areas", "apartment", "the desert", "race track"],
        3,
    )
}

/// A record whose reply picks canonical option `choice` under a sampled
/// variant, extracted and judged the way the pipeline does it.
pub fn answered(q: &Question, draw_index: u64, choice: usize) -> AnswerRecord {
    let variant = MutationConfig::default().sample(q, 1000 + draw_index);
    answered_under(q, draw_index, variant, choice)
}

pub fn answered_under(
    q: &Question,
    draw_index: u64,
    variant: VariantSpec,
    choice: usize,
) -> AnswerRecord {
    let pq = Renderer::default().render(q, &variant, None, None).unwrap();
    let opt = pq
        .presented_options
        .iter()
        .find(|o| o.canonical_index == choice)
        .unwrap();
    let raw_text = mcq_answer_statement(&opt.label, &opt.text);
    let extracted = extract(&raw_text, &pq);
    let p = judge(&extracted, q, &pq).unwrap();
    AnswerRecord {
        question_id: q.id.clone(),
        draw_index,
        raw_text,
        extracted,
        p,
        variant_digest: variant.digest(),
        variant,
        profile: DecodingProfile::RandomTemperature { temperature: 1.0 },
        backend: lepe::client::BackendKind::Simulator,
        timestamp: None,
        failed: false,
        first_token_probability: None,
    }
}

pub fn history(q: &Question, recs: &[AnswerRecord]) -> QuestionHistory {
    let qs = QuestionSet::new(vec![q.clone()]).unwrap();
    group_histories(recs, &qs, FuzzinessMeasure::Mad).remove(0)
}

/// The three golden fixtures: (file name, question, history).
pub fn golden_fixtures() -> Vec<(&'static str, Question, QuestionHistory)> {
    let bread = bread();
    let all_correct: Vec<_> = (0..5).map(|i| answered(&bread, i, 2)).collect();
    let atlas = atlas();
    let partial: Vec<_> = (0..13)
        .map(|i| answered(&atlas, i, if i < 8 { 4 } else { 1 + i as usize % 3 }))
        .collect();
    let sand = sand();
    let all_wrong: Vec<_> = (0..4).map(|i| answered(&sand, i, 1)).collect();
    vec![
        (
            "all_correct.jsonl",
            bread.clone(),
            history(&bread, &all_correct),
        ),
        (
            "partial_8_of_13.jsonl",
            atlas.clone(),
            history(&atlas, &partial),
        ),
        ("all_wrong.jsonl", sand.clone(), history(&sand, &all_wrong)),
    ]
}

pub fn seed_labeler() -> Labeler {
    Labeler::new(
        Renderer::default(),
        LabelingConfig::default(),
        vec![template::CONFIDENCE_INSTRUCTION.to_string()],
        0,
    )
    .unwrap()
}

pub fn to_jsonl(rows: &[InstructionRecord]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

/// Writes a question set and returns its path.
pub fn write_corpus(dir: &Path, qs: &QuestionSet) -> PathBuf {
    let p = dir.join("questions.jsonl");
    lepe::corpus::write_questions(qs, &p).unwrap();
    p
}

/// `n` questions: four-option MCQ with rotating gold, every fifth numeric.
pub fn mixed_set(n: usize) -> QuestionSet {
    QuestionSet::new(
        (0..n)
            .map(|i| {
                if i % 5 == 4 {
                    Question::numeric(
                        &format!("n{i}"),
                        &format!("What is {i} times 3?"),
                        &(i * 3).to_string(),
                    )
                } else {
                    Question::mcq(
                        &format!("q{i}"),
                        &format!("Which colour is item {i}?"),
                        &["red", "green", "blue", "gold"],
                        1 + i % 4,
                    )
                }
            })
            .collect(),
    )
    .unwrap()
}
