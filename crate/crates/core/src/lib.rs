//! Confidence capture and calibration tooling for LLM question answering.
//!
//! The crate is organised around three stages:
//!
//! - **testing**: every question is asked many times under mutated
//!   presentations and mixed decoding profiles, and each answer is judged
//!   and appended to a record store ([`sampling`], [`mutation`], [`client`],
//!   [`extraction`], [`records`]);
//! - **learning**: the answer histories are turned into confidence-annotated
//!   instruction rows with loss masks ([`labeling`]);
//! - **predicting**: answer + confidence streams are scored for calibration
//!   ([`calibration`]).
//!
//! [`simulator`] provides latent-parameter respondents so the whole pipeline
//! can be verified offline, and [`pipeline`] wires the stages to a single
//! config file.

pub mod calibration;
pub mod client;
pub mod config;
pub mod corpus;
pub mod extraction;
pub mod labeling;
pub mod mutation;
pub mod pipeline;
pub mod records;
pub mod sampling;
pub mod seed;
pub mod simulator;

pub use calibration::{CalibrationReport, EvalPoint};
pub use corpus::{Question, QuestionKind, QuestionSet};
pub use mutation::{LabelStyle, PresentedQuestion, VariantSpec};
pub use records::{AnswerRecord, QuestionHistory};
