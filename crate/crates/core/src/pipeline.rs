//! The `test`, `build`, `simulate` and `eval` stages over one config.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationError, CalibrationReport, EvalPoint, PointSource};
use crate::client::{
    self, Backend, BackendKind, ClientError, CompletionRequest, DrawContext, DrawOutcome,
    HttpBackend,
};
use crate::config::{BackendConfig, ConfigError, PipelineConfig};
use crate::corpus::{self, CorpusError, Question, QuestionSet};
use crate::extraction::{self, ExtractedAnswer, ExtractionError, ExtractionRules};
use crate::labeling::{self, Case, InstructionRecord, Labeler, LabelingError};
use crate::mutation::paraphrase::{paraphrase_stem, ParaphraseCache, ParaphraseSource};
use crate::mutation::{
    template, MutationError, PresentedQuestion, Renderer, TemplateSet, VariantSpec,
};
use crate::records::{self, group_histories, AnswerRecord, RecordError, RecordIndex, RecordStore};
use crate::sampling::{Draw, Planner, ProfileRotation, SamplingError};
use crate::seed::{self, Stream};
use crate::simulator::{self, LatentModel, SimulatorBackend, SimulatorError};

pub const RECORDS: &str = "records.jsonl";
pub const RECORDS_INDEX: &str = "records.index.json";
pub const MANIFEST: &str = "manifest.json";
pub const PARAPHRASES: &str = "paraphrases.jsonl";
pub const INSTRUCTION_POOL: &str = "instruction_pool.json";
pub const INSTRUCTIONS: &str = "instruction.jsonl";
pub const INSTRUCTIONS_RANDOM: &str = "instruction_random.jsonl";
pub const BUILD_MANIFEST: &str = "build_manifest.json";
pub const EVAL_PROMPTS: &str = "eval_prompts.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const THETA: &str = "theta.json";
pub const FIRST_PROB_DIR: &str = "first_prob";

/// Draws dispatched per batch; bounds memory on large runs.
const BATCH: usize = 4096;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("backend aborted the run: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error("backend setup: {0}")]
    Backend(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no answer records at {0}; run `test` first")]
    NoRecords(PathBuf),
    #[error("{path}:{line}: {message}")]
    BadResponse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no parseable confidence statements in {path} ({unparsed} responses unparsed)")]
    NoConfidences { path: PathBuf, unparsed: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let body = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    std::fs::write(path, body).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r).expect("serializable")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Everything a stage needs that is derived from the config alone.
pub struct Context {
    pub config: PipelineConfig,
    pub full: QuestionSet,
    /// Testing and training questions.
    pub train: QuestionSet,
    /// Evaluation questions.
    pub eval: QuestionSet,
    pub renderer: Renderer,
    pub rules: ExtractionRules,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let full = corpus::load_questions(&config.corpus.path)?;
        let (train, eval) = match config.corpus.split_fraction {
            Some(f) => {
                corpus::split_set(&full, f, config.corpus.split_seed.unwrap_or(config.seed))?
            }
            None => (full.clone(), full.clone()),
        };
        let templates = match &config.mutation.template_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        };
        for id in &config.mutation.templates {
            templates.get(id)?;
        }
        let rules = match &config.answer_phrases {
            Some(p) => ExtractionRules::from_file(p)?,
            None => ExtractionRules::default(),
        };
        Ok(Context {
            config,
            full,
            train,
            eval,
            renderer: Renderer::new(templates),
            rules,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn ensure_out(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.config.output_dir).map_err(io_err(&self.config.output_dir))
    }

    /// Latent model over the full corpus, so θ does not depend on the split.
    pub fn latent(&self, bc: &BackendConfig) -> Result<LatentModel, PipelineError> {
        let s = &bc.simulator;
        let mut l = simulator::make_latent(
            &self.full,
            &s.latent,
            s.latent_seed.unwrap_or(self.config.seed),
        )?;
        l.mode = s.mode;
        l.wrong_answer_policy = s.wrong_answers;
        Ok(l)
    }

    pub fn backend(&self, bc: &BackendConfig) -> Result<Box<dyn Backend>, PipelineError> {
        Ok(match bc.kind {
            BackendKind::Simulator => Box::new(
                SimulatorBackend::new(self.latent(bc)?, &self.full)
                    .with_failure_rate(bc.simulator.failure_rate),
            ),
            BackendKind::Http => {
                let http = bc
                    .http
                    .clone()
                    .ok_or_else(|| PipelineError::Backend("missing http settings".into()))?;
                Box::new(HttpBackend::new(http).map_err(|e| PipelineError::Backend(e.to_string()))?)
            }
        })
    }

    fn eval_view(&self, q: &Question) -> Result<PresentedQuestion, PipelineError> {
        Ok(labeling::confidence_view(
            &self.renderer,
            q,
            &self.config.labeling.prompt_distractors,
            template::CONFIDENCE_INSTRUCTION,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub backend: String,
    pub helper: String,
    pub corpus_hash: String,
    pub questions: usize,
    pub phase1_draws: usize,
    pub phase2_draws: usize,
    pub requeried: Vec<String>,
    pub records: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TestSummary {
    pub phase1: usize,
    pub phase2: usize,
    /// Draws already present from an earlier run.
    pub resumed: usize,
    pub executed: usize,
    pub failed: usize,
    pub requeried: Vec<String>,
}

struct Runner<'a> {
    ctx: &'a Context,
    backend: &'a dyn Backend,
    rules: ExtractionRules,
    stems: HashMap<(String, String), (String, bool)>,
    questions: HashMap<&'a str, &'a Question>,
}

impl<'a> Runner<'a> {
    fn resolve_paraphrases(
        &mut self,
        draws: &[Draw],
        helper: &dyn Backend,
        cache: &ParaphraseCache,
    ) {
        for d in draws {
            let Some(pid) = &d.variant.paraphrase_id else {
                continue;
            };
            let key = (d.question_id.clone(), pid.clone());
            if self.stems.contains_key(&key) {
                continue;
            }
            let q = self.questions[d.question_id.as_str()];
            let p = paraphrase_stem(q, pid, helper, cache);
            self.stems
                .insert(key, (p.text, p.source != ParaphraseSource::Fallback));
        }
    }

    fn request(&self, d: &Draw) -> Result<(CompletionRequest, PresentedQuestion), PipelineError> {
        let q = self.questions[d.question_id.as_str()];
        let stem = d
            .variant
            .paraphrase_id
            .as_ref()
            .and_then(|pid| self.stems.get(&(d.question_id.clone(), pid.clone())));
        let presented =
            self.ctx
                .renderer
                .render(q, &d.variant, stem.map(|s| s.0.as_str()), None)?;
        let mut req = CompletionRequest::new(
            format!("d{}", d.draw_index),
            presented.prompt_text.clone(),
            d.profile,
        );
        req.max_tokens = self.ctx.config.testing.max_tokens;
        req.draw = Some(DrawContext {
            question_id: q.id.clone(),
            presented: presented.clone(),
            paraphrased: stem.is_some_and(|s| s.1),
            seed: seed::derive(self.ctx.config.seed, Stream::Simulator, d.draw_index),
        });
        Ok((req, presented))
    }

    fn record(
        &self,
        d: &Draw,
        presented: &PresentedQuestion,
        outcome: DrawOutcome,
    ) -> Result<AnswerRecord, PipelineError> {
        let q = self.questions[d.question_id.as_str()];
        let (raw_text, extracted, p, failed, prob) = match outcome {
            DrawOutcome::Completed { response, .. } => {
                let e = self.rules.extract(&response.text, presented);
                let p = extraction::judge(&e, q, presented)?;
                (response.text, e, p, false, response.first_token_probability)
            }
            DrawOutcome::Failed { .. } => {
                (String::new(), ExtractedAnswer::failure(), 0, true, None)
            }
        };
        let timestamp = match self.backend.kind() {
            BackendKind::Simulator => None,
            BackendKind::Http => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|t| t.as_secs()),
        };
        Ok(AnswerRecord {
            question_id: q.id.clone(),
            draw_index: d.draw_index,
            raw_text,
            extracted,
            p,
            variant_digest: d.variant.digest(),
            variant: d.variant.clone(),
            profile: d.profile,
            backend: self.backend.kind(),
            timestamp,
            failed,
            first_token_probability: prob,
        })
    }

    /// Runs the not-yet-recorded draws, appending records in draw order.
    fn run(
        &self,
        draws: &[Draw],
        store: &mut RecordStore,
    ) -> Result<(usize, usize), PipelineError> {
        let pending: Vec<&Draw> = draws
            .iter()
            .filter(|d| !store.contains(&d.question_id, d.draw_index))
            .collect();
        let t = &self.ctx.config.testing;
        let mut failed = 0;
        for chunk in pending.chunks(BATCH) {
            let mut reqs = Vec::with_capacity(chunk.len());
            let mut views = Vec::with_capacity(chunk.len());
            for d in chunk {
                let (r, v) = self.request(d)?;
                reqs.push(r);
                views.push(v);
            }
            let mut buffer: BTreeMap<usize, AnswerRecord> = BTreeMap::new();
            let mut next = 0;
            let mut sink_err: Option<PipelineError> = None;
            let dispatched = client::dispatch(
                self.backend,
                &reqs,
                t.concurrency,
                &t.retry,
                |i, outcome| {
                    if sink_err.is_some() {
                        return;
                    }
                    if matches!(outcome, DrawOutcome::Failed { .. }) {
                        failed += 1;
                    }
                    match self.record(chunk[i], &views[i], outcome) {
                        Ok(r) => {
                            buffer.insert(i, r);
                        }
                        Err(e) => sink_err = Some(e),
                    }
                    while let Some(r) = buffer.remove(&next) {
                        if let Err(e) = store.append(&r) {
                            sink_err = Some(e.into());
                            break;
                        }
                        next += 1;
                    }
                },
            );
            store.flush()?;
            if let Some(e) = sink_err {
                return Err(e);
            }
            dispatched?;
        }
        Ok((pending.len(), failed))
    }
}

/// Testing stage against explicit backends.
pub fn run_test(
    ctx: &Context,
    backend: &dyn Backend,
    helper: &dyn Backend,
) -> Result<TestSummary, PipelineError> {
    let cfg = &ctx.config;
    let qs = &ctx.train;
    ctx.ensure_out()?;
    let profiles = ProfileRotation::new(cfg.decoding.profiles.clone())?;
    let planner = Planner {
        questions: qs,
        mutation: &cfg.mutation,
        profiles: &profiles,
        seed: cfg.seed,
    };
    let manifest_path = ctx.out(MANIFEST);
    if let Ok(s) = std::fs::read_to_string(&manifest_path) {
        if let Ok(m) = serde_json::from_str::<Manifest>(&s) {
            if m.config_hash != cfg.hash() {
                log::warn!(
                    "{} was written under a different config; resuming anyway",
                    manifest_path.display()
                );
            }
        }
    }
    let (mut store, loaded) = RecordStore::open(ctx.out(RECORDS))?;
    if loaded.truncated_tail > 0 {
        log::warn!(
            "dropped a torn final record ({} bytes)",
            loaded.truncated_tail
        );
    }
    let mut runner = Runner {
        ctx,
        backend,
        rules: ctx.rules.clone(),
        stems: HashMap::new(),
        questions: qs.iter().map(|q| (q.id.as_str(), q)).collect(),
    };
    let cache =
        ParaphraseCache::open(ctx.out(PARAPHRASES)).map_err(io_err(&ctx.out(PARAPHRASES)))?;

    let phase1 = planner.plan_draws(cfg.testing.k)?;
    runner.resolve_paraphrases(&phase1.draws, helper, &cache);
    let (ran1, failed1) = runner.run(&phase1.draws, &mut store)?;

    let recs = records::load_records(store.path())?.records;
    let phase1_end = (cfg.testing.k * qs.n()) as u64;
    let early: Vec<AnswerRecord> = recs
        .into_iter()
        .filter(|r| r.draw_index < phase1_end)
        .collect();
    let phase1_hist = group_histories(&early, qs, cfg.testing.fuzziness);
    let phase2 = planner.select_requery(&phase1_hist, cfg.testing.tau, cfg.testing.m(), phase1_end);
    let requeried: Vec<String> =
        phase2
            .draws
            .iter()
            .map(|d| d.question_id.clone())
            .fold(Vec::new(), |mut v, id| {
                if v.last() != Some(&id) {
                    v.push(id);
                }
                v
            });
    runner.resolve_paraphrases(&phase2.draws, helper, &cache);
    let (ran2, failed2) = runner.run(&phase2.draws, &mut store)?;
    store.flush()?;

    let report = records::load_records(store.path())?;
    RecordIndex::build(&report).write(&ctx.out(RECORDS_INDEX))?;
    let histories = group_histories(&report.records, qs, cfg.testing.fuzziness);
    for h in &histories {
        if h.failure_ratio() > cfg.testing.failure_warn_ratio {
            log::warn!(
                "question {}: {:.0}% of draws failed",
                h.question_id,
                100.0 * h.failure_ratio()
            );
        }
    }
    let failed = report.records.iter().filter(|r| r.failed).count();
    write_json(
        &manifest_path,
        &Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            backend: backend.identity(),
            helper: helper.identity(),
            corpus_hash: corpus::content_hash(qs),
            questions: qs.n(),
            phase1_draws: phase1.total(),
            phase2_draws: phase2.total(),
            requeried: requeried.clone(),
            records: report.records.len(),
            failed,
        },
    )?;
    let executed = ran1 + ran2;
    Ok(TestSummary {
        phase1: phase1.total(),
        phase2: phase2.total(),
        resumed: phase1.total() + phase2.total() - executed,
        executed,
        failed: failed1 + failed2,
        requeried,
    })
}

/// Testing stage with backends built from the config.
pub fn cmd_test(ctx: &Context) -> Result<TestSummary, PipelineError> {
    let backend = ctx.backend(&ctx.config.backend)?;
    let helper = ctx.backend(ctx.config.helper_backend())?;
    run_test(ctx, backend.as_ref(), helper.as_ref())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Lepe,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub baseline: Baseline,
    pub rows: usize,
    pub all_correct: usize,
    pub partial: usize,
    pub all_wrong: usize,
    /// Questions with no completed draw.
    pub dropped: Vec<String>,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Serialize)]
struct EvalPrompt<'a> {
    question_id: &'a str,
    prompt: &'a str,
}

pub fn run_build(
    ctx: &Context,
    helper: &dyn Backend,
    baseline: Baseline,
) -> Result<BuildManifest, PipelineError> {
    let cfg = &ctx.config;
    let path = ctx.out(RECORDS);
    if !path.exists() {
        return Err(PipelineError::NoRecords(path));
    }
    let recs = records::load_records(&path)?.records;
    if recs.is_empty() {
        return Err(PipelineError::NoRecords(path));
    }
    let pool = labeling::rephrase_prompt_pool(
        helper,
        Some(&ctx.out(INSTRUCTION_POOL)),
        cfg.labeling.pool_size,
    );
    let mut labeler = Labeler::new(
        ctx.renderer.clone(),
        cfg.labeling.clone(),
        pool.clone(),
        cfg.seed,
    )?;
    let histories = group_histories(&recs, &ctx.train, cfg.testing.fuzziness);
    let mut rows: Vec<InstructionRecord> = Vec::new();
    let mut dropped = Vec::new();
    for h in &histories {
        let Some(q) = ctx.train.get(&h.question_id) else {
            log::warn!(
                "records mention unknown question {}; skipped",
                h.question_id
            );
            continue;
        };
        if h.k_effective == 0 {
            log::warn!("question {} has no completed draws; dropped", h.question_id);
            dropped.push(h.question_id.clone());
            continue;
        }
        rows.extend(match baseline {
            Baseline::Lepe => labeler.emit(h, q)?,
            Baseline::Random => labeler.random_confidence(h, q)?,
        });
    }
    let out = ctx.out(match baseline {
        Baseline::Lepe => INSTRUCTIONS,
        Baseline::Random => INSTRUCTIONS_RANDOM,
    });
    write_jsonl(&out, &rows)?;

    let views = ctx
        .eval
        .iter()
        .map(|q| ctx.eval_view(q))
        .collect::<Result<Vec<_>, _>>()?;
    let prompts: Vec<EvalPrompt> = views
        .iter()
        .map(|v| EvalPrompt {
            question_id: &v.question_id,
            prompt: &v.prompt_text,
        })
        .collect();
    write_jsonl(&ctx.out(EVAL_PROMPTS), &prompts)?;

    let count = |c: Case| rows.iter().filter(|r| r.case == c).count();
    let m = BuildManifest {
        baseline,
        rows: rows.len(),
        all_correct: count(Case::AllCorrect),
        partial: count(Case::Partial),
        all_wrong: count(Case::AllWrong),
        dropped,
        pool_size: pool.len(),
    };
    write_json(&ctx.out(BUILD_MANIFEST), &m)?;
    Ok(m)
}

pub fn cmd_build(ctx: &Context, baseline: Baseline) -> Result<BuildManifest, PipelineError> {
    let helper = ctx.backend(ctx.config.helper_backend())?;
    run_build(ctx, helper.as_ref(), baseline)
}

/// One predicting-stage response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLine {
    pub question_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_probability: Option<f64>,
    /// Presentation the response answers; absent means the confidence prompt
    /// from eval_prompts.jsonl.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantSpec>,
}

/// Writes responses.jsonl and theta.json for the evaluation questions.
pub fn cmd_simulate(ctx: &Context) -> Result<usize, PipelineError> {
    let cfg = &ctx.config;
    ctx.ensure_out()?;
    let latent = ctx.latent(&cfg.backend)?.with_mode(cfg.simulate.mode);
    let views = ctx
        .eval
        .iter()
        .map(|q| ctx.eval_view(q))
        .collect::<Result<Vec<_>, _>>()?;
    let base = seed::derive(cfg.seed, Stream::Simulator, u64::MAX);
    let mut lines = Vec::with_capacity(views.len() * cfg.simulate.repeats);
    for rep in 0..cfg.simulate.repeats {
        for (i, (q, view)) in ctx.eval.iter().zip(&views).enumerate() {
            let idx = (rep * views.len() + i) as u64;
            let a = simulator::simulate_answer(
                q,
                view,
                &latent,
                false,
                seed::derive(base, Stream::Simulator, idx),
            )?;
            lines.push(ResponseLine {
                question_id: q.id.clone(),
                text: a.text,
                first_token_probability: a.first_token_probability,
                variant: None,
            });
        }
    }
    write_jsonl(&ctx.out(RESPONSES), &lines)?;
    latent.write_json(&ctx.out(THETA))?;
    Ok(lines.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: CalibrationReport,
    pub first_prob: Option<CalibrationReport>,
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseLine>, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ResponseLine =
            serde_json::from_str(&line).map_err(|e| PipelineError::BadResponse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(r);
    }
    Ok(out)
}

/// Scores `responses` (default: the simulate output) and writes report.json
/// and bins.csv, plus a first-token-probability report when available.
pub fn cmd_eval(ctx: &Context, responses: Option<&Path>) -> Result<EvalOutcome, PipelineError> {
    let cfg = &ctx.config;
    ctx.ensure_out()?;
    let path = responses
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out(RESPONSES));
    let lines = read_responses(&path)?;
    let rules = &ctx.rules;
    let mut views: HashMap<String, PresentedQuestion> = HashMap::new();
    let (mut points, mut fp_points) = (Vec::new(), Vec::new());
    let mut unparsed = 0;
    for (i, l) in lines.iter().enumerate() {
        let q = ctx
            .full
            .get(&l.question_id)
            .ok_or_else(|| PipelineError::BadResponse {
                path: path.clone(),
                line: i + 1,
                message: format!("unknown question {}", l.question_id),
            })?;
        let view = match &l.variant {
            Some(v) => ctx.renderer.render(q, v, None, None)?,
            None => match views.get(&q.id) {
                Some(v) => v.clone(),
                None => {
                    let v = ctx.eval_view(q)?;
                    views.insert(q.id.clone(), v.clone());
                    v
                }
            },
        };
        let correct = extraction::judge(&rules.extract(&l.text, &view), q, &view)? == 1;
        match calibration::parse_confidence(&l.text) {
            Some(c) => points.push(EvalPoint::new(&q.id, c, correct, PointSource::Verbalized)?),
            None => unparsed += 1,
        }
        if let Some(p) = l.first_token_probability.filter(|p| *p > 0.0 && *p <= 1.0) {
            fp_points.push(EvalPoint::new(
                &q.id,
                p,
                correct,
                PointSource::FirstTokenProb,
            )?);
        }
    }
    if points.is_empty() {
        return Err(PipelineError::NoConfidences { path, unparsed });
    }
    if unparsed > 0 {
        log::warn!(
            "{unparsed} of {} responses had no confidence statement",
            lines.len()
        );
    }
    let report = calibration::report(&points, &cfg.calibration, unparsed)?;
    calibration::write_report(&report, &cfg.output_dir)?;
    let first_prob = if fp_points.is_empty() {
        None
    } else {
        let r = calibration::report(&fp_points, &cfg.calibration, lines.len() - fp_points.len())?;
        calibration::write_report(&r, &ctx.out(FIRST_PROB_DIR))?;
        Some(r)
    };
    Ok(EvalOutcome { report, first_prob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::mock::Scripted;
    use crate::client::BackendError;
    use crate::labeling::InstructionRecord;

    fn corpus(dir: &Path, n: usize) -> PathBuf {
        let qs = QuestionSet::new(
            (0..n)
                .map(|i| {
                    if i % 5 == 4 {
                        Question::numeric(
                            &format!("n{i}"),
                            "How many legs do 3 spiders have?",
                            "24",
                        )
                    } else {
                        Question::mcq(
                            &format!("q{i}"),
                            &format!("Stem {i}?"),
                            &["red", "green", "blue", "gold"],
                            1 + i % 4,
                        )
                    }
                })
                .collect(),
        )
        .unwrap();
        let p = dir.join("questions.jsonl");
        corpus::write_questions(&qs, &p).unwrap();
        p
    }

    fn ctx(dir: &Path, n: usize, k: usize) -> Context {
        let mut c = PipelineConfig::minimal(corpus(dir, n), dir.join("out"));
        c.seed = 5;
        c.testing.k = k;
        c.testing.retry = client::RetryPolicy::immediate(2);
        Context::new(c).unwrap()
    }

    #[test]
    fn counts_follow_the_two_phase_rule() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), 50, 10);
        let s = cmd_test(&c).unwrap();
        assert_eq!(s.phase1, 500);
        let recs = records::load_records(c.out(RECORDS)).unwrap().records;
        assert_eq!(recs.len(), 500 + s.phase2);
        let early: Vec<_> = recs
            .iter()
            .filter(|r| r.draw_index < 500)
            .cloned()
            .collect();
        let fuzzy = group_histories(&early, &c.train, c.config.testing.fuzziness)
            .iter()
            .filter(|h| h.fuzziness.is_some_and(|f| f > c.config.testing.tau))
            .count();
        assert_eq!(s.phase2, 10 * fuzzy);
        assert!(recs.windows(2).all(|w| w[0].draw_index < w[1].draw_index));
        assert!(recs.iter().all(|r| r.timestamp.is_none()));
    }

    #[test]
    fn resume_runs_only_missing_draws() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), 10, 4);
        cmd_test(&c).unwrap();
        let full = std::fs::read(c.out(RECORDS)).unwrap();
        // keep 17 records and half of the 18th
        let cut: usize = full
            .split_inclusive(|&b| b == b'\n')
            .take(17)
            .map(|l| l.len())
            .sum();
        std::fs::write(c.out(RECORDS), &full[..cut + 40]).unwrap();
        let s = cmd_test(&c).unwrap();
        assert_eq!(s.resumed, 17);
        assert_eq!(s.executed, s.phase1 + s.phase2 - 17);
        assert_eq!(std::fs::read(c.out(RECORDS)).unwrap(), full);
        let again = cmd_test(&c).unwrap();
        assert_eq!(again.executed, 0);
    }

    #[test]
    fn empty_corpus_fails_before_any_call() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        let c = PipelineConfig::minimal(&p, dir.path().join("out"));
        assert!(matches!(Context::new(c), Err(PipelineError::Corpus(_))));
    }

    #[test]
    fn fatal_backend_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), 5, 2);
        let dead = Scripted::new(vec![Err(BackendError::Fatal("401".into()))]);
        let err = run_test(&c, &dead, &dead).unwrap_err();
        assert!(matches!(err, PipelineError::Client(_)));
    }

    #[test]
    fn failed_draws_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ctx(dir.path(), 10, 10);
        c.config.backend.simulator.failure_rate = 0.5;
        let c = Context::new(c.config).unwrap();
        let s = cmd_test(&c).unwrap();
        assert!(s.failed > 0);
        let recs = records::load_records(c.out(RECORDS)).unwrap().records;
        assert_eq!(recs.iter().filter(|r| r.failed).count(), s.failed);
    }

    #[test]
    fn build_and_eval() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), 20, 6);
        cmd_test(&c).unwrap();
        let m = cmd_build(&c, Baseline::Lepe).unwrap();
        assert_eq!(m.rows, 20);
        assert_eq!(m.all_correct + m.partial + m.all_wrong, 20);
        let rows: Vec<InstructionRecord> = std::fs::read_to_string(c.out(INSTRUCTIONS))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(rows
            .iter()
            .all(|r| r.loss_masked == (r.case == Case::AllWrong)));
        let r = cmd_build(&c, Baseline::Random).unwrap();
        assert_eq!(r.rows, 20);

        assert_eq!(cmd_simulate(&c).unwrap(), 20);
        let out = cmd_eval(&c, None).unwrap();
        assert_eq!(out.report.s, 20);
        assert!(c.out("report.json").exists() && c.out("bins.csv").exists());
        assert!(out.first_prob.is_some());
    }

    #[test]
    fn eval_without_confidences_fails_with_tally() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), 5, 1);
        let p = dir.path().join("r.jsonl");
        std::fs::write(&p, "{\"question_id\":\"q0\",\"text\":\"The answer is A.\"}\n{\"question_id\":\"q1\",\"text\":\"B\"}\n").unwrap();
        match cmd_eval(&c, Some(&p)) {
            Err(PipelineError::NoConfidences { unparsed, .. }) => assert_eq!(unparsed, 2),
            other => panic!("{other:?}"),
        }
    }
}
