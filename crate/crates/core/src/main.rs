use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lepe::client::BackendKind;
use lepe::config::PipelineConfig;
use lepe::pipeline::{self, Baseline, Context};

#[derive(Parser, Debug)]
#[command(
    name = "lepe",
    version,
    about = "Confidence-expression data pipeline: test, build, simulate, eval"
)]
struct Cli {
    /// Pipeline config file.
    #[arg(long, short, global = true, default_value = "lepe.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the answering backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Simulator,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineArg {
    Lepe,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample answers for the testing questions and record them.
    Test {
        /// Override testing.concurrency.
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Turn answer records into instruction.jsonl.
    Build {
        #[arg(long, value_enum, default_value = "lepe")]
        baseline: BaselineArg,
    },
    /// Write simulated responses for the evaluation questions.
    Simulate,
    /// Score responses and write report.json and bins.csv.
    Eval {
        /// Responses file; defaults to responses.jsonl in the output directory.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        /// Comma-separated thresholds, e.g. 0.5,0.6,0.7.
        #[arg(long, value_delimiter = ',')]
        threshold_grid: Option<Vec<f64>>,
        #[arg(long)]
        min_dp: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend.kind = match b {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Simulator => BackendKind::Simulator,
        };
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    match &cli.command {
        Command::Test {
            concurrency: Some(c),
        } => cfg.testing.concurrency = *c,
        Command::Eval {
            bins,
            threshold_grid,
            min_dp,
            ..
        } => {
            if let Some(b) = bins {
                cfg.calibration.bins = *b;
            }
            if let Some(g) = threshold_grid {
                cfg.calibration.threshold_grid = g.clone();
            }
            if let Some(m) = min_dp {
                cfg.calibration.min_dp = *m;
            }
        }
        _ => {}
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::Test { .. } => {
            let s = pipeline::cmd_test(&ctx)?;
            println!(
                "test: {} phase-1 + {} requery draws ({} run, {} resumed, {} failed); {} questions requeried",
                s.phase1,
                s.phase2,
                s.executed,
                s.resumed,
                s.failed,
                s.requeried.len()
            );
        }
        Command::Build { baseline } => {
            let b = match baseline {
                BaselineArg::Lepe => Baseline::Lepe,
                BaselineArg::Random => Baseline::Random,
            };
            let m = pipeline::cmd_build(&ctx, b)?;
            println!(
                "build: {} rows ({} all-correct, {} partial, {} all-wrong), {} dropped, pool of {}",
                m.rows,
                m.all_correct,
                m.partial,
                m.all_wrong,
                m.dropped.len(),
                m.pool_size
            );
        }
        Command::Simulate => {
            let n = pipeline::cmd_simulate(&ctx)?;
            println!("simulate: {n} responses");
        }
        Command::Eval { responses, .. } => {
            let out = pipeline::cmd_eval(&ctx, responses.as_deref())?;
            let r = &out.report;
            let pearson = r
                .pearson
                .value()
                .map_or("undefined".to_string(), |v| format!("{v:.4}"));
            println!(
                "eval: S={} ({} unparsed) ACC={:.4} ECE={:.2} r={pearson} t*={}",
                r.s,
                r.unparsed,
                r.accuracy,
                r.ece_x100,
                r.chosen_threshold.map_or("none".into(), |t| t.to_string())
            );
            if let Some(fp) = &out.first_prob {
                println!("eval (first-token probability): ECE={:.2}", fp.ece_x100);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
