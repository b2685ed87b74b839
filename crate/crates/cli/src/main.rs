use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use infdds::corpus::{load_corpus, write_corpus};
use infdds::eval::{evaluate_suite, NDCG_K};
use infdds::experiment::{
    compare_reports, load_experiment_corpus, plot_trajectories, resample_splits, run_experiment, ExperimentConfig,
    RunReport,
};
use infdds::numerics::Rng;
use infdds::retriever::ModelParams;
use infdds::{Error, Result};

#[derive(Parser)]
#[command(name = "infdds", version, about = "Influence-guided domain sampling for a toy dense retriever")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus described by a config's [corpus] section.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory, overriding output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the dev or test sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus manifest; alternatively take the corpus from --config.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        json: bool,
    },
    /// Plot a trajectory CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Paired t-test between two run reports on per-query NDCG@10.
    Compare {
        report: PathBuf,
        baseline: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write resampled train/dev folds of a corpus.
    Resample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_or_default(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p, overrides),
        None => ExperimentConfig::from_str_with("", overrides, Path::new(".")),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, overrides, out } => {
            let mut cfg = config_or_default(config.as_deref(), &overrides)?;
            cfg.corpus.manifest = None;
            let corpus = load_experiment_corpus(&cfg)?;
            let manifest = write_corpus(&out, &corpus)?;
            println!("{}", manifest.display());
        }
        Command::Run { config, overrides, out } => {
            let mut cfg = ExperimentConfig::from_file(&config, &overrides)?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            let run = run_experiment(&cfg)?;
            print!("{}", run.report.to_text().split("\n[config]").next().unwrap_or_default());
            println!("run directory: {}", run.dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            config,
            split,
            json,
        } => {
            let params = ModelParams::load(&checkpoint)?;
            let corpus = match (manifest, config) {
                (Some(m), _) => load_corpus(&m)?.1,
                (None, c) => load_experiment_corpus(&config_or_default(c.as_deref(), &[])?)?,
            };
            let sets = match split {
                Split::Dev => &corpus.dev,
                Split::Test => &corpus.test,
            };
            if sets.is_empty() {
                return Err(Error::Invalid("the corpus has no sets for that split".into()));
            }
            let suite = evaluate_suite(&params, sets, NDCG_K)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&suite).expect("results serialize"));
            } else {
                for s in &suite.sets {
                    println!("{}\tndcg@{NDCG_K} {:.4}\trecall@{NDCG_K} {:.4}", s.name, s.mean_ndcg, s.mean_recall);
                }
                println!("mean\tndcg@{NDCG_K} {:.4}", suite.mean_ndcg);
            }
        }
        Command::Plot { csv, out } => plot_trajectories(&csv, &out)?,
        Command::Compare { report, baseline, split } => {
            let a = RunReport::read(&report)?;
            let b = RunReport::read(&baseline)?;
            let t = compare_reports(&a, &b, matches!(split, Split::Test))?;
            println!("n={} mean_diff={:.6} t={:.6} p={:.6}", t.n, t.mean_diff, t.t, t.p);
        }
        Command::Resample {
            manifest,
            folds,
            seed,
            out,
        } => {
            let (_, corpus) = load_corpus(&manifest)?;
            for (k, fold) in resample_splits(&corpus, folds, &Rng::new(seed))?.iter().enumerate() {
                let m = write_corpus(&out.join(format!("fold-{k}")), fold)?;
                println!("{}", m.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let issues = match &e {
                Error::Config(v) => v.clone(),
                _ => Vec::new(),
            };
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "issues": issues });
            eprintln!("{body}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
