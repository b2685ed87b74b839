//! Experiment runner: config files, run artifacts, reports, plots and split
//! resampling.

mod config;
mod plot;
mod resample;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{apply_overrides, CorpusConfig, ExperimentConfig, OutputConfig, DEFAULT_OUT_ROOT, OUT_DIR_ENV};
pub use plot::{plot_svg, plot_trajectories};
pub use resample::resample_splits;

use crate::corpus::{generate_synthetic, load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, paired_t_test, SuiteResult, TTest, NDCG_K};
use crate::meta::{train_with, TrainObserver, TrainOutcome};
use crate::numerics::Rng;
use crate::retriever::ModelParams;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Loads the configured manifest or generates the synthetic corpus.
pub fn load_experiment_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus.manifest {
        Some(m) => {
            let path = cfg.resolve(m);
            if !path.is_file() {
                return Err(Error::Config(vec![format!("corpus.manifest: file `{}` not found", path.display())]));
            }
            Ok(load_corpus(&path)?.1)
        }
        None => generate_synthetic(&cfg.corpus.synthetic, &mut Rng::new(cfg.corpus.synthetic_seed)),
    }
}

/// Paired t-test of this run against a baseline on per-query NDCG@10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub dev: TTest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub seed: u64,
    pub config: String,
    pub best_step: u64,
    /// Dev and test metrics of the best-on-dev checkpoint.
    pub best_dev: SuiteResult,
    pub best_test: Option<SuiteResult>,
    pub final_dev: SuiteResult,
    pub final_test: Option<SuiteResult>,
    pub final_probabilities: Vec<(String, f64)>,
    pub meta_rounds: usize,
    pub ordinary_steps: u64,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl RunReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "strategy: {}", self.strategy).unwrap();
        writeln!(w, "seed: {}", self.seed).unwrap();
        writeln!(w, "wall_clock_secs: {:.3}", self.wall_clock_secs).unwrap();
        writeln!(w, "meta_rounds: {}", self.meta_rounds).unwrap();
        writeln!(w, "ordinary_steps: {}", self.ordinary_steps).unwrap();
        writeln!(w, "best_step: {}", self.best_step).unwrap();
        let suite = |w: &mut String, label: &str, r: &SuiteResult| {
            for set in &r.sets {
                writeln!(
                    w,
                    "{label} {}: ndcg@{NDCG_K} {:.4} recall@{NDCG_K} {:.4}",
                    set.name, set.mean_ndcg, set.mean_recall
                )
                .unwrap();
            }
            writeln!(w, "{label} mean ndcg@{NDCG_K}: {:.4}", r.mean_ndcg).unwrap();
        };
        suite(w, "best dev", &self.best_dev);
        if let Some(t) = &self.best_test {
            suite(w, "best test", t);
        }
        suite(w, "final dev", &self.final_dev);
        if let Some(t) = &self.final_test {
            suite(w, "final test", t);
        }
        for (name, p) in &self.final_probabilities {
            writeln!(w, "final P({name}): {p:.4}").unwrap();
        }
        if let Some(c) = &self.comparison {
            let line = |w: &mut String, split: &str, t: &TTest| {
                writeln!(
                    w,
                    "vs {} ({split}): n={} mean_diff={:.4} t={:.4} p={:.4}",
                    c.baseline, t.n, t.mean_diff, t.t, t.p
                )
                .unwrap()
            };
            line(w, "dev", &c.dev);
            if let Some(t) = &c.test {
                line(w, "test", t);
            }
        }
        writeln!(w, "\n[config]\n{}", self.config).unwrap();
        s
    }
}

/// Paired test of `a` against `b` on per-query NDCG@10 of the best
/// checkpoints. The reports must cover the same queries.
pub fn compare_reports(a: &RunReport, b: &RunReport, test_split: bool) -> Result<TTest> {
    let pick = |r: &RunReport| -> Result<SuiteResult> {
        if test_split {
            r.best_test.clone().ok_or_else(|| Error::Invalid("report has no test results".into()))
        } else {
            Ok(r.best_dev.clone())
        }
    };
    let (sa, sb) = (pick(a)?, pick(b)?);
    let key = |s: &SuiteResult| -> Vec<(String, usize)> {
        s.sets
            .iter()
            .flat_map(|set| set.per_query.iter().map(|q| (set.name.clone(), q.query)))
            .collect()
    };
    if key(&sa) != key(&sb) {
        return Err(Error::Invalid("reports were evaluated on different queries".into()));
    }
    paired_t_test(&sa.per_query_ndcg(), &sb.per_query_ndcg())
}

struct CheckpointWriter {
    dir: Option<PathBuf>,
}

impl TrainObserver for CheckpointWriter {
    fn on_eval(&mut self, step: u64, params: &ModelParams, _dev: &SuiteResult) -> Result<()> {
        match &self.dir {
            Some(d) => params.save(&d.join(format!("step-{step:06}.json"))),
            None => Ok(()),
        }
    }
}

/// Everything a finished run produced.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: RunReport,
    pub outcome: TrainOutcome,
}

/// Trains per `cfg` and writes the trajectory CSV, checkpoints, the config
/// echo and the run report into the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();
    let corpus = load_experiment_corpus(cfg)?;
    let dir = cfg.out_dir();
    let ck_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let baseline = cfg
        .output
        .baseline
        .as_ref()
        .map(|p| {
            let p = cfg.resolve(p);
            RunReport::read(&p).map(|r| (p, r))
        })
        .transpose()?;

    let mut writer = CheckpointWriter {
        dir: cfg.output.checkpoints.then(|| ck_dir.clone()),
    };
    let outcome = train_with(&corpus, &cfg.train, &mut writer)?;
    outcome.best_params.save(&ck_dir.join("best.json"))?;
    outcome.final_params.save(&ck_dir.join("final.json"))?;
    outcome.log.write(&dir.join(TRAJECTORY_FILE))?;
    let echo = cfg.to_toml();
    fs::write(dir.join(CONFIG_ECHO), &echo).map_err(|e| Error::io(dir.join(CONFIG_ECHO), e))?;

    let test = |p: &ModelParams| -> Result<Option<SuiteResult>> {
        if corpus.test.is_empty() {
            Ok(None)
        } else {
            evaluate_suite(p, &corpus.test, NDCG_K).map(Some)
        }
    };
    let mut report = RunReport {
        strategy: cfg.train.strategy.name().to_string(),
        seed: cfg.train.run.seed,
        config: echo,
        best_step: outcome.best_step,
        best_dev: outcome.best_dev.clone(),
        best_test: test(&outcome.best_params)?,
        final_dev: outcome.final_dev.clone(),
        final_test: test(&outcome.final_params)?,
        final_probabilities: corpus
            .domain_names()
            .into_iter()
            .zip(crate::sampler::probabilities(&outcome.sampler))
            .collect(),
        meta_rounds: outcome.rounds.len(),
        ordinary_steps: outcome.ordinary_steps,
        wall_clock_secs: 0.0,
        comparison: None,
    };
    if let Some((path, base)) = baseline {
        report.comparison = Some(Comparison {
            baseline: path.display().to_string(),
            dev: compare_reports(&report, &base, false)?,
            test: match (&report.best_test, &base.best_test) {
                (Some(_), Some(_)) => Some(compare_reports(&report, &base, true)?),
                _ => None,
            },
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(dir.join(REPORT_JSON), json).map_err(|e| Error::io(dir.join(REPORT_JSON), e))?;
    fs::write(dir.join(REPORT_TEXT), report.to_text()).map_err(|e| Error::io(dir.join(REPORT_TEXT), e))?;
    Ok(RunArtifacts { dir, report, outcome })
}
