//! Trajectory log: per logged step and dataset, the sampling probability,
//! the round's influence (when a scorer update happened) and the dev metric
//! (when an evaluation happened).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "#schema=infdds-trajectory/1";
pub const HEADER: &str = "step,dataset_id,dataset_name,probability,influence,dev_metric,strategy,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub dataset_id: usize,
    pub dataset_name: String,
    pub probability: f64,
    pub influence: Option<f64>,
    pub dev_metric: Option<f64>,
    pub strategy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrajectoryLog {
    /// Appends one row per dataset for `step`.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        step: u64,
        names: &[String],
        probs: &[f64],
        influences: &[Option<f64>],
        dev_metric: Option<f64>,
        strategy: &str,
        seed: u64,
    ) {
        for (i, name) in names.iter().enumerate() {
            self.rows.push(TrajectoryRow {
                step,
                dataset_id: i,
                dataset_name: name.clone(),
                probability: probs[i],
                influence: influences[i],
                dev_metric,
                strategy: strategy.to_string(),
                seed,
            });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{SCHEMA_LINE}").unwrap();
        writeln!(out, "{HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.dataset_id,
                r.dataset_name,
                r.probability,
                opt(r.influence),
                opt(r.dev_metric),
                r.strategy,
                r.seed
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == SCHEMA_LINE => {}
            Some((_, l)) if l.starts_with("#schema=") => return Err(err(1, format!("unsupported schema `{}`", &l[8..]))),
            _ => return Err(err(1, "missing schema line".into())),
        }
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            _ => return Err(err(2, "unexpected header".into())),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(n + 1, format!("expected 8 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(n + 1, e.to_string()));
            let optnum = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(TrajectoryRow {
                step: f[0].parse().map_err(|e| err(n + 1, format!("step: {e}")))?,
                dataset_id: f[1].parse().map_err(|e| err(n + 1, format!("dataset_id: {e}")))?,
                dataset_name: f[2].to_string(),
                probability: num(f[3])?,
                influence: optnum(f[4])?,
                dev_metric: optnum(f[5])?,
                strategy: f[6].to_string(),
                seed: f[7].parse().map_err(|e| err(n + 1, format!("seed: {e}")))?,
            });
        }
        let log = TrajectoryLog { rows };
        log.validate().map_err(|m| err(0, m))?;
        Ok(log)
    }

    /// Checks that steps never decrease and that each step's probabilities
    /// sum to one.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut prev = 0;
        let mut i = 0;
        while i < self.rows.len() {
            let step = self.rows[i].step;
            if step < prev {
                return Err(format!("step {step} after step {prev}"));
            }
            prev = step;
            let mut sum = 0.0;
            while i < self.rows.len() && self.rows[i].step == step {
                sum += self.rows[i].probability;
                i += 1;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("probabilities at step {step} sum to {sum}"));
            }
        }
        Ok(())
    }

    /// Distinct dataset (id, name) pairs in id order.
    pub fn datasets(&self) -> Vec<(usize, String)> {
        let mut seen: Vec<(usize, String)> = Vec::new();
        for r in &self.rows {
            if !seen.iter().any(|(id, _)| *id == r.dataset_id) {
                seen.push((r.dataset_id, r.dataset_name.clone()));
            }
        }
        seen.sort();
        seen
    }

    /// (step, probability) series of one dataset.
    pub fn series(&self, dataset: usize) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .map(|r| (r.step, r.probability))
            .collect()
    }

    /// Probabilities at the last logged step, by dataset id.
    pub fn final_probabilities(&self) -> Vec<f64> {
        let Some(last) = self.rows.last().map(|r| r.step) else {
            return Vec::new();
        };
        let mut rows: Vec<&TrajectoryRow> = self.rows.iter().filter(|r| r.step == last).collect();
        rows.sort_by_key(|r| r.dataset_id);
        rows.into_iter().map(|r| r.probability).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_blanks() {
        let mut log = TrajectoryLog::default();
        let names = vec!["a".to_string(), "b".to_string()];
        log.record(0, &names, &[0.5, 0.5], &[None, None], Some(0.25), "inf-dds", 3);
        log.record(10, &names, &[0.75, 0.25], &[Some(0.1), Some(-0.2)], None, "inf-dds", 3);
        let csv = log.to_csv();
        assert!(csv.contains("\n10,0,a,0.75,0.1,,inf-dds,3\n"), "{csv}");
        let back = TrajectoryLog::parse(&csv, Path::new("x.csv")).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.final_probabilities(), vec![0.75, 0.25]);
    }

    #[test]
    fn rejects_unknown_schema_and_bad_sums() {
        let bad = format!("#schema=infdds-trajectory/9\n{HEADER}\n");
        assert!(TrajectoryLog::parse(&bad, Path::new("x")).unwrap_err().to_string().contains("unsupported schema"));
        let sums = format!("{SCHEMA_LINE}\n{HEADER}\n0,0,a,0.7,,,s,1\n0,1,b,0.7,,,s,1\n");
        assert!(TrajectoryLog::parse(&sums, Path::new("x")).is_err());
    }
}
