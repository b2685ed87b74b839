//! Retrieval evaluation (NDCG@k, recall@k) and the paired t-test.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::DevSet;
use crate::error::{Error, Result};
use crate::retriever::{encode, ModelParams};

pub const NDCG_K: usize = 10;

/// Passages for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub passages: Vec<(String, f64)>,
}

/// Normalized DCG at `k` with linear gain and `1/log2(rank + 1)` discount.
///
/// `ranking` holds the grades of the retrieved items in ranked order,
/// `qrels` all judged grades for the query. Returns `None` when the query
/// has no relevant passage.
pub fn ndcg_at_k(ranking: &[f64], qrels: &[f64], k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    let dcg = |grades: &mut dyn Iterator<Item = f64>| -> f64 {
        grades
            .take(k)
            .enumerate()
            .map(|(r, g)| g / ((r + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<f64> = qrels.iter().copied().filter(|&g| g > 0.0).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let idcg = dcg(&mut ideal.into_iter());
    if idcg <= 0.0 {
        return None;
    }
    Some(dcg(&mut ranking.iter().copied()) / idcg)
}

/// Fraction of relevant passages found in the top `k`.
pub fn recall_at_k(ranking: &[f64], qrels: &[f64], k: usize) -> Option<f64> {
    let total = qrels.iter().filter(|&&g| g > 0.0).count();
    if total == 0 {
        return None;
    }
    let hit = ranking.iter().take(k).filter(|&&g| g > 0.0).count();
    Some(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: usize,
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub name: String,
    pub per_query: Vec<QueryScore>,
    pub mean_ndcg: f64,
    pub mean_recall: f64,
}

/// Per-set results plus the mean of per-set NDCG means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub sets: Vec<EvalResult>,
    pub mean_ndcg: f64,
}

impl SuiteResult {
    /// Per-query NDCG across all sets, in set then query order.
    pub fn per_query_ndcg(&self) -> Vec<f64> {
        self.sets.iter().flat_map(|s| s.per_query.iter().map(|q| q.ndcg)).collect()
    }
}

/// Ranks every passage of `set` for the given queries. Ties break by
/// passage id ascending.
pub fn rank(params: &ModelParams, set: &DevSet, queries: &[usize]) -> Result<Vec<RankedList>> {
    let ptexts: Vec<&str> = set.passages.iter().map(|p| p.text.as_str()).collect();
    let pm = encode(params, &ptexts)?;
    let qtexts: Vec<&str> = queries.iter().map(|&i| set.queries[i].text.as_str()).collect();
    let qm = encode(params, &qtexts)?;
    let scores = qm.matmul_t(&pm)?;
    Ok(queries
        .iter()
        .enumerate()
        .map(|(r, &qi)| {
            let mut order: Vec<usize> = (0..set.passages.len()).collect();
            let row = scores.row(r);
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| set.passages[a].id.cmp(&set.passages[b].id))
            });
            RankedList {
                query: qi,
                passages: order.into_iter().map(|i| (set.passages[i].id.clone(), row[i])).collect(),
            }
        })
        .collect())
}

/// Evaluates the queries with index in `queries`; queries without relevant
/// passages are skipped.
pub fn evaluate_queries(params: &ModelParams, set: &DevSet, queries: &[usize], k: usize) -> Result<EvalResult> {
    let judged: Vec<usize> = queries.iter().copied().filter(|&i| set.queries[i].has_relevant()).collect();
    if judged.is_empty() {
        return Err(Error::Invalid(format!("{}: no judged queries to evaluate", set.name)));
    }
    let ranked = rank(params, set, &judged)?;
    let per_query: Vec<QueryScore> = ranked
        .iter()
        .map(|rl| {
            let q = &set.queries[rl.query];
            let grades: Vec<f64> = rl
                .passages
                .iter()
                .take(k)
                .map(|(id, _)| q.qrels.get(id).copied().unwrap_or(0) as f64)
                .collect();
            let judged: Vec<f64> = q.qrels.values().map(|&g| g as f64).collect();
            QueryScore {
                query: rl.query,
                ndcg: ndcg_at_k(&grades, &judged, k).expect("query has a relevant passage"),
                recall: recall_at_k(&grades, &judged, k).expect("query has a relevant passage"),
            }
        })
        .collect();
    let n = per_query.len() as f64;
    Ok(EvalResult {
        name: set.name.clone(),
        mean_ndcg: per_query.iter().map(|q| q.ndcg).sum::<f64>() / n,
        mean_recall: per_query.iter().map(|q| q.recall).sum::<f64>() / n,
        per_query,
    })
}

pub fn evaluate_retrieval(params: &ModelParams, set: &DevSet, k: usize) -> Result<EvalResult> {
    let all: Vec<usize> = (0..set.queries.len()).collect();
    evaluate_queries(params, set, &all, k)
}

pub fn evaluate_suite(params: &ModelParams, sets: &[DevSet], k: usize) -> Result<SuiteResult> {
    let sets = sets
        .iter()
        .map(|s| evaluate_retrieval(params, s, k))
        .collect::<Result<Vec<_>>>()?;
    let mean_ndcg = if sets.is_empty() {
        0.0
    } else {
        sets.iter().map(|s| s.mean_ndcg).sum::<f64>() / sets.len() as f64
    };
    Ok(SuiteResult { sets, mean_ndcg })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

/// Two-sided paired t-test of `a - b` with `n - 1` degrees of freedom.
///
/// All-zero differences give `p = 1`; zero variance with a nonzero mean
/// gives an infinite statistic and `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("paired t-test needs at least 2 observations".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TTest {
            n,
            mean_diff: 0.0,
            t: 0.0,
            p: 1.0,
        });
    }
    if var == 0.0 {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { n, mean_diff: mean, t, p })
}
