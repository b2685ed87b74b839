//! Online proxy rollouts and influence rewards.
//!
//! For each scored domain a clone of the current model takes `l` optimizer
//! steps on that domain alone. The influence of the domain is the mean, over
//! dev sets, of the change in a dev metric between the proxy and the current
//! model, evaluated on one dev batch per set that is shared by every domain in
//! the round.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DevSet, DomainDataset, Pair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, NDCG_K};
use crate::numerics::{OptimizerState, Rng};
use crate::retriever::{encode, info_nce_loss, train_step, ModelParams, Tensors};

/// Dev metric used as the reward signal. Larger is better for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceMetric {
    /// Negated InfoNCE of the dev batch with in-batch negatives.
    NegInfoNce,
    /// Mean NDCG@10 of the dev batch queries against the full passage pool.
    Ndcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    /// Proxy steps per domain.
    pub steps: usize,
    pub batch_size: usize,
    pub dev_batch_size: usize,
    pub metric: InfluenceMetric,
    /// Sum the metric change after every proxy step instead of measuring
    /// once after the last one.
    pub accumulate_per_step: bool,
    pub parallel: bool,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            batch_size: 32,
            dev_batch_size: 64,
            metric: InfluenceMetric::NegInfoNce,
            accumulate_per_step: false,
            parallel: false,
        }
    }
}

/// Query indices of one dev set evaluated in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevBatch {
    pub set: usize,
    pub queries: Vec<usize>,
}

/// Draws one batch per dev set from its judged queries, without replacement.
pub fn draw_dev_batches(dev_sets: &[DevSet], batch_size: usize, rng: &mut Rng) -> Vec<DevBatch> {
    dev_sets
        .iter()
        .enumerate()
        .map(|(j, set)| {
            let judged: Vec<usize> = (0..set.queries.len()).filter(|&i| set.queries[i].has_relevant()).collect();
            let picked = rng.subset(judged.len(), batch_size.min(judged.len()));
            DevBatch {
                set: j,
                queries: picked.into_iter().map(|k| judged[k]).collect(),
            }
        })
        .collect()
}

/// (query, top relevant passage) pairs of a dev batch.
pub fn dev_batch_pairs(set: &DevSet, batch: &DevBatch) -> Vec<Pair> {
    batch
        .queries
        .iter()
        .filter_map(|&i| {
            let q = &set.queries[i];
            let text = set.passage_text(q.top_passage()?)?;
            Some(Pair::new(q.text.clone(), text))
        })
        .collect()
}

/// Evaluates the influence metric of `params` on one dev batch.
pub fn evaluate_metric(params: &ModelParams, set: &DevSet, batch: &DevBatch, metric: InfluenceMetric) -> Result<f64> {
    if batch.queries.is_empty() {
        return Err(Error::Invalid(format!("{}: empty dev batch", set.name)));
    }
    match metric {
        InfluenceMetric::NegInfoNce => {
            let pairs = dev_batch_pairs(set, batch);
            let q: Vec<&str> = pairs.iter().map(|p| p.query.as_str()).collect();
            let p: Vec<&str> = pairs.iter().map(|p| p.positive.as_str()).collect();
            let loss = info_nce_loss(&encode(params, &q)?, &encode(params, &p)?, params.t_sim)?;
            Ok(-loss)
        }
        InfluenceMetric::Ndcg => Ok(evaluate_queries(params, set, &batch.queries, NDCG_K)?.mean_ndcg),
    }
}

/// Stream used by the proxy rollout of `dataset` within a round.
pub fn rollout_rng(round: &Rng, dataset: usize) -> Rng {
    round.split(dataset as u64)
}

/// Advances a clone of `(params, opt)` by `steps` train steps on `dataset`.
/// The originals are not touched.
pub fn proxy_rollout(
    params: &ModelParams,
    opt: &OptimizerState,
    dataset: &DomainDataset,
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<ModelParams> {
    if steps == 0 {
        return Err(Error::Invalid("proxy rollout needs at least one step".into()));
    }
    let mut proxy = params.clone();
    let mut proxy_opt = opt.clone();
    for _ in 0..steps {
        train_step(&mut proxy, &mut proxy_opt, dataset, batch_size, rng)?;
    }
    Ok(proxy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalEvent {
    Baseline { dev: usize },
    Proxy { dataset: usize, dev: usize },
}

/// Observer of every metric evaluation performed by a round.
pub trait EvalHook: Sync {
    fn on_eval(&self, event: EvalEvent);
}

impl EvalHook for () {
    fn on_eval(&self, _: EvalEvent) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfluence {
    pub dataset: usize,
    pub influence: f64,
    /// Metric change per dev set.
    pub deltas: Vec<f64>,
    /// Proxy endpoint minus the current parameters.
    #[serde(skip)]
    pub displacement: Option<Tensors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub round_step: u64,
    pub per_dataset: Vec<DatasetInfluence>,
    /// Metric of the current model on each dev batch.
    pub baseline: Vec<f64>,
    pub dev_batches: Vec<DevBatch>,
}

impl InfluenceReport {
    pub fn subset(&self) -> Vec<usize> {
        self.per_dataset.iter().map(|d| d.dataset).collect()
    }

    pub fn influences(&self) -> Vec<f64> {
        self.per_dataset.iter().map(|d| d.influence).collect()
    }
}

/// Runs one influence round over the domains in `subset`.
#[allow(clippy::too_many_arguments)]
pub fn influence_round(
    params: &ModelParams,
    opt: &OptimizerState,
    train: &[DomainDataset],
    subset: &[usize],
    dev_sets: &[DevSet],
    dev_batches: &[DevBatch],
    config: &InfluenceConfig,
    round_rng: &Rng,
    hook: &dyn EvalHook,
) -> Result<InfluenceReport> {
    if subset.is_empty() {
        return Err(Error::Invalid("influence round needs at least one dataset".into()));
    }
    if dev_batches.is_empty() {
        return Err(Error::Invalid("influence round needs at least one dev batch".into()));
    }
    let metric_all = |p: &ModelParams| -> Result<Vec<f64>> {
        dev_batches
            .iter()
            .map(|b| evaluate_metric(p, &dev_sets[b.set], b, config.metric))
            .collect()
    };
    let baseline = metric_all(params)?;
    for b in dev_batches {
        hook.on_eval(EvalEvent::Baseline { dev: b.set });
    }
    let n = dev_batches.len() as f64;

    let score = |&i: &usize| -> Result<DatasetInfluence> {
        let dataset = train
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("dataset index {i} out of range")))?;
        let mut rng = rollout_rng(round_rng, i);
        let mut deltas = vec![0.0; dev_batches.len()];
        let proxy = if config.accumulate_per_step {
            let mut proxy = params.clone();
            let mut proxy_opt = opt.clone();
            if config.steps == 0 {
                return Err(Error::Invalid("proxy rollout needs at least one step".into()));
            }
            for _ in 0..config.steps {
                train_step(&mut proxy, &mut proxy_opt, dataset, config.batch_size, &mut rng)?;
                for ((d, m), b) in deltas.iter_mut().zip(metric_all(&proxy)?).zip(&baseline) {
                    *d += m - b;
                }
                for b in dev_batches {
                    hook.on_eval(EvalEvent::Proxy { dataset: i, dev: b.set });
                }
            }
            proxy
        } else {
            let proxy = proxy_rollout(params, opt, dataset, config.steps, config.batch_size, &mut rng)?;
            for ((d, m), b) in deltas.iter_mut().zip(metric_all(&proxy)?).zip(&baseline) {
                *d = m - b;
            }
            for b in dev_batches {
                hook.on_eval(EvalEvent::Proxy { dataset: i, dev: b.set });
            }
            proxy
        };
        Ok(DatasetInfluence {
            dataset: i,
            influence: deltas.iter().sum::<f64>() / n,
            deltas,
            displacement: Some(proxy.tensors.sub(&params.tensors)?),
        })
    };

    let per_dataset = if config.parallel {
        subset.par_iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        subset.iter().map(score).collect::<Result<Vec<_>>>()?
    };
    Ok(InfluenceReport {
        round_step: opt.step_count,
        per_dataset,
        baseline,
        dev_batches: dev_batches.to_vec(),
    })
}
