//! The bilevel trainer.
//!
//! Ordinary steps draw a domain from the sampling policy and take one
//! optimizer step on it. After the scorer warmup, every `update_every` steps
//! a meta-round runs: subsample domains, measure their influence with proxy
//! rollouts, fold the proxy endpoints back into the model with a weighted
//! Reptile update at the current learning rate, feed the applied update to
//! the optimizer moments, and move the policy logits by REINFORCE.

use serde::{Deserialize, Serialize};

use crate::baselines::{cooldown_schedule, grad_alignment_reward, StrategyChoice};
use crate::corpus::{sample_batch, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, SuiteResult, NDCG_K};
use crate::influence::{
    dev_batch_pairs, draw_dev_batches, influence_round, rollout_rng, DatasetInfluence, EvalHook, InfluenceConfig,
    InfluenceReport,
};
use crate::numerics::{optimizer_state_update, LrSchedule, OptimizerKind, OptimizerState, Rng};
use crate::retriever::{loss_and_grads, train_step, ModelConfig, ModelParams, Tensors};
use crate::sampler::{
    init_from_temperature, init_from_weights, probabilities, reinforce_update, sample_dataset, softmax, ScorerMode,
    SamplerState,
};
use crate::trajectory::TrajectoryLog;

/// Below this, a reward sum counts as zero for reward-normalized weighting.
pub const REWARD_SUM_EPS: f64 = 1e-12;
/// Floor on the adaptive Reptile softmax temperature.
pub const REPTILE_TAU_FLOOR: f64 = 1e-6;

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_META: u64 = 3;
const TAG_SUBSET: u64 = 11;
const TAG_DEV: u64 = 12;
const TAG_ROLLOUT: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReptileWeighting {
    /// `p = softmax(I / tau_r)`.
    Softmax,
    /// `p = I / sum(I)`.
    RewardNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerName,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Step at which the rate reaches zero; 0 means `total_steps`, and a
    /// negative-free "no decay" is requested with `decay = false`.
    pub decay_steps: u64,
    pub decay: bool,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Adam,
            lr: 0.01,
            warmup_steps: 20,
            decay_steps: 0,
            decay: true,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Sgd => OptimizerKind::SgdMomentum { momentum: self.momentum },
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            decay_steps: match (self.decay, self.decay_steps) {
                (false, _) => 0,
                (true, 0) => total_steps,
                (true, n) => n,
            },
        }
    }
}

/// Initial sampling distribution: `size^(1/temperature)`, or explicit
/// weights when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            temperature: f64::INFINITY,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub update_every: u64,
    pub warmup_steps: u64,
    /// Domains scored per round; 0 means all.
    pub subsample_size: usize,
    pub reptile_enabled: bool,
    pub weighting: ReptileWeighting,
    /// Fixed Reptile softmax temperature; 0 picks the standard deviation of
    /// the round's influences.
    pub reptile_tau: f64,
    pub scorer_lr: f64,
    pub scorer_mode: ScorerMode,
    /// `+1` ascends rewards, `-1` descends.
    pub direction: f64,
    pub center_rewards: bool,
    /// Take ordinary sampled steps between meta-rounds.
    pub interleave_steps: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            update_every: 50,
            warmup_steps: 50,
            subsample_size: 0,
            reptile_enabled: true,
            weighting: ReptileWeighting::Softmax,
            reptile_tau: 0.0,
            scorer_lr: 0.1,
            scorer_mode: ScorerMode::ConditionalLogprob,
            direction: 1.0,
            center_rewards: false,
            interleave_steps: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 600,
            batch_size: 32,
            eval_every: 50,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub init: InitConfig,
    pub strategy: StrategyChoice,
    pub meta: MetaConfig,
    pub influence: InfluenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            init: InitConfig::default(),
            strategy: StrategyChoice::InfDds,
            meta: MetaConfig::default(),
            influence: InfluenceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every semantic problem, as `section.key: message`.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |key: &str, msg: String| out.push(format!("{key}: {msg}"));
        if self.run.batch_size < 2 {
            bad("run.batch_size", "must be at least 2 for in-batch negatives".into());
        }
        if self.run.eval_every == 0 {
            bad("run.eval_every", "must be positive".into());
        }
        if self.run.log_every == 0 {
            bad("run.log_every", "must be positive".into());
        }
        if self.model.vocab_buckets < 2 {
            bad("model.vocab_buckets", "must be at least 2".into());
        }
        if self.model.dim == 0 {
            bad("model.dim", "must be positive".into());
        }
        if self.model.out_dim == 0 {
            bad("model.out_dim", "must be positive".into());
        }
        if !(self.model.t_sim > 0.0) {
            bad("model.t_sim", "must be positive".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            bad("optimizer.lr", "must be nonnegative".into());
        }
        if !(self.init.temperature > 0.0) {
            bad("init.temperature", "must be positive (inf for uniform)".into());
        }
        if let Some(w) = &self.init.weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                bad("init.weights", "must be nonnegative with a positive sum".into());
            }
        }
        if let Err(e) = self.strategy.validate() {
            bad("strategy", e.to_string());
        }
        if self.meta.update_every == 0 {
            bad("meta.update_every", "must be at least 1".into());
        }
        if !(self.meta.scorer_lr >= 0.0) {
            bad("meta.scorer_lr", "must be nonnegative".into());
        }
        if self.meta.direction != 1.0 && self.meta.direction != -1.0 {
            bad("meta.direction", "must be 1 or -1".into());
        }
        if !(self.meta.reptile_tau >= 0.0) {
            bad("meta.reptile_tau", "must be nonnegative".into());
        }
        if self.influence.steps > 20 {
            bad("influence.steps", "must lie in 0..=20".into());
        }
        if self.influence.batch_size == 0 {
            bad("influence.batch_size", "must be positive".into());
        }
        if self.influence.dev_batch_size < 2 {
            bad("influence.dev_batch_size", "must be at least 2".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Number of meta-rounds a run of this config performs.
    pub fn meta_round_count(&self) -> u64 {
        if !self.meta_active() || self.run.total_steps <= self.meta.warmup_steps {
            return 0;
        }
        (self.run.total_steps - self.meta.warmup_steps) / self.meta.update_every
    }

    fn meta_active(&self) -> bool {
        match self.strategy {
            StrategyChoice::InfDds => self.influence.steps > 0,
            StrategyChoice::GradAlign => true,
            _ => false,
        }
    }

    pub fn initial_sampler(&self, sizes: &[usize]) -> Result<SamplerState> {
        let mut s = match &self.init.weights {
            Some(w) => {
                if w.len() != sizes.len() {
                    return Err(Error::Config(vec![format!(
                        "init.weights: {} weights for {} training domains",
                        w.len(),
                        sizes.len()
                    )]));
                }
                init_from_weights(w)?
            }
            None => init_from_temperature(sizes, self.init.temperature)?,
        };
        s.scorer_lr = self.meta.scorer_lr;
        s.warmup_steps = self.meta.warmup_steps;
        s.update_every = self.meta.update_every;
        s.subsample_size = if self.meta.subsample_size == 0 {
            sizes.len()
        } else {
            self.meta.subsample_size.min(sizes.len())
        };
        s.mode = self.meta.scorer_mode;
        s.direction = self.meta.direction;
        s.center_rewards = self.meta.center_rewards;
        Ok(s)
    }
}

/// Weights that mix proxy displacements. `None` means the round's model
/// update is skipped (reward-normalized weighting with a vanishing sum).
pub fn reptile_weights(influences: &[f64], weighting: ReptileWeighting, tau: f64) -> Result<Option<Vec<f64>>> {
    if influences.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("influence".into()));
    }
    match weighting {
        ReptileWeighting::Softmax => {
            if !(tau > 0.0) {
                return Err(Error::Invalid(format!("Reptile temperature must be positive, got {tau}")));
            }
            let scaled: Vec<f64> = influences.iter().map(|v| v / tau).collect();
            Ok(Some(softmax(&scaled)))
        }
        ReptileWeighting::RewardNormalized => {
            let sum: f64 = influences.iter().sum();
            if sum.abs() <= REWARD_SUM_EPS {
                log::warn!("influences sum to {sum}; skipping reward-normalized Reptile update");
                return Ok(None);
            }
            Ok(Some(influences.iter().map(|v| v / sum).collect()))
        }
    }
}

/// Adaptive temperature: population standard deviation of `values`, floored.
pub fn adaptive_tau(values: &[f64]) -> f64 {
    std_dev(values).max(REPTILE_TAU_FLOOR)
}

pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `params + alpha * sum_i p_i * displacement_i`.
pub fn weighted_reptile_update(params: &mut Tensors, displacements: &[&Tensors], weights: &[f64], alpha: f64) -> Result<Tensors> {
    if displacements.len() != weights.len() {
        return Err(Error::Shape(format!("{} displacements for {} weights", displacements.len(), weights.len())));
    }
    let mut avg = Tensors::zeros_like(params);
    for (d, &w) in displacements.iter().zip(weights) {
        avg.axpy(w, d)?;
    }
    params.axpy(alpha, &avg)?;
    Ok(avg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRoundResult {
    pub step: u64,
    pub report: InfluenceReport,
    /// Reptile mixing weights over the subsample, if the update ran.
    pub reptile_weights: Option<Vec<f64>>,
    pub alpha: f64,
    pub applied_update_norm: f64,
    pub psi_before: Vec<f64>,
    pub psi_after: Vec<f64>,
    /// Population standard deviation of the round's rewards.
    pub reward_std: f64,
}

/// Mutable training state threaded through meta-rounds.
pub struct TrainState<'a> {
    pub params: &'a mut ModelParams,
    pub opt: &'a mut OptimizerState,
    pub sampler: &'a mut SamplerState,
}

/// Stream a round's proxy rollouts derive from (see `rollout_rng`).
pub fn rollout_stream(round_rng: &Rng) -> Rng {
    round_rng.split(TAG_ROLLOUT)
}

/// Stream of the `round`-th meta-round of a run seeded with `seed`.
pub fn round_stream(seed: u64, round: u64) -> Rng {
    Rng::new(seed).split(TAG_META).split(round)
}

fn draw_subset(sampler: &SamplerState, rng: &Rng) -> Vec<usize> {
    let m = sampler.len();
    let k = sampler.subsample_size.clamp(1, m);
    if k == m {
        (0..m).collect()
    } else {
        rng.split(TAG_SUBSET).subset(m, k)
    }
}

/// One Inf-DDS meta-round.
pub fn meta_round(
    state: TrainState<'_>,
    corpus: &Corpus,
    config: &TrainConfig,
    round_rng: &Rng,
    hook: &dyn EvalHook,
) -> Result<MetaRoundResult> {
    let TrainState { params, opt, sampler } = state;
    let subset = draw_subset(sampler, round_rng);
    let dev_batches = draw_dev_batches(&corpus.dev, config.influence.dev_batch_size, &mut round_rng.split(TAG_DEV));
    let report = influence_round(
        params,
        opt,
        &corpus.train,
        &subset,
        &corpus.dev,
        &dev_batches,
        &config.influence,
        &rollout_stream(round_rng),
        hook,
    )?;
    let influences = report.influences();
    let tau = if config.meta.reptile_tau > 0.0 {
        config.meta.reptile_tau
    } else {
        adaptive_tau(&influences)
    };
    let weights = reptile_weights(&influences, config.meta.weighting, tau)?;
    let alpha = opt.current_lr();
    let mut applied_update_norm = 0.0;
    let mut applied = None;
    if config.meta.reptile_enabled {
        if let Some(w) = &weights {
            let disps: Vec<&Tensors> = report
                .per_dataset
                .iter()
                .map(|d| d.displacement.as_ref().expect("rollouts record displacements"))
                .collect();
            let avg = weighted_reptile_update(&mut params.tensors, &disps, w, alpha)?;
            applied_update_norm = alpha * avg.norm();
            if alpha > 0.0 {
                // the gradient plain SGD at the current rate would have needed
                // to produce the applied move alpha * avg
                let eta = opt.current_lr();
                let mut pseudo = avg;
                pseudo.scale(-alpha / eta);
                let Tensors { emb, proj } = &pseudo;
                optimizer_state_update(opt, &[emb, proj])?;
            }
            applied = Some(w.clone());
        }
    }
    let psi_before = sampler.psi.clone();
    reinforce_update(sampler, &subset, &influences)?;
    Ok(MetaRoundResult {
        step: opt.step_count,
        reward_std: std_dev(&influences),
        report: strip_displacements(report),
        reptile_weights: applied.or(if config.meta.reptile_enabled { None } else { weights }),
        alpha,
        applied_update_norm,
        psi_before,
        psi_after: sampler.psi.clone(),
    })
}

fn strip_displacements(mut report: InfluenceReport) -> InfluenceReport {
    for d in &mut report.per_dataset {
        d.displacement = None;
    }
    report
}

/// Gradient-alignment round: the reward of domain `i` is the mean cosine
/// between a training-batch gradient of `i` and each dev-batch gradient. The
/// model is not moved.
pub fn grad_align_round(
    params: &ModelParams,
    sampler: &mut SamplerState,
    corpus: &Corpus,
    config: &TrainConfig,
    round_rng: &Rng,
) -> Result<MetaRoundResult> {
    let subset = draw_subset(sampler, round_rng);
    let dev_batches = draw_dev_batches(&corpus.dev, config.influence.dev_batch_size, &mut round_rng.split(TAG_DEV));
    let dev_grads = dev_batches
        .iter()
        .map(|b| {
            let pairs = dev_batch_pairs(&corpus.dev[b.set], b);
            let refs: Vec<_> = pairs.iter().collect();
            loss_and_grads(params, &refs).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>>>()?;
    let rollout = rollout_stream(round_rng);
    let per_dataset = subset
        .iter()
        .map(|&i| {
            let mut rng = rollout_rng(&rollout, i);
            let batch = sample_batch(&corpus.train[i], config.influence.batch_size.max(2), &mut rng)?;
            let (_, g) = loss_and_grads(params, &batch)?;
            let deltas = dev_grads
                .iter()
                .map(|gd| grad_alignment_reward(&g, gd))
                .collect::<Result<Vec<_>>>()?;
            Ok(DatasetInfluence {
                dataset: i,
                influence: deltas.iter().sum::<f64>() / deltas.len() as f64,
                deltas,
                displacement: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = InfluenceReport {
        round_step: 0,
        per_dataset,
        baseline: Vec::new(),
        dev_batches,
    };
    let rewards = report.influences();
    let psi_before = sampler.psi.clone();
    reinforce_update(sampler, &subset, &rewards)?;
    Ok(MetaRoundResult {
        step: 0,
        reward_std: std_dev(&rewards),
        report,
        reptile_weights: None,
        alpha: 0.0,
        applied_update_norm: 0.0,
        psi_before,
        psi_after: sampler.psi.clone(),
    })
}

/// Per-round summary kept by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub step: u64,
    pub subset: Vec<usize>,
    pub influences: Vec<f64>,
    pub reward_std: f64,
    pub reptile_applied: bool,
    pub applied_update_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub best_params: ModelParams,
    pub best_step: u64,
    pub best_dev: SuiteResult,
    pub final_params: ModelParams,
    pub final_dev: SuiteResult,
    pub sampler: SamplerState,
    pub log: TrajectoryLog,
    pub rounds: Vec<RoundSummary>,
    pub ordinary_steps: u64,
}

/// Receives every dev evaluation during training.
pub trait TrainObserver {
    fn on_eval(&mut self, _step: u64, _params: &ModelParams, _dev: &SuiteResult) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, config, &mut ())
}

pub fn train_with(corpus: &Corpus, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    corpus.validate()?;
    let seed = config.run.seed;
    let root = Rng::new(seed);
    let mut params = ModelParams::init(&config.model, &mut root.split(TAG_INIT))?;
    let total = config.run.total_steps;
    let mut opt = params.new_optimizer(config.optimizer.kind(), config.optimizer.schedule(total));
    let sizes = corpus.sizes();
    let mut sampler = config.initial_sampler(&sizes)?;
    let mut train_rng = root.split(TAG_TRAIN);
    let meta_root = root.split(TAG_META);
    let names = corpus.domain_names();
    let strategy = config.strategy.name();
    let m = names.len();

    let mut log = TrajectoryLog::default();
    let mut rounds = Vec::new();
    let dev0 = evaluate_suite(&params, &corpus.dev, NDCG_K)?;
    observer.on_eval(0, &params, &dev0)?;
    let mut best = (params.clone(), 0u64, dev0.clone());
    let mut last_dev = dev0.clone();
    log.record(0, &names, &probabilities(&sampler), &vec![None; m], Some(dev0.mean_ndcg), strategy, seed);

    let mut ordinary_steps = 0;
    let mut round_index = 0u64;
    for t in 1..=total {
        if let StrategyChoice::Cooldown {
            tau_start,
            tau_end,
            switch_fraction,
        } = config.strategy
        {
            let p = cooldown_schedule(t - 1, total, tau_start, tau_end, switch_fraction, &sizes)?;
            sampler.psi = p.iter().map(|v| v.ln()).collect();
        }
        if config.meta.interleave_steps {
            let i = sample_dataset(&sampler, &mut train_rng);
            train_step(&mut params, &mut opt, &corpus.train[i], config.run.batch_size, &mut train_rng)
                .map_err(|e| diverged(t, e))?;
            ordinary_steps += 1;
        }

        let mut influences = vec![None; m];
        let meta_due = config.meta_active()
            && t > config.meta.warmup_steps
            && (t - config.meta.warmup_steps).is_multiple_of(config.meta.update_every);
        if meta_due {
            let round_rng = meta_root.split(round_index);
            round_index += 1;
            let result = match config.strategy {
                StrategyChoice::GradAlign => grad_align_round(&params, &mut sampler, corpus, config, &round_rng),
                _ => meta_round(
                    TrainState {
                        params: &mut params,
                        opt: &mut opt,
                        sampler: &mut sampler,
                    },
                    corpus,
                    config,
                    &round_rng,
                    &(),
                ),
            }
            .map_err(|e| diverged(t, e))?;
            for d in &result.report.per_dataset {
                influences[d.dataset] = Some(d.influence);
            }
            rounds.push(RoundSummary {
                step: t,
                subset: result.report.subset(),
                influences: result.report.influences(),
                reward_std: result.reward_std,
                reptile_applied: config.strategy == StrategyChoice::InfDds
                    && config.meta.reptile_enabled
                    && result.reptile_weights.is_some(),
                applied_update_norm: result.applied_update_norm,
            });
        }
        if !params.tensors.is_finite() {
            return Err(Error::Diverged {
                step: t,
                message: "non-finite model parameters".into(),
            });
        }

        let mut dev_metric = None;
        if t % config.run.eval_every == 0 || t == total {
            let dev = evaluate_suite(&params, &corpus.dev, NDCG_K).map_err(|e| diverged(t, e))?;
            observer.on_eval(t, &params, &dev)?;
            dev_metric = Some(dev.mean_ndcg);
            if dev.mean_ndcg > best.2.mean_ndcg {
                best = (params.clone(), t, dev.clone());
            }
            last_dev = dev;
        }
        if t % config.run.log_every == 0 || meta_due || dev_metric.is_some() {
            log.record(t, &names, &probabilities(&sampler), &influences, dev_metric, strategy, seed);
        }
    }

    let (best_params, best_step, best_dev) = best;
    Ok(TrainOutcome {
        best_params,
        best_step,
        best_dev,
        final_params: params,
        final_dev: last_dev,
        sampler,
        log,
        rounds,
        ordinary_steps,
    })
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(m) | Error::Degenerate(m) => Error::Diverged { step, message: m },
        other => other,
    }
}
