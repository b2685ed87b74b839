//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use infdds::baselines::StrategyChoice;
use infdds::corpus::{Corpus, Pair};
use infdds::eval::{evaluate_suite, ndcg_at_k, paired_t_test, NDCG_K};
use infdds::experiment::{load_experiment_corpus, resample_splits, run_experiment, ExperimentConfig, TRAJECTORY_FILE};
use infdds::meta::{meta_round, rollout_stream, round_stream, std_dev, train, TrainConfig, TrainOutcome, TrainState};
use infdds::numerics::{finite_diff_grad, max_relative_error, LrSchedule, OptimizerKind, Rng};
use infdds::retriever::{loss_and_grads, train_step, ModelConfig, ModelParams};
use infdds::sampler::{
    conditional_probabilities, init_from_temperature, probabilities, scorer_gradient, softmax, temperature_logits,
    ScorerMode, SamplerState,
};

const SEEDS: u64 = 5;
const RUN_BUDGET: Duration = Duration::from_secs(300);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bundled() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic4.toml");
    ExperimentConfig::from_file(&path, &[]).expect("bundled config parses")
}

fn timed_train(corpus: &Corpus, cfg: &TrainConfig) -> (TrainOutcome, Duration) {
    let t = Instant::now();
    let out = train(corpus, cfg).expect("training succeeds");
    (out, t.elapsed())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation.
fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn word(rng: &mut Rng) -> String {
    format!("w{}", rng.below(40))
}

fn random_pair(rng: &mut Rng) -> Pair {
    let q: Vec<String> = (0..1 + rng.below(4)).map(|_| word(rng)).collect();
    let p: Vec<String> = (0..1 + rng.below(5)).map(|_| word(rng)).collect();
    Pair::new(q.join(" "), p.join(" "))
}

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = Rng::new(1000 + inst);
        let cfg = ModelConfig {
            vocab_buckets: 32,
            dim: 8,
            out_dim: 8,
            t_sim: 0.05 + rng.uniform(),
            init_scale: 1.0,
        };
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let pairs: Vec<Pair> = (0..4).map(|_| random_pair(&mut rng)).collect();
        let batch: Vec<&Pair> = pairs.iter().collect();
        let (_, g) = loss_and_grads(&params, &batch).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.tensors.set_flat(x);
                loss_and_grads(&p, &batch).unwrap().0
            },
            &params.tensors.flat(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&g.flat(), &fd, 1e-6));
    }
    let el = start.elapsed();
    verdict(
        worst < 1e-4 && el < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 20 instances in {:.2}s", el.as_secs_f64()),
    )
}

fn c2_estimator() -> Verdict {
    let psi = vec![0.3, -1.1, 0.7];
    let rewards = [0.9, -0.4, 0.25];
    let mut state = SamplerState::from_logits(psi.clone());
    state.mode = ScorerMode::ConditionalLogprob;
    let subsets = [[0usize, 1], [0, 2], [1, 2]];
    let mut avg = [0.0; 3];
    for s in &subsets {
        let r: Vec<f64> = s.iter().map(|&i| rewards[i]).collect();
        let g = scorer_gradient(&state, s, &r).unwrap();
        for k in 0..3 {
            avg[k] += g[k] / 3.0;
        }
    }
    // closed form: E_S sum_{i in S} P(i) I_i (e_i - P(.|S))
    let z: f64 = psi.iter().map(|v: &f64| v.exp()).sum();
    let p: Vec<f64> = psi.iter().map(|v| v.exp() / z).collect();
    let mut want = [0.0; 3];
    for s in &subsets {
        let zs: f64 = s.iter().map(|&j| psi[j].exp()).sum();
        for &i in s {
            for &j in s {
                let q = psi[j].exp() / zs;
                let delta = if i == j { 1.0 } else { 0.0 };
                want[j] += p[i] * rewards[i] * (delta - q) / 3.0;
            }
        }
    }
    let err_cond = (0..3).map(|k| (avg[k] - want[k]).abs()).fold(0.0, f64::max);

    let mut full = SamplerState::from_logits(psi);
    full.mode = ScorerMode::FullLogprob;
    let g = scorer_gradient(&full, &[0, 1, 2], &[0.6; 3]).unwrap();
    let err_const = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    verdict(
        err_cond <= 1e-12 && err_const <= 1e-12,
        format!("subsample-averaged gradient error {err_cond:.1e}; constant-reward gradient {err_const:.1e}"),
    )
}

fn c3_reptile_identity() -> Verdict {
    let bundled = bundled();
    let mut corpus = load_experiment_corpus(&bundled).unwrap();
    corpus.train.truncate(1);
    let mut cfg = bundled.train.clone();
    cfg.meta.subsample_size = 1;
    cfg.meta.scorer_lr = 0.0;
    cfg.influence.steps = 1;
    let mut worst: f64 = 0.0;
    for lr in [1.0, 0.05] {
        let params = ModelParams::init(&cfg.model, &mut Rng::new(3)).unwrap();
        let opt = params.new_optimizer(OptimizerKind::sgd(), LrSchedule::constant(lr));
        let round = round_stream(9, 0);

        let mut direct = params.clone();
        let mut direct_opt = opt.clone();
        let mut rng = infdds::influence::rollout_rng(&rollout_stream(&round), 0);
        train_step(&mut direct, &mut direct_opt, &corpus.train[0], cfg.influence.batch_size, &mut rng).unwrap();
        let step = direct.tensors.sub(&params.tensors).unwrap();

        let mut meta = params.clone();
        let mut meta_opt = opt.clone();
        let mut sampler = cfg.initial_sampler(&corpus.sizes()).unwrap();
        meta_round(
            TrainState {
                params: &mut meta,
                opt: &mut meta_opt,
                sampler: &mut sampler,
            },
            &corpus,
            &cfg,
            &round,
            &(),
        )
        .unwrap();
        let update = meta.tensors.sub(&params.tensors).unwrap().flat();
        // alpha = lr scales the proxy displacement once more
        let expect: Vec<f64> = step.flat().iter().map(|v| lr * v).collect();
        let err = update.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    verdict(worst <= 1e-12, format!("max |meta update - alpha * train_step update| = {worst:.1e} (lr 1 and 0.05)"))
}

fn c4_distributions() -> Verdict {
    let mut worst: f64 = 0.0;
    let logits = [2.0, -0.5, 0.1, 3.3];
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    for (a, v) in softmax(&logits).iter().zip(logits) {
        worst = worst.max((a - v.exp() / z).abs());
    }
    let state = SamplerState::from_logits(logits.to_vec());
    let cond = conditional_probabilities(&state, &[1, 3]).unwrap();
    let zs = logits[1].exp() + logits[3].exp();
    for (k, c) in cond.iter().enumerate() {
        let want = match k {
            1 | 3 => logits[k].exp() / zs,
            _ => 0.0,
        };
        worst = worst.max((c - want).abs());
    }
    let sizes = [100usize, 400, 2500];
    for tau in [0.5, 1.0, 3.0] {
        let p = probabilities(&init_from_temperature(&sizes, tau).unwrap());
        let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(1.0 / tau)).collect();
        let s: f64 = w.iter().sum();
        for (a, b) in p.iter().zip(&w) {
            worst = worst.max((a - b / s).abs());
        }
    }
    let uniform = softmax(&temperature_logits(&sizes, f64::INFINITY).unwrap());
    for u in uniform {
        worst = worst.max((u - 1.0 / 3.0).abs());
    }
    let beir = [499_184usize, 2_590, 100_231, 85_000, 5_500, 109_810, 809];
    let p = probabilities(&init_from_temperature(&beir, 1.0).unwrap());
    let msmarco_err = (p[0] - 499_184.0 / 803_124.0).abs();
    verdict(
        worst <= 1e-12 && msmarco_err <= 1e-12,
        format!("oracle error {worst:.1e}; P(MSMARCO) = {:.6} (error {msmarco_err:.1e})", p[0]),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn c5_ndcg() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for n in 1..=6usize {
        let perms = permutations(n);
        for code in 0..3usize.pow(n as u32) {
            let grades: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
            let dcg = |order: &[usize]| -> f64 {
                order
                    .iter()
                    .take(NDCG_K)
                    .enumerate()
                    .map(|(r, &i)| grades[i] / ((r + 2) as f64).log2())
                    .sum()
            };
            let ideal = perms.iter().map(|p| dcg(p)).fold(0.0, f64::max);
            for p in &perms {
                let ranking: Vec<f64> = p.iter().map(|&i| grades[i]).collect();
                let got = ndcg_at_k(&ranking, &grades, NDCG_K);
                match got {
                    None => worst = worst.max(if ideal == 0.0 { 0.0 } else { 1.0 }),
                    Some(v) => worst = worst.max((v - dcg(p) / ideal).abs()),
                }
                checked += 1;
            }
        }
    }
    let el = start.elapsed();
    verdict(
        worst <= 1e-12 && el < Duration::from_secs(5),
        format!("{checked} rankings, max error {worst:.1e}, {:.2}s", el.as_secs_f64()),
    )
}

struct SeedRuns {
    dds: Vec<TrainOutcome>,
    times: Vec<Duration>,
}

fn c6_adaptation(corpus: &Corpus, base: &TrainConfig) -> (Verdict, SeedRuns) {
    let mut dds = Vec::new();
    let mut times = Vec::new();
    let mut stat_scores = Vec::new();
    let mut dds_scores = Vec::new();
    let (mut stat_mean, mut dds_mean) = (0.0, 0.0);
    let mut raised = 0;
    let mut finals = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        let (d, t) = timed_train(corpus, &cfg);
        times.push(t);
        cfg.strategy = StrategyChoice::Static;
        let (s, t) = timed_train(corpus, &cfg);
        times.push(t);
        let p0 = probabilities(&d.sampler)[0];
        finals.push(format!("{p0:.3}"));
        if p0 > 0.25 {
            raised += 1;
        }
        dds_mean += d.final_dev.mean_ndcg / SEEDS as f64;
        stat_mean += s.final_dev.mean_ndcg / SEEDS as f64;
        dds_scores.extend(d.final_dev.per_query_ndcg());
        stat_scores.extend(s.final_dev.per_query_ndcg());
        dds.push(d);
    }
    let tt = paired_t_test(&dds_scores, &stat_scores).unwrap();
    let slowest = times.iter().max().unwrap();
    let pass = raised >= 4 && dds_mean >= stat_mean && *slowest < RUN_BUDGET;
    (
        verdict(
            pass,
            format!(
                "P(domain0) final [{}] raised in {raised}/5; dev NDCG@10 inf-dds {dds_mean:.4} vs static {stat_mean:.4}; paired t-test n={} t={:.3} p={:.4}; slowest run {:.1}s",
                finals.join(", "),
                tt.n,
                tt.t,
                tt.p,
                slowest.as_secs_f64()
            ),
        ),
        SeedRuns { dds, times },
    )
}

fn c7_reptile_ablation(corpus: &Corpus, base: &TrainConfig, on: &SeedRuns) -> Verdict {
    let on_mean = mean(&on.dds.iter().map(|o| o.final_dev.mean_ndcg).collect::<Vec<_>>());
    let mut off = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        cfg.meta.reptile_enabled = false;
        off.push(timed_train(corpus, &cfg).0.final_dev.mean_ndcg);
    }
    let off_mean = mean(&off);
    let gap = (on_mean - off_mean).abs();
    verdict(
        gap < 0.02,
        format!("dev NDCG@10 Reptile on {on_mean:.4}, off {off_mean:.4}, gap {gap:.4} (< 0.02)"),
    )
}

fn csv_without_strategy(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            if f.len() == 8 {
                f.remove(6);
            }
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn c8_steps_sweep(corpus: &Corpus, base: &TrainConfig) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for l in [1usize, 3, 5, 10] {
        let mut cfg = base.clone();
        cfg.influence.steps = l;
        match train(corpus, &cfg) {
            Ok(o) => {
                let finite = o.log.rows.iter().all(|r| {
                    r.probability.is_finite()
                        && r.influence.is_none_or(f64::is_finite)
                        && r.dev_metric.is_none_or(f64::is_finite)
                });
                ok &= finite && o.final_params.tensors.is_finite();
                parts.push(format!("l={l}: {:.4}", o.final_dev.mean_ndcg));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("l={l}: error {e}"));
            }
        }
    }
    let mut zero = base.clone();
    zero.influence.steps = 0;
    let z = train(corpus, &zero).unwrap();
    let mut stat = base.clone();
    stat.strategy = StrategyChoice::Static;
    let s = train(corpus, &stat).unwrap();
    let identical = csv_without_strategy(&z.log.to_csv()) == csv_without_strategy(&s.log.to_csv())
        && z.final_params.tensors == s.final_params.tensors;
    verdict(
        ok && identical && z.rounds.is_empty(),
        format!(
            "{}; all finite: {ok}; l=0 trajectory identical to static: {identical}",
            parts.join(", ")
        ),
    )
}

fn c9_leakage(corpus: &Corpus, base: &TrainConfig, original: &SeedRuns) -> Verdict {
    let test_ndcg = |o: &TrainOutcome, c: &Corpus| evaluate_suite(&o.final_params, &c.test, NDCG_K).unwrap().mean_ndcg;
    let orig: Vec<f64> = original.dds.iter().map(|o| test_ndcg(o, corpus)).collect();
    let folds = resample_splits(corpus, 5, &Rng::new(77)).unwrap();
    let fold_scores: Vec<f64> = folds
        .iter()
        .enumerate()
        .map(|(k, fold)| {
            let mut cfg = base.clone();
            cfg.run.seed = k as u64;
            test_ndcg(&train(fold, &cfg).unwrap(), fold)
        })
        .collect();
    let (mo, mf) = (mean(&orig), mean(&fold_scores));
    let pooled = ((sd(&orig).powi(2) + sd(&fold_scores).powi(2)) / 2.0).sqrt();
    verdict(
        (mf - mo).abs() <= pooled,
        format!("test NDCG@10 original {mo:.4} (5 seeds), folds {mf:.4} (5 folds), |diff| {:.4} vs pooled sd {pooled:.4}", (mf - mo).abs()),
    )
}

fn c10_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, parallel: bool| -> (PathBuf, Vec<u8>) {
        let mut cfg = bundled();
        cfg.output.dir = Some(tmp.path().join(name));
        cfg.train.run.seed = 11;
        cfg.train.influence.parallel = parallel;
        let a = run_experiment(&cfg).unwrap();
        let bytes = std::fs::read(a.dir.join(TRAJECTORY_FILE)).unwrap();
        (a.dir, bytes)
    };
    let (_, a) = run("a", false);
    let (_, b) = run("b", false);
    let (_, c) = run("c", true);
    verdict(
        a == b && a == c && !a.is_empty(),
        format!("{} byte CSV; rerun identical: {}; parallel rollouts identical: {}", a.len(), a == b, a == c),
    )
}

fn main() {
    let cfg = bundled();
    let corpus = load_experiment_corpus(&cfg).unwrap();
    let base = cfg.train.clone();
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient correctness", c1_gradients()),
        (2, "estimator correctness", c2_estimator()),
        (3, "Reptile identity", c3_reptile_identity()),
        (4, "distribution sanity", c4_distributions()),
        (5, "NDCG oracle", c5_ndcg()),
    ];
    let (v6, runs) = c6_adaptation(&corpus, &base);
    results.push((6, "qualitative adaptation", v6));
    results.push((7, "Reptile ablation", c7_reptile_ablation(&corpus, &base, &runs)));
    results.push((8, "update-steps sweep", c8_steps_sweep(&corpus, &base)));
    results.push((9, "leakage protocol", c9_leakage(&corpus, &base, &runs)));
    results.push((10, "determinism", c10_determinism()));
    let secs: Vec<f64> = runs.times.iter().map(Duration::as_secs_f64).collect();
    println!("bundled config: mean run {:.2}s (sd {:.2}s)", mean(&secs), std_dev(&secs));
    let mut failed = 0;
    for (n, name, v) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
