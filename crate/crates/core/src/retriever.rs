//! Toy bi-encoder: hashed bag of embeddings, mean pooling, a linear
//! projection and L2 normalization, shared between queries and passages.
//! Trained with InfoNCE over in-batch negatives; gradients are derived by
//! hand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{sample_batch, DomainDataset, Pair};
use crate::error::{Error, Result};
use crate::numerics::{optimizer_step, LrSchedule, Matrix, OptimizerKind, OptimizerState, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_buckets: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub t_sim: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_buckets: 1024,
            dim: 16,
            out_dim: 16,
            t_sim: 0.02,
            init_scale: 1.0,
        }
    }
}

/// Trainable tensors, also used for gradients and parameter displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    pub emb: Matrix,
    pub proj: Matrix,
}

impl Tensors {
    pub fn zeros_like(other: &Tensors) -> Self {
        Self {
            emb: Matrix::zeros(other.emb.rows(), other.emb.cols()),
            proj: Matrix::zeros(other.proj.rows(), other.proj.cols()),
        }
    }

    pub fn sub(&self, other: &Tensors) -> Result<Tensors> {
        Ok(Tensors {
            emb: self.emb.sub(&other.emb)?,
            proj: self.proj.sub(&other.proj)?,
        })
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensors) -> Result<()> {
        self.emb.axpy(alpha, &other.emb)?;
        self.proj.axpy(alpha, &other.proj)
    }

    pub fn scale(&mut self, c: f64) {
        self.emb.scale(c);
        self.proj.scale(c);
    }

    pub fn norm(&self) -> f64 {
        (self.emb.frobenius_norm().powi(2) + self.proj.frobenius_norm().powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.emb.is_finite() && self.proj.is_finite()
    }

    pub fn flat(&self) -> Vec<f64> {
        crate::numerics::flatten(&[&self.emb, &self.proj])
    }

    pub fn set_flat(&mut self, x: &[f64]) {
        let n = self.emb.as_slice().len();
        self.emb.as_mut_slice().copy_from_slice(&x[..n]);
        self.proj.as_mut_slice().copy_from_slice(&x[n..]);
    }

    pub fn as_refs(&self) -> [&Matrix; 2] {
        [&self.emb, &self.proj]
    }

    /// FNV-1a digest of the raw bits, for isolation checks.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.flat() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: Tensors,
    pub t_sim: f64,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.vocab_buckets < 2 || config.dim == 0 || config.out_dim == 0 {
            return Err(Error::Invalid(format!("bad model shape {config:?}")));
        }
        if !(config.t_sim > 0.0) {
            return Err(Error::Invalid(format!("t_sim must be positive, got {}", config.t_sim)));
        }
        let mut emb = Matrix::zeros(config.vocab_buckets, config.dim);
        let s = config.init_scale / (config.dim as f64).sqrt();
        emb.as_mut_slice().iter_mut().for_each(|v| *v = s * rng.normal());
        let mut proj = Matrix::zeros(config.dim, config.out_dim);
        let s = 1.0 / (config.dim as f64).sqrt();
        proj.as_mut_slice().iter_mut().for_each(|v| *v = s * rng.normal());
        Ok(Self {
            tensors: Tensors { emb, proj },
            t_sim: config.t_sim,
        })
    }

    pub fn vocab_buckets(&self) -> usize {
        self.tensors.emb.rows()
    }

    pub fn tensor_shapes(&self) -> [(&'static str, (usize, usize)); 2] {
        [("E", self.tensors.emb.shape()), ("W", self.tensors.proj.shape())]
    }

    pub fn new_optimizer(&self, kind: OptimizerKind, schedule: LrSchedule) -> OptimizerState {
        OptimizerState::new(kind, schedule, &self.tensor_shapes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            #[serde(flatten)]
            params: &'a ModelParams,
        }
        let text = serde_json::to_string(&Out {
            format_version: CHECKPOINT_VERSION,
            params: self,
        })
        .expect("params serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            format_version: u32,
            #[serde(flatten)]
            params: ModelParams,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let parsed: In = serde_json::from_value(version).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        debug_assert_eq!(parsed.format_version, CHECKPOINT_VERSION);
        Ok(parsed.params)
    }
}

/// Stable FNV-1a hash of each lowercased whitespace token, modulo
/// `vocab_buckets`.
pub fn tokenize_hash(text: &str, vocab_buckets: usize) -> Vec<usize> {
    assert!(vocab_buckets >= 2, "vocab_buckets must be at least 2");
    text.split_whitespace()
        .map(|tok| {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for b in tok.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % vocab_buckets as u64) as usize
        })
        .collect()
}

/// Forward-pass intermediates of one encoded text.
struct Encoded {
    buckets: Vec<usize>,
    /// Mean-pooled embedding.
    pooled: Vec<f64>,
    /// Norm of the projected vector before normalization.
    proj_norm: f64,
    unit: Vec<f64>,
}

fn encode_one(params: &ModelParams, text: &str) -> Result<Encoded> {
    let buckets = tokenize_hash(text, params.vocab_buckets());
    if buckets.is_empty() {
        return Err(Error::Degenerate(format!("text {text:?} has no tokens")));
    }
    let emb = &params.tensors.emb;
    let w = &params.tensors.proj;
    let mut pooled = vec![0.0; emb.cols()];
    for &b in &buckets {
        for (p, e) in pooled.iter_mut().zip(emb.row(b)) {
            *p += e;
        }
    }
    let inv = 1.0 / buckets.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    let mut z = vec![0.0; w.cols()];
    for (k, &h) in pooled.iter().enumerate() {
        for (zj, wkj) in z.iter_mut().zip(w.row(k)) {
            *zj += h * wkj;
        }
    }
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("projected vector of {text:?} has norm {norm}")));
    }
    let unit = z.iter().map(|v| v / norm).collect();
    Ok(Encoded {
        buckets,
        pooled,
        proj_norm: norm,
        unit,
    })
}

/// Encodes texts into unit-norm rows.
pub fn encode<S: AsRef<str>>(params: &ModelParams, texts: &[S]) -> Result<Matrix> {
    let d_out = params.tensors.proj.cols();
    let mut data = Vec::with_capacity(texts.len() * d_out);
    for t in texts {
        data.extend(encode_one(params, t.as_ref())?.unit);
    }
    Matrix::from_vec(texts.len(), d_out, data)
}

/// Row-wise softmax of `q p^T / t_sim` and the InfoNCE loss.
fn similarity_softmax(q: &Matrix, p: &Matrix, t_sim: f64) -> Result<(Matrix, f64)> {
    let b = q.rows();
    if b < 2 {
        return Err(Error::Invalid(format!("InfoNCE needs at least 2 pairs, got {b}")));
    }
    if p.rows() != b {
        return Err(Error::Shape(format!("{b} queries vs {} passages", p.rows())));
    }
    let mut s = q.matmul_t(p)?;
    s.scale(1.0 / t_sim);
    if !s.is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let mut loss = 0.0;
    for i in 0..b {
        let row = s.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Ok((s, loss / b as f64))
}

/// Mean over rows of `-log softmax(q p^T / t_sim)[i, i]`.
pub fn info_nce_loss(q: &Matrix, p: &Matrix, t_sim: f64) -> Result<f64> {
    similarity_softmax(q, p, t_sim).map(|(_, l)| l)
}

/// InfoNCE loss on a batch and its gradients with respect to E and W.
pub fn loss_and_grads(params: &ModelParams, batch: &[&Pair]) -> Result<(f64, Tensors)> {
    let qs = batch
        .iter()
        .map(|p| encode_one(params, &p.query))
        .collect::<Result<Vec<_>>>()?;
    let ps = batch
        .iter()
        .map(|p| encode_one(params, &p.positive))
        .collect::<Result<Vec<_>>>()?;
    let d_out = params.tensors.proj.cols();
    let to_matrix = |enc: &[Encoded]| Matrix::from_vec(enc.len(), d_out, enc.iter().flat_map(|e| e.unit.clone()).collect());
    let q = to_matrix(&qs)?;
    let p = to_matrix(&ps)?;
    let t = params.t_sim;
    let (soft, loss) = similarity_softmax(&q, &p, t)?;

    // dL/dS_ij = (softmax_ij - delta_ij) / B, with S = Q P^T / t.
    let b = batch.len();
    let mut ds = soft;
    for i in 0..b {
        ds[(i, i)] -= 1.0;
    }
    ds.scale(1.0 / (b as f64 * t));
    let dq = ds.matmul(&p)?;
    let mut dst = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            dst[(j, i)] = ds[(i, j)];
        }
    }
    let dp = dst.matmul(&q)?;

    let mut grads = Tensors::zeros_like(&params.tensors);
    for (enc, dy) in qs.iter().zip(0..b).map(|(e, i)| (e, dq.row(i))).chain(ps.iter().zip(0..b).map(|(e, i)| (e, dp.row(i)))) {
        backprop_one(params, enc, dy, &mut grads);
    }
    Ok((loss, grads))
}

/// Pushes the gradient with respect to one unit-norm output row back through
/// normalization, projection and mean pooling.
fn backprop_one(params: &ModelParams, enc: &Encoded, dy: &[f64], grads: &mut Tensors) {
    let y = &enc.unit;
    let ydot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    let dz: Vec<f64> = y.iter().zip(dy).map(|(yi, di)| (di - yi * ydot) / enc.proj_norm).collect();
    let w = &params.tensors.proj;
    let mut dh = vec![0.0; w.rows()];
    for (k, h) in enc.pooled.iter().enumerate() {
        let grow = grads.proj.row_mut(k);
        let wrow = w.row(k);
        let mut acc = 0.0;
        for ((g, wkj), dzj) in grow.iter_mut().zip(wrow).zip(&dz) {
            *g += h * dzj;
            acc += wkj * dzj;
        }
        dh[k] = acc;
    }
    let inv = 1.0 / enc.buckets.len() as f64;
    for &bkt in &enc.buckets {
        for (g, d) in grads.emb.row_mut(bkt).iter_mut().zip(&dh) {
            *g += d * inv;
        }
    }
}

/// Applies one optimizer step to `params`. Returns the rate used.
pub fn apply_grads(params: &mut ModelParams, grads: &Tensors, opt: &mut OptimizerState) -> Result<f64> {
    let Tensors { emb, proj } = &mut params.tensors;
    optimizer_step(&mut [emb, proj], &grads.as_refs(), opt)
}

/// Samples a batch from `dataset` and takes one optimizer step on it.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    dataset: &DomainDataset,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let batch = sample_batch(dataset, batch_size, rng)?;
    let (loss, grads) = loss_and_grads(params, &batch)?;
    apply_grads(params, &grads, opt)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn small(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            vocab_buckets: 32,
            dim: 8,
            out_dim: 8,
            t_sim: 0.5,
            init_scale: 1.0,
        };
        ModelParams::init(&cfg, &mut Rng::new(seed)).unwrap()
    }

    fn batch4() -> Vec<Pair> {
        vec![
            Pair::new("alpha beta", "gamma delta beta"),
            Pair::new("one two three", "four five"),
            Pair::new("red", "green blue red"),
            Pair::new("sun moon", "star sky"),
        ]
    }

    #[test]
    fn hashing_is_stable() {
        let a = tokenize_hash("a a b", 1024);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], a[1]);
        assert_eq!(a, tokenize_hash("A a b", 1024));
        assert!(tokenize_hash("", 1024).is_empty());
        assert!(tokenize_hash("   ", 7).is_empty());
    }

    #[test]
    fn hash_buckets_uniform() {
        // 1e4 distinct tokens into 16 buckets; chi-squared, 15 dof, alpha=0.01
        // critical value 30.578.
        let buckets = 16;
        let mut counts = vec![0usize; buckets];
        for i in 0..10_000 {
            counts[tokenize_hash(&format!("tok{i}x"), buckets)[0]] += 1;
        }
        let e = 10_000.0 / buckets as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 30.578, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn encode_single_token_and_mean_pooling() {
        let p = small(1);
        let b = tokenize_hash("x", 32)[0];
        let e = Matrix::from_vec(1, 8, p.tensors.emb.row(b).to_vec()).unwrap();
        let z = e.matmul(&p.tensors.proj).unwrap();
        let n = z.frobenius_norm();
        let got = encode(&p, &["x"]).unwrap();
        for j in 0..8 {
            assert!((got[(0, j)] - z[(0, j)] / n).abs() < 1e-12);
        }
        assert_eq!(encode(&p, &["x x"]).unwrap(), got);
    }

    #[test]
    fn encode_errors() {
        let p = small(1);
        assert!(matches!(encode(&p, &[""]), Err(Error::Degenerate(_))));
        let mut z = p.clone();
        z.tensors.proj.scale(0.0);
        assert!(matches!(encode(&z, &["a"]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rows_are_unit_norm_and_scale_invariant() {
        let p = small(2);
        let texts: Vec<String> = (0..20).map(|i| format!("w{i} w{} z{}", i * 3, i % 5)).collect();
        let m = encode(&p, &texts).unwrap();
        for r in 0..m.rows() {
            let n: f64 = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let mut scaled = p.clone();
        scaled.tensors.proj.scale(3.7);
        let m2 = encode(&scaled, &texts).unwrap();
        assert!(max_relative_error(m.as_slice(), m2.as_slice(), 1.0) < 1e-9);
    }

    #[test]
    fn info_nce_uniform_and_peaked() {
        let row = Matrix::from_vec(1, 3, vec![0.6, 0.8, 0.0]).unwrap();
        let mut q = Matrix::zeros(5, 3);
        for r in 0..5 {
            q.row_mut(r).copy_from_slice(row.row(0));
        }
        let loss = info_nce_loss(&q, &q, 0.02).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let eye = Matrix::identity(3);
        assert!(info_nce_loss(&eye, &eye, 0.001).unwrap() < 1e-12);
        assert!(info_nce_loss(&row, &row, 1.0).is_err());
    }

    #[test]
    fn info_nce_matches_scalar_oracle() {
        let mut rng = Rng::new(4);
        let mut q = Matrix::zeros(3, 4);
        let mut p = Matrix::zeros(3, 4);
        q.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        p.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        let t = 0.3;
        let mut want = 0.0;
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|k| q[(i, k)] * p[(j, k)]).sum::<f64>() / t)
                .collect();
            let denom: f64 = s.iter().map(|v| v.exp()).sum();
            want += -(s[i].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((info_nce_loss(&q, &p, t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn grads_match_finite_differences() {
        let params = small(3);
        let pairs = batch4();
        let batch: Vec<&Pair> = pairs.iter().collect();
        let (_, grads) = loss_and_grads(&params, &batch).unwrap();
        let x0 = params.tensors.flat();
        let fd = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.tensors.set_flat(x);
                loss_and_grads(&p, &batch).unwrap().0
            },
            &x0,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&grads.flat(), &fd, 1e-6);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn collapsed_batch_has_zero_proj_grad() {
        let params = small(5);
        let pair = Pair::new("same text", "same text");
        let batch = vec![&pair; 4];
        let (loss, grads) = loss_and_grads(&params, &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grads.proj.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn one_step_descends() {
        let mut params = small(6);
        let pairs = batch4();
        let batch: Vec<&Pair> = pairs.iter().collect();
        let mut opt = params.new_optimizer(OptimizerKind::sgd(), LrSchedule::constant(0.01));
        let (before, grads) = loss_and_grads(&params, &batch).unwrap();
        apply_grads(&mut params, &grads, &mut opt).unwrap();
        let after = loss_and_grads(&params, &batch).unwrap().0;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn zero_lr_train_step_is_identity() {
        let mut params = small(7);
        let before = params.clone();
        let ds = DomainDataset {
            id: 0,
            name: "d".into(),
            pairs: batch4(),
        };
        let mut opt = params.new_optimizer(OptimizerKind::adam(), LrSchedule::constant(0.0));
        train_step(&mut params, &mut opt, &ds, 4, &mut Rng::new(0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let p = small(8);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ckpt.json");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\":1", "\"format_version\":2");
        fs::write(&path, text).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Version { found: 2, .. })));
    }
}
