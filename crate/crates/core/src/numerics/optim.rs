use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Linear warmup followed by linear decay to zero.
///
/// `decay_steps == 0` disables the decay phase, leaving the rate at `base_lr`
/// once warmup is over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }

    /// Rate used for the step taken after `step` completed steps.
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps == 0 || self.decay_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let remaining = self.decay_steps.saturating_sub(step) as f64;
        let span = (self.decay_steps - self.warmup_steps) as f64;
        (self.base_lr * remaining / span).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments and schedule for a fixed, named list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub step_count: u64,
    names: Vec<String>,
    moment1: Vec<Matrix>,
    moment2: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, tensors: &[(&str, (usize, usize))]) -> Self {
        let zeros = || tensors.iter().map(|(_, (r, c))| Matrix::zeros(*r, *c)).collect();
        Self {
            kind,
            schedule,
            step_count: 0,
            names: tensors.iter().map(|(n, _)| n.to_string()).collect(),
            moment1: zeros(),
            moment2: zeros(),
        }
    }

    /// Effective learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        self.schedule.rate_at(self.step_count)
    }

    pub fn moment1(&self) -> &[Matrix] {
        &self.moment1
    }

    pub fn moment2(&self) -> &[Matrix] {
        &self.moment2
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    fn check(&self, grads: &[&Matrix]) -> Result<()> {
        if grads.len() != self.moment1.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.moment1.len(),
                grads.len()
            )));
        }
        for (k, g) in grads.iter().enumerate() {
            if !g.same_shape(&self.moment1[k]) {
                return Err(Error::Shape(format!(
                    "gradient for `{}` is {:?}, expected {:?}",
                    self.names[k],
                    g.shape(),
                    self.moment1[k].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for `{}`", self.names[k])));
            }
        }
        Ok(())
    }

    /// Advances the moments with `grads` and returns, per tensor, the
    /// direction the parameters should move by at the given rate.
    fn advance(&mut self, grads: &[&Matrix], lr: f64) -> Vec<Matrix> {
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => grads
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    let mut delta = (*g).clone();
                    if momentum != 0.0 {
                        let buf = self.moment1[k].as_mut_slice();
                        for (b, gv) in buf.iter_mut().zip(g.as_slice()) {
                            *b = momentum * *b + gv;
                        }
                        delta = self.moment1[k].clone();
                    }
                    delta.scale(-lr);
                    delta
                })
                .collect(),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                grads
                    .iter()
                    .enumerate()
                    .map(|(k, g)| {
                        let m = self.moment1[k].as_mut_slice();
                        let v = self.moment2[k].as_mut_slice();
                        let mut delta = Matrix::zeros(g.rows(), g.cols());
                        for (((mi, vi), gi), di) in m
                            .iter_mut()
                            .zip(v.iter_mut())
                            .zip(g.as_slice())
                            .zip(delta.as_mut_slice())
                        {
                            *mi = beta1 * *mi + (1.0 - beta1) * gi;
                            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                            let mhat = *mi / bc1;
                            let vhat = *vi / bc2;
                            *di = -lr * mhat / (vhat.sqrt() + eps);
                        }
                        delta
                    })
                    .collect()
            }
        }
    }
}

/// One optimizer step. Returns the learning rate that was applied.
pub fn optimizer_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut OptimizerState) -> Result<f64> {
    state.check(grads)?;
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    let lr = state.current_lr();
    let deltas = state.advance(grads, lr);
    for (p, d) in params.iter_mut().zip(&deltas) {
        p.axpy(1.0, d)?;
    }
    Ok(lr)
}

/// Advances optimizer moments as if `pseudo_grad` had been observed, without
/// touching any parameters.
pub fn optimizer_state_update(state: &mut OptimizerState, pseudo_grad: &[&Matrix]) -> Result<()> {
    state.check(pseudo_grad)?;
    let lr = state.current_lr();
    state.advance(pseudo_grad, lr);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: OptimizerKind, lr: f64, n: usize) -> OptimizerState {
        OptimizerState::new(kind, LrSchedule::constant(lr), &[("x", (1, n))])
    }

    #[test]
    fn sgd_single_step() {
        let mut st = single(OptimizerKind::sgd(), 0.1, 1);
        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let lr = optimizer_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(lr, 0.1);
        assert!((p[(0, 0)] - 0.8).abs() < 1e-15);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_grad_leaves_params() {
        for kind in [OptimizerKind::sgd(), OptimizerKind::SgdMomentum { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut st = single(kind, 0.1, 3);
            let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
            let before = p.clone();
            let g = Matrix::zeros(1, 3);
            optimizer_step(&mut [&mut p], &[&g], &mut st).unwrap();
            assert_eq!(p, before, "{kind:?}");
        }
    }

    #[test]
    fn rejects_non_finite_and_names_tensor() {
        let mut st = single(OptimizerKind::adam(), 0.1, 2);
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let err = optimizer_step(&mut [&mut p], &[&g], &mut st).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut st = single(OptimizerKind::sgd(), 0.1, 2);
        let mut p = Matrix::zeros(1, 3);
        let g = Matrix::zeros(1, 3);
        assert!(optimizer_step(&mut [&mut p], &[&g], &mut st).is_err());
        assert!(optimizer_state_update(&mut st, &[&g]).is_err());
    }

    #[test]
    fn state_update_without_momentum_only_counts() {
        let mut st = single(OptimizerKind::sgd(), 0.1, 2);
        let before = st.clone();
        let g = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        optimizer_state_update(&mut st, &[&g]).unwrap();
        assert_eq!(st.step_count, 1);
        assert_eq!(st.moment1(), before.moment1());
        assert_eq!(st.moment2(), before.moment2());
    }

    #[test]
    fn state_update_adam_moments() {
        let mut st = single(OptimizerKind::adam(), 0.1, 2);
        let g = Matrix::from_vec(1, 2, vec![1.0, -3.0]).unwrap();
        optimizer_state_update(&mut st, &[&g]).unwrap();
        let m = st.moment1()[0].as_slice().to_vec();
        assert_eq!(m, vec![(1.0 - 0.9) * 1.0, (1.0 - 0.9) * -3.0]);
        let v = st.moment2()[0].as_slice().to_vec();
        assert!((v[0] - 0.001).abs() < 1e-18 && (v[1] - 0.009).abs() < 1e-17);
        // zero pseudo-gradient decays moments by the beta factors
        let z = Matrix::zeros(1, 2);
        optimizer_state_update(&mut st, &[&z]).unwrap();
        assert_eq!(st.moment1()[0].as_slice(), &[0.9 * m[0], 0.9 * m[1]]);
        assert_eq!(st.moment2()[0].as_slice(), &[0.999 * v[0], 0.999 * v[1]]);
    }

    #[test]
    fn schedule_warmup_then_decay() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 4,
            decay_steps: 12,
        };
        assert_eq!(s.rate_at(0), 0.25);
        assert_eq!(s.rate_at(3), 1.0);
        assert_eq!(s.rate_at(4), 1.0);
        assert_eq!(s.rate_at(8), 0.5);
        assert_eq!(s.rate_at(12), 0.0);
        assert_eq!(s.rate_at(50), 0.0);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut st = single(OptimizerKind::sgd(), 0.1, 3);
        let mut x = Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let mut f = x.dot(&x).unwrap();
        for _ in 0..100 {
            let mut g = x.clone();
            g.scale(2.0);
            optimizer_step(&mut [&mut x], &[&g], &mut st).unwrap();
            let f2 = x.dot(&x).unwrap();
            assert!(f2 < f);
            f = f2;
        }
    }
}
