//! Adaptive-moment gradient descent with warm-up and cosine decay.

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter block {block} ({name})")]
    NonFiniteGradient { block: usize, name: String },
    #[error("gradient shape {got_rows}x{got_cols} does not match parameter block {block} ({rows}x{cols})")]
    ShapeMismatch {
        block: usize,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("expected {expected} gradient blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
}

/// Learning-rate schedule: linear warm-up to `base`, then cosine decay
/// towards `base * floor_fraction` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_fraction: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup_steps: 0,
            total_steps: 0,
            floor_fraction: 1.0,
        }
    }

    pub fn cosine(base: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule {
            base,
            warmup_steps,
            total_steps,
            floor_fraction: 0.05,
        }
    }

    /// Rate for step `step` (1-based, the value used by that update).
    pub fn rate(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.base;
        }
        if step >= self.total_steps {
            return self.base * self.floor_fraction.clamp(0.0, 1.0);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let floor = self.floor_fraction.clamp(0.0, 1.0);
        self.base * (floor + (1.0 - floor) * cos)
    }
}

/// Adam over a fixed list of parameter blocks.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step_count: u64,
}

impl Adam {
    pub fn new(shapes: Vec<(usize, usize)>, schedule: LrSchedule) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            first: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `params` and `grads` must match the construction shapes.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        self.step_named(params, grads, |i| format!("block {i}"))
    }

    /// Like [`Adam::step`] with caller-provided block names for diagnostics.
    pub fn step_named(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        name: impl Fn(usize) -> String,
    ) -> Result<(), OptimError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(OptimError::BlockCount {
                expected: self.first.len(),
                got: params.len().max(grads.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(OptimError::ShapeMismatch {
                    block: i,
                    rows: params[i].rows(),
                    cols: params[i].cols(),
                    got_rows: g.rows(),
                    got_cols: g.cols(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient {
                    block: i,
                    name: name(i),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.schedule.rate(t);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..grads.len() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors, exposed for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.first, &self.second, self.step_count)
    }

    pub fn restore(&mut self, first: Vec<Tensor>, second: Vec<Tensor>, step_count: u64) {
        assert_eq!(first.len(), self.first.len());
        assert_eq!(second.len(), self.second.len());
        self.first = first;
        self.second = second;
        self.step_count = step_count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let before = p.clone();
        let mut adam = Adam::new(vec![(2, 2)], LrSchedule::constant(0.1));
        adam.step(&mut [&mut p], &[Tensor::zeros(2, 2)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_converges() {
        // Minimize (p - 3)^2 from p = 0.
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(vec![(1, 1)], LrSchedule::constant(0.1));
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (p.as_scalar() - 3.0));
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(
            (p.as_scalar() - 3.0).abs() < 1e-2,
            "p = {} after 500 steps",
            p.as_scalar()
        );
    }

    #[test]
    fn step_counter_counts_calls() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(vec![(1, 1)], LrSchedule::constant(0.1));
        for _ in 0..7 {
            adam.step(&mut [&mut p], &[Tensor::scalar(0.1)]).unwrap();
        }
        assert_eq!(adam.step_count(), 7);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = Tensor::scalar(0.0);
        let mut q = Tensor::scalar(0.0);
        let mut adam = Adam::new(vec![(1, 1), (1, 1)], LrSchedule::constant(0.1));
        let err = adam
            .step_named(
                &mut [&mut p, &mut q],
                &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)],
                |i| format!("net.layer{i}"),
            )
            .unwrap_err();
        assert!(err.to_string().contains("net.layer1"), "{err}");
    }

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule::cosine(1e-3, 100, 1000);
        assert!((s.rate(1) - 1e-5).abs() < 1e-12);
        assert!((s.rate(100) - 1e-3).abs() < 1e-12);
        assert!(s.rate(550) < 1e-3);
        assert!(s.rate(550) > s.rate(999));
        assert!(s.rate(2000) >= 1e-3 * 0.05 - 1e-15);
    }
}
