//! Adam with bias correction.

use crate::numerics::Tensor;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update to `params` from their accumulated gradients.
    /// Parameters without a gradient buffer are treated as zero-gradient.
    /// Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(TrainError::Optimizer("parameter set changed between steps".into()));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(TrainError::Optimizer(format!(
                        "non-finite gradient {} in parameter {i} at element {j}",
                        g[j]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(x: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(x).with_grad();
        t.accumulate_grad(&[g]);
        t
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        for g in [0.5, -3.0, 1e-3] {
            let mut p = param(1.0, g);
            let mut adam = Adam::new(0.9, 0.999, 1e-8);
            adam.step(&mut [&mut p], 0.01).unwrap();
            let expect = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p.item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = param(2.5, 0.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.item(), 2.5);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = param(1.0, f64::NAN);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        assert!(adam.step(&mut [&mut p], 0.1).is_err());
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
