//! Low-rank adapters attached to frozen linear weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Graph, NumericsError, Tensor, Var};

use super::config::LoraConfig;

/// Trainable delta `(alpha/rank)·B·A` on a frozen `[d_out×d_in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[rank×d_in]`, Gaussian init.
    pub a: Tensor,
    /// `[d_out×rank]`, zero init.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let a: Vec<f64> = (0..cfg.rank * d_in).map(|_| normal.sample(rng)).collect();
        Self {
            a: Tensor::new(vec![cfg.rank, d_in], a).expect("shape matches").with_grad(),
            b: Tensor::zeros(vec![d_out, cfg.rank]).with_grad(),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn num_parameters(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(alpha/rank)·B·A` as a dense `[d_out×d_in]` matrix.
    pub fn delta(&self) -> Tensor {
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank);
        let mut out = vec![0.0; d_out * d_in];
        crate::numerics::kernels::matmul_acc(self.b.data(), self.a.data(), &mut out, d_out, r, d_in);
        let s = self.scaling();
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new(vec![d_out, d_in], out).expect("shape matches")
    }

    /// `W + (alpha/rank)·B·A`.
    pub fn merged_weight(&self, weight: &Tensor) -> Result<Tensor, NumericsError> {
        let delta = self.delta();
        if weight.shape() != delta.shape() {
            return Err(NumericsError::Shape {
                op: "merge",
                left: weight.shape().to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        let data = weight.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
        Tensor::new(weight.shape().to_vec(), data)
    }
}

/// Records `x·Wᵀ + bias + (alpha/rank)·(drop(x)·Aᵀ)·Bᵀ` on `graph`.
///
/// Dropout only touches the adapter branch and only when `rng` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_lora_linear(
    graph: &Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    adapter: Option<(Var, Var, &LoraAdapter)>,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var, NumericsError> {
    let mut out = graph.matmul_t(x, weight)?;
    if let Some(b) = bias {
        out = graph.add_row(out, b)?;
    }
    if let Some((a, b, meta)) = adapter {
        let input = match rng {
            Some(rng) if meta.dropout > 0.0 => graph.dropout(x, meta.dropout, rng)?,
            _ => x,
        };
        let low = graph.matmul_t(input, a)?;
        let delta = graph.matmul_t(low, b)?;
        let delta = graph.scale(delta, meta.scaling());
        out = graph.add(out, delta)?;
    }
    Ok(out)
}

/// Adapted linear map on concrete tensors: `x: [n×d_in]`, `weight: [d_out×d_in]`.
pub fn lora_linear(
    adapter: &LoraAdapter,
    weight: &Tensor,
    x: &Tensor,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Tensor, NumericsError> {
    let g = Graph::new();
    let xv = g.leaf(x);
    let wv = g.leaf(weight);
    let av = g.leaf(&adapter.a);
    let bv = g.leaf(&adapter.b);
    let out = record_lora_linear(&g, xv, wv, None, Some((av, bv, adapter)), rng)?;
    Ok(g.tensor(out))
}
