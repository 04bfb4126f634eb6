//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once from the end.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise distance used by [`Graph::masked_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distance {
    L1,
    L2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu {
        x: Var,
        deriv: Vec<f64>,
    },
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Mean(Var),
    Softmax(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<usize>,
        k_segs: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaskedDistance {
        a: Var,
        b: Var,
        kind: Distance,
        row_mask: Vec<bool>,
        count: usize,
    },
    Combine {
        vocal: Var,
        mixture: Var,
        consistency: Var,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// A single forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not require grad
    /// or lies on no path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense vector, zeros when unreachable.
    pub fn dense(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    /// Adds the gradient of `v` into `target.grad` when `target` is trainable.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if !target.requires_grad() {
            return;
        }
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
}

fn is_matrix(shape: &[usize]) -> bool {
    shape.len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records `t` as a leaf. Its `requires_grad` flag decides whether the
    /// leaf receives a gradient.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Copies a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if !is_matrix(&na.shape) || !is_matrix(&nb.shape) || na.shape[1] != nb.shape[0] {
            return Err(NumericsError::shape("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&na.value, &nb.value, &mut out, m, k, n);
        let ng = na.needs_grad || nb.needs_grad;
        drop(nodes);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if !is_matrix(&na.shape) || !is_matrix(&nb.shape) || na.shape[1] != nb.shape[1] {
            return Err(NumericsError::shape("matmul_t", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_t_acc(&na.value, &nb.value, &mut out, m, k, n);
        let ng = na.needs_grad || nb.needs_grad;
        drop(nodes);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        if !is_matrix(&na.shape) {
            return Err(NumericsError::Contract(format!(
                "transpose needs a matrix, got {:?}",
                na.shape
            )));
        }
        let (m, n) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = na.value[i * n + j];
            }
        }
        let ng = na.needs_grad;
        drop(nodes);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(NumericsError::shape(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        drop(nodes);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out = na.value.iter().map(|x| x * c).collect();
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        drop(nodes);
        self.push(shape, out, Op::Scale(a, c), ng)
    }

    /// Adds a length-`n` vector to every row of `a: [..×n]`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nr) = (&nodes[a.0], &nodes[row.0]);
        let n = na.cols();
        if nr.value.len() != n || na.shape.is_empty() {
            return Err(NumericsError::shape("add_row", &na.shape, &nr.shape));
        }
        let mut out = na.value.clone();
        for r in out.chunks_mut(n) {
            r.iter_mut().zip(&nr.value).for_each(|(o, b)| *o += b);
        }
        let shape = na.shape.clone();
        let ng = na.needs_grad || nr.needs_grad;
        drop(nodes);
        Ok(self.push(shape, out, Op::AddRow(a, row), ng))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out = na.value.iter().map(|&x| f(x)).collect();
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        drop(nodes);
        self.push(shape, out, op, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        let (out, deriv) = if ng {
            na.value.iter().map(|&x| kernels::gelu_with_grad(x)).unzip()
        } else {
            (na.value.iter().map(|&x| kernels::gelu(x)).collect(), Vec::new())
        };
        drop(nodes);
        self.push(shape, out, Op::Gelu { x: a, deriv }, ng)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the learnable `gain` and `bias` (both of length `cols(x)`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (nx, ng_, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
        let n = nx.cols();
        if ng_.value.len() != n || nb.value.len() != n || nx.shape.is_empty() {
            return Err(NumericsError::shape("layer_norm", &nx.shape, &ng_.shape));
        }
        let rows = nx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &nx.value[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * ng_.value[c] + nb.value[c];
            }
        }
        let shape = nx.shape.clone();
        let needs = nx.needs_grad || ng_.needs_grad || nb.needs_grad;
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Gathers rows of `table: [V×H]` for each id.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nt = &nodes[table.0];
        if !is_matrix(&nt.shape) {
            return Err(NumericsError::Contract(format!(
                "embedding table must be a matrix, got {:?}",
                nt.shape
            )));
        }
        let (v, h) = (nt.shape[0], nt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&nt.value[id * h..(id + 1) * h]);
        }
        let ng = nt.needs_grad;
        drop(nodes);
        Ok(self.push(
            vec![ids.len(), h],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat_rows of nothing".into()))?;
        let cols = nodes[first.0].cols();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut ng = false;
        for p in parts {
            let np = &nodes[p.0];
            if !is_matrix(&np.shape) || np.shape[1] != cols {
                return Err(NumericsError::shape(
                    "concat_rows",
                    &nodes[first.0].shape,
                    &np.shape,
                ));
            }
            rows += np.shape[0];
            out.extend_from_slice(&np.value);
            ng |= np.needs_grad;
        }
        drop(nodes);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat_cols of nothing".into()))?;
        let rows = nodes[first.0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut ng = false;
        for p in parts {
            let np = &nodes[p.0];
            if !is_matrix(&np.shape) || np.shape[0] != rows {
                return Err(NumericsError::shape(
                    "concat_cols",
                    &nodes[first.0].shape,
                    &np.shape,
                ));
            }
            widths.push(np.shape[1]);
            ng |= np.needs_grad;
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = &nodes[p.0].value;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        drop(nodes);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        if !is_matrix(&nx.shape) || start + len > nx.shape[1] {
            return Err(NumericsError::Contract(format!(
                "slice_cols {}..{} out of range for {:?}",
                start,
                start + len,
                nx.shape
            )));
        }
        let (rows, cols) = (nx.shape[0], nx.shape[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&nx.value[r * cols + start..r * cols + start + len]);
        }
        let ng = nx.needs_grad;
        drop(nodes);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    /// Mean over every element, as a scalar.
    pub fn mean(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let m = if na.value.is_empty() {
            0.0
        } else {
            na.value.iter().sum::<f64>() / na.value.len() as f64
        };
        let ng = na.needs_grad;
        drop(nodes);
        self.push(Vec::new(), vec![m], Op::Mean(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row softmax of a square score matrix where row `i` only attends to
    /// columns `0..=i`.
    pub fn causal_softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q: [Σlq×d]`, `k, v: [Σlk×d]`. Query segment `s` (of length
    /// `q_segs[s]`) attends only to key segment `s` (length `k_segs[s]`).
    /// Heads split the `d` columns evenly. With `causal`, segments must be
    /// square and query `i` sees keys `0..=i`.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &[usize],
        k_segs: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
        if nq.shape.len() != 2 || nk.shape != nv.shape || nk.shape.len() != 2 || nq.shape[1] != nk.shape[1] {
            return Err(NumericsError::Shape {
                op: "segment_attention",
                left: nq.shape.clone(),
                right: nk.shape.clone(),
            });
        }
        let d = nq.shape[1];
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Contract(format!("{heads} heads do not divide width {d}")));
        }
        if q_segs.len() != k_segs.len()
            || q_segs.iter().sum::<usize>() != nq.shape[0]
            || k_segs.iter().sum::<usize>() != nk.shape[0]
        {
            return Err(NumericsError::Contract(format!(
                "segments {q_segs:?}/{k_segs:?} do not cover {} query and {} key rows",
                nq.shape[0], nk.shape[0]
            )));
        }
        if causal && q_segs != k_segs {
            return Err(NumericsError::Contract("causal attention needs square segments".into()));
        }
        if k_segs.iter().zip(q_segs).any(|(&lk, &lq)| lk == 0 && lq > 0) {
            return Err(NumericsError::Contract("queries cannot attend to an empty key segment".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nq.shape[0] * d];
        let mut probs = Vec::new();
        let (mut qo, mut ko) = (0, 0);
        for (&lq, &lk) in q_segs.iter().zip(k_segs) {
            for h in 0..heads {
                let qh = gather_head(&nq.value, qo, lq, d, h * dh, dh);
                let kh = gather_head(&nk.value, ko, lk, d, h * dh, dh);
                let vh = gather_head(&nv.value, ko, lk, d, h * dh, dh);
                let mut p = vec![0.0; lq * lk];
                kernels::matmul_t_acc(&qh, &kh, &mut p, lq, dh, lk);
                p.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_rows(&mut p, lk, causal);
                let mut oh = vec![0.0; lq * dh];
                kernels::matmul_acc(&p, &vh, &mut oh, lq, lk, dh);
                scatter_head(&mut out, &oh, qo, lq, d, h * dh, dh);
                probs.extend_from_slice(&p);
            }
            qo += lq;
            ko += lk;
        }
        let shape = nq.shape.clone();
        let ng = nq.needs_grad || nk.needs_grad || nv.needs_grad;
        drop(nodes);
        let op = Op::SegmentAttention {
            q,
            k,
            v,
            heads,
            q_segs: q_segs.to_vec(),
            k_segs: k_segs.to_vec(),
            probs,
        };
        Ok(self.push(shape, out, op, ng))
    }

    fn softmax_impl(&self, a: Var, causal: bool) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        if na.shape.is_empty() || na.cols() == 0 {
            return Err(NumericsError::Contract(format!(
                "softmax needs a non-empty last axis, got {:?}",
                na.shape
            )));
        }
        let mut out = na.value.clone();
        kernels::softmax_rows(&mut out, na.cols(), causal);
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        drop(nodes);
        Ok(self.push(shape, out, Op::Softmax(a), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits: [T×V]`. Positions whose target equals `ignore_index` are
    /// excluded; if every position is ignored the loss is 0.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nl = &nodes[logits.0];
        if !is_matrix(&nl.shape) || nl.shape[0] != targets.len() {
            return Err(NumericsError::shape(
                "cross_entropy",
                &nl.shape,
                &[targets.len()],
            ));
        }
        let v = nl.shape[1];
        let mut kept = Vec::with_capacity(targets.len());
        for &t in targets {
            if Some(t) == ignore_index {
                kept.push(None);
            } else if t >= v {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            } else {
                kept.push(Some(t));
            }
        }
        let mut probs = nl.value.clone();
        kernels::softmax_rows(&mut probs, v, false);
        let count = kept.iter().flatten().count();
        let mut loss = 0.0;
        for (r, t) in kept.iter().enumerate() {
            if let Some(t) = *t {
                let row = &nl.value[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let ng = nl.needs_grad;
        drop(nodes);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Contract(format!(
                "dropout rate must lie in [0, 1), got {p}"
            )));
        }
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..nx.value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = nx.value.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let (shape, ng) = (nx.shape.clone(), nx.needs_grad);
        drop(nodes);
        Ok(self.push(shape, out, Op::Dropout { x, mask }, ng))
    }

    /// Mean L1 or squared-L2 distance between `a` and `b` over the rows
    /// flagged in `row_mask`. An empty mask yields 0.
    pub fn masked_distance(
        &self,
        a: Var,
        b: Var,
        kind: Distance,
        row_mask: &[bool],
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(NumericsError::shape("masked_distance", &na.shape, &nb.shape));
        }
        if row_mask.len() != na.rows() {
            return Err(NumericsError::shape(
                "masked_distance mask",
                &na.shape,
                &[row_mask.len()],
            ));
        }
        let cols = na.cols();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &keep) in row_mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for c in r * cols..(r + 1) * cols {
                let d = na.value[c] - nb.value[c];
                total += match kind {
                    Distance::L1 => d.abs(),
                    Distance::L2 => d * d,
                };
            }
            count += cols;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = na.needs_grad || nb.needs_grad;
        drop(nodes);
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::MaskedDistance {
                a,
                b,
                kind,
                row_mask: row_mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// `(vocal + mixture)/2 + weight·consistency` over scalar nodes.
    pub fn combine(&self, vocal: Var, mixture: Var, consistency: Var, weight: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        for v in [vocal, mixture, consistency] {
            if nodes[v.0].value.len() != 1 {
                return Err(NumericsError::NotScalar {
                    shape: nodes[v.0].shape.clone(),
                });
            }
        }
        let value = combine_values(
            nodes[vocal.0].value[0],
            nodes[mixture.0].value[0],
            nodes[consistency.0].value[0],
            weight,
        );
        let ng = nodes[vocal.0].needs_grad
            || nodes[mixture.0].needs_grad
            || nodes[consistency.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::Combine {
                vocal,
                mixture,
                consistency,
                weight,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        // Only leaves keep gradients; interior buffers are dropped here.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    /// Runs `backward` and accumulates leaf gradients into the given tensors.
    pub fn backward_into(&self, loss: Var, leaves: &mut [(Var, &mut Tensor)]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (v, t) in leaves.iter_mut() {
            grads.accumulate_into(*v, t);
        }
        Ok(())
    }
}

/// Shared arithmetic for [`Graph::combine`] so reported and differentiated
/// totals agree bit for bit.
pub fn combine_values(vocal: f64, mixture: f64, consistency: f64, weight: f64) -> f64 {
    (vocal + mixture) / 2.0 + weight * consistency
}

/// Rows `row0..row0+rows`, columns `col0..col0+width` of a `[_×d]` buffer.
fn gather_head(src: &[f64], row0: usize, rows: usize, d: usize, col0: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src[r * d + col0..r * d + col0 + width]);
    }
    out
}

/// Adds a `[rows×width]` block into `dst` at the given offset.
fn scatter_head(dst: &mut [f64], block: &[f64], row0: usize, rows: usize, d: usize, col0: usize, width: usize) {
    for r in 0..rows {
        let at = (row0 + r) * d + col0;
        add_into(&mut dst[at..at + width], &block[r * width..(r + 1) * width]);
    }
}

fn acc_with(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let n = &nodes[target.0];
    if !n.needs_grad {
        return;
    }
    let buf = grads[target.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            acc_with(nodes, grads, *a, |ga| {
                kernels::matmul_t_acc(g, &nb.value, ga, m, n, k)
            });
            acc_with(nodes, grads, *b, |gb| {
                kernels::t_matmul_acc(&na.value, g, gb, m, k, n)
            });
        }
        Op::MatMulT(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[0]);
            acc_with(nodes, grads, *a, |ga| {
                kernels::matmul_acc(g, &nb.value, ga, m, n, k)
            });
            acc_with(nodes, grads, *b, |gb| {
                kernels::t_matmul_acc(g, &na.value, gb, m, n, k)
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            acc_with(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, |ga| add_into(ga, g));
            acc_with(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, |ga| add_into(ga, g));
            acc_with(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            acc_with(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            acc_with(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => {
            acc_with(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += c * d)
            });
        }
        Op::AddRow(a, row) => {
            acc_with(nodes, grads, *a, |ga| add_into(ga, g));
            let n = nodes[row.0].value.len();
            acc_with(nodes, grads, *row, |gr| {
                for r in g.chunks(n) {
                    add_into(gr, r);
                }
            });
        }
        Op::Gelu { x, deriv } => {
            acc_with(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * deriv[i];
                }
            });
        }
        Op::Relu(a) => {
            let va = &nodes[a.0].value;
            acc_with(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = nodes[gain.0].value.len();
            let gv = &nodes[gain.0].value;
            acc_with(nodes, grads, *gain, |gg| {
                for (r, gr) in g.chunks(n).enumerate() {
                    for c in 0..n {
                        gg[c] += gr[c] * xhat[r * n + c];
                    }
                }
            });
            acc_with(nodes, grads, *bias, |gb| {
                for gr in g.chunks(n) {
                    add_into(gb, gr);
                }
            });
            acc_with(nodes, grads, *x, |gx| {
                let nf = n as f64;
                let mut dxhat = vec![0.0; n];
                for (r, gr) in g.chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut sum = 0.0;
                    let mut sum_h = 0.0;
                    for c in 0..n {
                        dxhat[c] = gr[c] * gv[c];
                        sum += dxhat[c];
                        sum_h += dxhat[c] * h[c];
                    }
                    let inv = inv_std[r];
                    for c in 0..n {
                        gx[r * n + c] += inv / nf * (nf * dxhat[c] - sum - h[c] * sum_h);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let h = nodes[table.0].shape[1];
            acc_with(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                acc_with(nodes, grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.shape[1];
            let rows = node.shape[0];
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                acc_with(nodes, grads, *p, |gp| {
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let cols = nodes[x.0].shape[1];
            let (rows, len) = (node.shape[0], node.shape[1]);
            acc_with(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            });
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len().max(1) as f64;
            acc_with(nodes, grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let n = node.cols();
            acc_with(nodes, grads, *a, |ga| {
                for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for c in 0..n {
                        gar[c] += yr[c] * (gr[c] - s);
                    }
                }
            });
        }
        Op::SegmentAttention {
            q,
            k,
            v,
            heads,
            q_segs,
            k_segs,
            probs,
        } => {
            let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
            let d = nq.shape[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; nq.value.len()];
            let mut dk = vec![0.0; nk.value.len()];
            let mut dv = vec![0.0; nv.value.len()];
            let (mut qo, mut ko, mut po) = (0, 0, 0);
            for (&lq, &lk) in q_segs.iter().zip(k_segs) {
                for h in 0..*heads {
                    let p = &probs[po..po + lq * lk];
                    po += lq * lk;
                    let go = gather_head(g, qo, lq, d, h * dh, dh);
                    let qh = gather_head(&nq.value, qo, lq, d, h * dh, dh);
                    let kh = gather_head(&nk.value, ko, lk, d, h * dh, dh);
                    let vh = gather_head(&nv.value, ko, lk, d, h * dh, dh);
                    let mut dvh = vec![0.0; lk * dh];
                    kernels::t_matmul_acc(p, &go, &mut dvh, lq, lk, dh);
                    let mut ds = vec![0.0; lq * lk];
                    kernels::matmul_t_acc(&go, &vh, &mut ds, lq, dh, lk);
                    for (dr, pr) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                        let s = kernels::dot(dr, pr);
                        for c in 0..lk {
                            dr[c] = pr[c] * (dr[c] - s) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; lq * dh];
                    kernels::matmul_acc(&ds, &kh, &mut dqh, lq, lk, dh);
                    let mut dkh = vec![0.0; lk * dh];
                    kernels::t_matmul_acc(&ds, &qh, &mut dkh, lq, lk, dh);
                    scatter_head(&mut dq, &dqh, qo, lq, d, h * dh, dh);
                    scatter_head(&mut dk, &dkh, ko, lk, d, h * dh, dh);
                    scatter_head(&mut dv, &dvh, ko, lk, d, h * dh, dh);
                }
                qo += lq;
                ko += lk;
            }
            acc_with(nodes, grads, *q, |gq| add_into(gq, &dq));
            acc_with(nodes, grads, *k, |gk| add_into(gk, &dk));
            acc_with(nodes, grads, *v, |gv| add_into(gv, &dv));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let v = nodes[logits.0].shape[1];
            let scale = g[0] / *count as f64;
            acc_with(nodes, grads, *logits, |gl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..v {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * v + c] += scale * (probs[r * v + c] - onehot);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            acc_with(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            });
        }
        Op::MaskedDistance {
            a,
            b,
            kind,
            row_mask,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let cols = nodes[a.0].cols();
            let scale = g[0] / *count as f64;
            let local = |i: usize| {
                let d = va[i] - vb[i];
                match kind {
                    Distance::L1 => {
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    }
                    Distance::L2 => 2.0 * d * scale,
                }
            };
            acc_with(nodes, grads, *a, |ga| {
                for (r, &keep) in row_mask.iter().enumerate() {
                    if keep {
                        for i in r * cols..(r + 1) * cols {
                            ga[i] += local(i);
                        }
                    }
                }
            });
            acc_with(nodes, grads, *b, |gb| {
                for (r, &keep) in row_mask.iter().enumerate() {
                    if keep {
                        for i in r * cols..(r + 1) * cols {
                            gb[i] -= local(i);
                        }
                    }
                }
            });
        }
        Op::Combine {
            vocal,
            mixture,
            consistency,
            weight,
        } => {
            acc_with(nodes, grads, *vocal, |gv| gv[0] += g[0] / 2.0);
            acc_with(nodes, grads, *mixture, |gm| gm[0] += g[0] / 2.0);
            acc_with(nodes, grads, *consistency, |gc| gc[0] += weight * g[0]);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
