//! Dense `f64` tensors and a reverse-mode autodiff graph.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{combine_values, Distance, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Contract(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Self::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let g = Graph::new();
        let a = g.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.leaf(&mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), vec![19.0, 22.0, 43.0, 50.0]);

        let one = g.leaf(&mat(&[&[2.0]]));
        let three = g.leaf(&mat(&[&[3.0]]));
        assert_eq!(g.value(g.matmul(one, three).unwrap()), vec![6.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let g = Graph::new();
        let i = g.leaf(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.leaf(&mat(&[&[0.3, -1.5], &[2.25, 7.0]]));
        assert_eq!(g.value(g.matmul(i, m).unwrap()), g.value(m));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]));
        let b = g.leaf(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] and [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let x = g.constant(vec![4], vec![0.0; 4]).unwrap();
        assert_eq!(g.value(g.softmax(x).unwrap()), vec![0.25; 4]);

        let y = g.constant(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let p = g.value(g.softmax(y).unwrap());
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let g = Graph::new();
        let x = g.constant(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let shifted = g.constant(vec![1, 3], vec![1001.0, 998.0, 1000.5]).unwrap();
        let a = g.value(g.softmax(x).unwrap());
        let b = g.value(g.softmax(shifted).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let g = Graph::new();
        let logits = g.constant(vec![3, 4], vec![0.0; 12]).unwrap();
        let ce = g.cross_entropy(logits, &[0, 3, 2], None).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);

        let mut sharp = vec![0.0; 4];
        sharp[2] = 1000.0;
        let logits = g.constant(vec![1, 4], sharp).unwrap();
        let ce = g.cross_entropy(logits, &[2], None).unwrap();
        assert!(g.scalar(ce) < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let g = Graph::new();
        let logits = g.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[4], None),
            Err(NumericsError::Index { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let g = Graph::new();
        let logits = g.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 1.0, -1.0]).unwrap().with_grad());
        let ce = g.cross_entropy(logits, &[0, 0], Some(0)).unwrap();
        assert_eq!(g.scalar(ce), 0.0);
        let grads = g.backward(ce).unwrap();
        assert!(grads.dense(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient_and_constant_loss() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let sq = g.mul(x, x).unwrap();
        assert_eq!(g.backward(sq).unwrap().dense(x), vec![6.0]);

        let c = g.constant(Vec::new(), vec![5.0]).unwrap();
        assert_eq!(g.backward(c).unwrap().dense(x), vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(g.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn leaf_gradients_accumulate_across_backward_calls() {
        let mut w = Tensor::scalar(2.0).with_grad();
        for _ in 0..2 {
            let g = Graph::new();
            let x = g.leaf(&w);
            let y = g.mul(x, x).unwrap();
            g.backward_into(y, &mut [(x, &mut w)]).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[8.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let g = Graph::new();
        let frozen = g.leaf(&Tensor::scalar(2.0));
        let live = g.leaf(&Tensor::scalar(3.0).with_grad());
        let y = g.mul(frozen, live).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(live).unwrap(), &[2.0]);
    }

    #[test]
    fn masked_distance_hand_values() {
        let g = Graph::new();
        let a = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![1, 2], vec![2.0, 4.0]).unwrap();
        let l1 = g.masked_distance(a, b, Distance::L1, &[true]).unwrap();
        let l2 = g.masked_distance(a, b, Distance::L2, &[true]).unwrap();
        assert_eq!(g.scalar(l1), 1.5);
        assert_eq!(g.scalar(l2), 2.5);
        let none = g.masked_distance(a, b, Distance::L2, &[false]).unwrap();
        assert_eq!(g.scalar(none), 0.0);
    }
}
