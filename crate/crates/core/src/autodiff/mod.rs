//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is define-by-run: every primitive call evaluates eagerly and
//! appends a node. [`Tape::backward`] sweeps the nodes in reverse order
//! from a scalar root and accumulates adjoints into every node that
//! (transitively) depends on a differentiable leaf.

mod tape;
mod tensor;

pub use tape::{grad_wrt_input, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::gelu;
pub(crate) use tensor::matmul_kernel;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let x = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let y = t.forward_op(Primitive::MatMul, &[i, x]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
        assert_eq!(t.value(y).shape(), &[2, 1]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.gelu(x);
        assert_eq!(t.value(y).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![-1.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().wrt(x).unwrap().data(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let r = t.relu(x);
        assert_eq!(t.backward(r).unwrap().wrt(x).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(5.0));
        let p = t.mul(x, y).unwrap();
        assert_eq!(grad_wrt_input(&t, p, x).unwrap().item(), 5.0);
        assert_eq!(grad_wrt_input(&t, p, y).unwrap().item(), 2.0);
    }

    #[test]
    fn gradient_vanishes_at_minimum() {
        let c = Tensor::matrix(1, 2, vec![0.3, -1.2]);
        let mut t = Tape::new();
        let x = t.leaf(c.clone());
        let cv = t.constant(c);
        let d = t.sub(x, cv).unwrap();
        let sq = t.square(d);
        let s = t.sum(sq);
        assert!(grad_wrt_input(&t, s, x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn foreign_var_is_lookup_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(1.0));
        let s = b.square(y);
        assert!(matches!(
            grad_wrt_input(&b, s, x),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::scalar(4.0));
        let x = t.leaf(Tensor::scalar(1.5));
        let p = t.mul(w, x).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 4.0);
        assert_eq!(g.wrt(w).unwrap().item(), 0.0);
    }

    #[test]
    fn broadcast_and_sum_rows_adjoints() {
        let mut t = Tape::new();
        let b = t.leaf(Tensor::from_parts(vec![2], vec![1.0, 2.0]));
        let bb = t.broadcast(b, 3).unwrap();
        let rs = t.sum_rows(bb).unwrap();
        assert_eq!(t.value(rs).data(), &[3.0, 3.0, 3.0]);
        let s = t.sum(rs);
        assert_eq!(t.backward(s).unwrap().wrt(b).unwrap().data(), &[3.0, 3.0]);
    }
}
