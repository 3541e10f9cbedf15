//! Minimal reverse-mode differentiation: dense `f64` tensors, a dynamic
//! tape, and the scalar special functions the Beta log-density needs.
//!
//! Summations run left to right in index order and matrix products
//! accumulate each output element in order of the contracted index, so
//! forward values are bit-identical for identical inputs on a given build.

pub mod special;
mod tape;
mod tensor;

pub use tape::{Gradients, Segments, Tape, Unary, Var};
pub use tensor::{matmul, Tensor};


#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::error::Error;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_rows_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(3, 2, vec![0.0, core::f64::consts::LN_2, 4.0, 4.0, 1001.0, 1000.0]).unwrap();
        let p = tape.softmax_rows(x);
        let v = tape.value(p).to_vec();
        assert!(close(v[0], 1.0 / 3.0, 1e-15) && close(v[1], 2.0 / 3.0, 1e-15));
        assert_eq!(&v[2..4], &[0.5, 0.5]);
        let y = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let py = tape.softmax_rows(y);
        assert_eq!(&v[4..6], tape.value(py));

        let c = tape.constant(1, 3, vec![0.2; 3]).unwrap();
        let pc = tape.softmax_rows(c);
        for &w in tape.value(pc) {
            assert!(close(w, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let b = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let flat = tape.constant(1, 2, vec![5.0, 5.0]).unwrap();
        let y = tape.layer_norm(flat, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let x = tape.constant(1, 2, vec![-1.0, 1.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(close(tape.value(y)[0], -1.0, 1e-10) && close(tape.value(y)[1], 1.0, 1e-10));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut tape = Tape::new();
        let q = tape.constant(1, 4, vec![0.3, -2.0, 1.0, 0.5]).unwrap();
        let out = tape.attention(q, q, q, 2).unwrap();
        assert_eq!(tape.attention_probs(out).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.value(out), tape.value(q));
    }

    #[test]
    fn segmented_attention_matches_separate_calls() {
        let data: alloc::vec::Vec<f64> = (0..5 * 4).map(|i| ((i * 7) % 9) as f64 * 0.2 - 0.8).collect();
        let mut tape = Tape::new();
        let all = tape.constant(5, 4, data.clone()).unwrap();
        let segs = Segments::from_lengths(&[2, 3]).unwrap();
        let joint = tape.attention_segments(all, all, all, 2, &segs).unwrap();
        let first = tape.constant(2, 4, data[..8].to_vec()).unwrap();
        let second = tape.constant(3, 4, data[8..].to_vec()).unwrap();
        let a = tape.attention(first, first, first, 2).unwrap();
        let b = tape.attention(second, second, second, 2).unwrap();
        let mut separate = tape.value(a).to_vec();
        separate.extend_from_slice(tape.value(b));
        assert_eq!(tape.value(joint), separate.as_slice());
        assert!(Segments::from_lengths(&[2, 0]).is_err());
        assert!(tape.attention_segments(all, all, all, 2, &Segments::single(4).unwrap()).is_err());
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn detached_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::scalar(3.0));
        let x = tape.leaf("x", &Tensor::scalar(2.0).with_grad());
        let loss = tape.affine(x, 4.0, 0.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap().data(), &[0.0]);
        assert_eq!(grads.get("x").unwrap().data(), &[4.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn untracked_leaf_is_not_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", &Tensor::scalar(2.0));
        let loss = tape.affine(x, 4.0, 0.0);
        assert!(tape.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::matrix(1, 3, vec![0.1, -0.4, 2.0]).unwrap());
        let s = tape.softplus(w);
        let l = tape.sum(s);
        let first = tape.backward(l).unwrap();
        let second = tape.backward(l).unwrap();
        assert_eq!(first, second);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(3, 4, (0..12).map(|i| (i as f64 * 0.37).fract() - 0.5).collect()).unwrap();
            let a = tape.attention(x, x, x, 2).unwrap();
            let s = tape.gelu(a);
            tape.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension { .. })));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.attention(a, a, a, 2), Err(Error::Dimension { .. })));
        assert!(matches!(tape.periodic(&[], a), Err(Error::Usage(_))));
        let neg = tape.constant(1, 1, vec![-1.0]).unwrap();
        assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
        assert!(matches!(tape.lgamma(neg), Err(Error::Domain { .. })));
    }
}
