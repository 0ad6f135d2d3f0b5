//! Dense double-precision tensors and a reverse-mode differentiation tape.
//!
//! Tensors are row-major with at most a leading batch of rows; every
//! primitive on the [`Tape`] works on 2-D `[rows, cols]` views, scalars
//! (shape `[]`) or row vectors (shape `[n]`). The only broadcast is a row
//! vector added to every row of a matrix.

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Row-wise log-softmax over the last dimension, outside of any tape.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.cols() == 0 {
        return Err(Error::Contract("log_softmax needs a non-empty last dimension".into()));
    }
    if !logits.is_finite() {
        return Err(Error::NumericDomain("log_softmax input is not finite".into()));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(logits.cols()) {
        kernels::log_softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let out = log_softmax(&vec_t(&[0.0, 0.0])).unwrap();
        for v in out.data() {
            assert_eq!(*v, 0.5f64.ln());
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        for x in [-700.0, -3.5, 0.0, 12.25, 900.0] {
            let out = log_softmax(&vec_t(&[x; 4])).unwrap();
            for v in out.data() {
                assert!((v - 0.25f64.ln()).abs() < 1e-15, "x={x} v={v}");
            }
        }
    }

    #[test]
    fn log_softmax_matches_direct_summation() {
        // ln(e^z_i / sum e^z_j) with the sum taken directly (no stabilization)
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let out = log_softmax(&vec_t(&z)).unwrap();
        for (o, zi) in out.data().iter().zip(z) {
            let direct = (zi.exp() / denom).ln();
            assert!((o - direct).abs() < 1e-14);
        }
        // frozen values from the same oracle
        let frozen = [-2.407_605_964_444_380, -1.407_605_964_444_380, -0.407_605_964_444_380];
        for (o, f) in out.data().iter().zip(frozen) {
            assert!((o - f).abs() < 1e-14);
        }
        let mass: f64 = out.data().iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        assert!(matches!(
            log_softmax(&vec_t(&[0.0, f64::NAN])),
            Err(crate::Error::NumericDomain(_))
        ));
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[f64::INFINITY, 0.0]));
        assert!(matches!(tape.log_softmax(x), Err(crate::Error::NumericDomain(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let theta = tape.param("theta", vec_t(&[1.0, -2.0])).unwrap();
        let _unused = tape.scale(theta, 3.0).unwrap();
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let theta = tape.param("theta", vec_t(&[1.0, -2.0])).unwrap();
        let sq = tape.mul(theta, theta).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut tape = Tape::new();
        let theta = tape.param("theta", vec_t(&[1.0, -2.0])).unwrap();
        assert!(matches!(tape.backward(theta), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        let mut tape = Tape::new();
        let theta = tape.param("theta", Tensor::scalar(3.0)).unwrap();
        let frozen = tape.stop_gradient(theta).unwrap();
        let prod = tape.mul(frozen, theta).unwrap();
        let grads = tape.backward(prod).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[3.0]);
    }

    #[test]
    fn stop_gradient_of_any_function_is_zero() {
        let mut tape = Tape::new();
        let theta = tape.param("theta", vec_t(&[0.3, -1.2, 2.0])).unwrap();
        let e = tape.exp(theta).unwrap();
        let g = tape.gelu(e).unwrap();
        let frozen = tape.stop_gradient(g).unwrap();
        let loss = tape.sum(frozen).unwrap();
        assert_eq!(tape.value(frozen).unwrap(), tape.value(g).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("theta").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_node_is_a_contract_error() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let a = other.constant(Tensor::scalar(1.0));
        let _ = other.constant(Tensor::scalar(2.0));
        let b = other.constant(Tensor::scalar(2.0));
        let _ = a;
        assert!(matches!(tape.stop_gradient(b), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut tape = Tape::new();
        tape.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(tape.param("w", Tensor::scalar(1.0)).is_err());
    }
}
