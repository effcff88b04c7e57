//! Dense matrices, parameters, the shared RNG and the gradient tape.

mod matrix;
mod param;
mod rng;
mod tape;

pub use matrix::Matrix;
pub use param::{Parameter, PrecisionClass};
pub use rng::{Purpose, Rng};
pub use tape::{gelu, softmax_rows, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Matrix::from_rows(&[&[1.0], &[-2.0], &[3.5]]);
        assert_eq!(Matrix::identity(3).matmul(&x).unwrap(), x);

        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::row_vector(&[4.0, 4.0, 4.0]));
        for v in s.as_slice() {
            assert!(approx(*v, 1.0 / 3.0, 1e-15));
        }
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 2f64.ln()]));
        assert!(approx(s.get(0, 0), 1.0 / 3.0, 1e-15));
        assert!(approx(s.get(0, 1), 2.0 / 3.0, 1e-15));

        let x = Matrix::row_vector(&[0.3, -1.2, 2.0, 0.0]);
        let shifted = x.map(|v| v + 123.4);
        assert!(softmax_rows(&x).max_abs_diff(&softmax_rows(&shifted)) < 1e-14);
    }

    #[test]
    fn layer_norm_degenerate_and_normalized_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[&[2.0, 2.0, 2.0], &[-1.0, 1.0, 0.0]])).unwrap();
        let g = tape.constant(Matrix::filled(1, 3, 1.0)).unwrap();
        let b = tape.constant(Matrix::zeros(1, 3)).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).row(0).iter().all(|v| *v == 0.0));

        let x = tape.constant(Matrix::row_vector(&[-1.0, 1.0])).unwrap();
        let g = tape.constant(Matrix::filled(1, 2, 1.0)).unwrap();
        let b = tape.constant(Matrix::zeros(1, 2)).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        assert!(approx(tape.value(y).get(0, 0), -1.0, 1e-12));
        assert!(approx(tape.value(y).get(0, 1), 1.0, 1e-12));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(approx(gelu(10.0), 10.0, 1e-6));
        let h = 1e-6;
        let d = (gelu(h) - gelu(-h)) / (2.0 * h);
        assert!(approx(d, 0.5, 1e-9));
    }

    #[test]
    fn backward_linear_case_and_frozen_contract() {
        // loss = sum(W·x): d/dW[i][j] = x[j] for every row i.
        let x_vals = [0.5, -1.0, 2.0];
        let mut w = Parameter::new("w", Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1));
        let mut tape = Tape::new();
        let wv = tape.param(&w).unwrap();
        let xv = tape.constant(Matrix::from_rows(&[&[0.5], &[-1.0], &[2.0]])).unwrap();
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut w).unwrap();
        for i in 0..2 {
            assert_eq!(w.grad.row(i), &x_vals);
        }

        let mut frozen = Parameter::new("f", Matrix::filled(2, 3, 1.0));
        frozen.trainable = false;
        let mut tape = Tape::new();
        let fv = tape.param(&frozen).unwrap();
        let xv = tape.leaf(Matrix::filled(3, 1, 1.0), true).unwrap();
        let y = tape.matmul(fv, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut frozen).unwrap();
        assert!(frozen.grad.as_slice().iter().all(|v| *v == 0.0));
        assert!(tape.grad(fv).is_none());
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(1, 1, 2.0), true).unwrap();
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(crate::Error::DoubleBackward)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(1, 1, 1e308)).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
    }
}
