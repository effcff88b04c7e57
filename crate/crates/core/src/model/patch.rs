use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Splits an `L×C` window into `L/P` tokens. Each token concatenates `P`
/// consecutive samples of all channels, time-major: element `(t, s·C + c)`
/// is sample `t·P + s`, channel `c`.
pub fn patchify(window: &Matrix, patch_len: usize) -> Result<Matrix> {
    let (l, c) = window.shape();
    if patch_len == 0 || l % patch_len != 0 {
        return Err(Error::Config(format!(
            "patch_len {patch_len} does not divide window length {l}"
        )));
    }
    // Row-major storage already lays out P consecutive rows contiguously.
    Matrix::from_vec(l / patch_len, patch_len * c, window.as_slice().to_vec())
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Matrix, patch_len: usize, channels: usize) -> Result<Matrix> {
    if tokens.cols() != patch_len * channels {
        return Err(Error::Shape {
            op: "unpatchify",
            left: tokens.shape(),
            right: (patch_len, channels),
        });
    }
    Matrix::from_vec(tokens.rows() * patch_len, channels, tokens.as_slice().to_vec())
}

/// Stacks the tokens of several windows: `(B·T) × (P·C)`.
pub fn patchify_batch(windows: &[&Matrix], patch_len: usize) -> Result<Matrix> {
    let parts = windows
        .iter()
        .map(|w| patchify(w, patch_len))
        .collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Fixed sinusoidal encodings, `T × d`.
pub fn positional_encoding(tokens: usize, dim: usize) -> Matrix {
    Matrix::from_fn(tokens, dim, |pos, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_and_dimension() {
        let w = Matrix::from_fn(128, 6, |i, j| (i * 6 + j) as f64);
        let t = patchify(&w, 16).unwrap();
        assert_eq!(t.shape(), (8, 96));
        assert_eq!(t.get(1, 0), w.get(16, 0));
        assert_eq!(t.get(0, 6 + 2), w.get(1, 2));
        assert_eq!(patchify(&w, 128).unwrap().rows(), 1);
        assert!(patchify(&w, 15).is_err());
    }

    #[test]
    fn unpatchify_inverts() {
        let w = Matrix::from_fn(32, 3, |i, j| (i as f64).sin() + j as f64);
        let t = patchify(&w, 8).unwrap();
        assert_eq!(unpatchify(&t, 8, 3).unwrap(), w);
    }

    #[test]
    fn positions_are_distinct() {
        let pe = positional_encoding(8, 32);
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(pe.row(a), pe.row(b));
            }
        }
    }
}
