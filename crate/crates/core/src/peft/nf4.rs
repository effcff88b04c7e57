//! 4-bit NormalFloat (NF4) blockwise quantization with optional double
//! quantization of the block scales.
//!
//! The codebook follows the normal-quantile construction: eight positive
//! levels are standard-normal quantiles at evenly spaced probabilities in
//! `[0.5, δ]`, seven negative levels mirror the same construction with one
//! fewer step, and zero is added explicitly. All levels are divided by the
//! largest magnitude so the endpoints are exactly ±1. With
//! `δ = (1 - 1/32 + 1 - 1/30) / 2` this reproduces the NF4 table used by
//! common 4-bit fine-tuning libraries.
//!
//! Values are flattened row-major and split into consecutive blocks of
//! `block_size`; the last block may be partial. Each block stores its absmax
//! as an `f32` scale. Codes are packed two per byte, even index in the low
//! nibble.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DOUBLE_QUANT_GROUP: usize = 256;
const NF4_OFFSET: f64 = 0.5 * ((1.0 - 1.0 / 32.0) + (1.0 - 1.0 / 30.0));

#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Codebook {
    levels: [f64; 16],
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Builds the 16 NF4 levels.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::standard();
    let positive: Vec<f64> = linspace(NF4_OFFSET, 0.5, 9)[..8]
        .iter()
        .map(|&p| normal.inverse_cdf(p))
        .collect();
    let negative: Vec<f64> = linspace(NF4_OFFSET, 0.5, 8)[..7]
        .iter()
        .map(|&p| -normal.inverse_cdf(p))
        .collect();
    let mut all: Vec<f64> = positive.into_iter().chain(negative).chain([0.0]).collect();
    let max = all.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    all.iter_mut().for_each(|v| *v /= max);
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let mut levels = [0.0; 16];
    levels.copy_from_slice(&all);
    // Division by the shared maximum can leave the endpoints one ulp off.
    levels[0] = -1.0;
    levels[15] = 1.0;
    Nf4Codebook { levels }
}

/// Process-wide codebook instance.
pub fn codebook() -> &'static Nf4Codebook {
    static BOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    BOOK.get_or_init(build_nf4_codebook)
}

impl Nf4Codebook {
    pub fn levels(&self) -> &[f64; 16] {
        &self.levels
    }

    pub fn level(&self, code: u8) -> f64 {
        self.levels[code as usize]
    }

    /// Index of the level nearest to `x`; ties go to the lower index.
    pub fn nearest(&self, x: f64) -> u8 {
        let j = self.levels.partition_point(|&l| l < x);
        if j == 0 {
            return 0;
        }
        if j == self.levels.len() {
            return 15;
        }
        let below = x - self.levels[j - 1];
        let above = self.levels[j] - x;
        if below <= above {
            (j - 1) as u8
        } else {
            j as u8
        }
    }

    pub fn max_gap(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Per-block scale storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scales {
    /// One `f32` absmax per block.
    Plain(Vec<f32>),
    /// 8-bit codes per block plus one `f32` absmax per group of blocks;
    /// a block scale decodes as `code / 255 · group_scale`.
    Double {
        codes: Vec<u8>,
        group_scales: Vec<f32>,
        group_size: usize,
    },
}

/// Byte breakdown of a quantized matrix as stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Nf4Bytes {
    pub codes: usize,
    pub scales: usize,
    pub double_quant_meta: usize,
}

impl Nf4Bytes {
    pub fn total(&self) -> usize {
        self.codes + self.scales + self.double_quant_meta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    block_size: usize,
    codes: Vec<u8>,
    scales: Scales,
}

/// Quantizes `w` to NF4 with absmax scaling per block.
pub fn quantize_nf4(w: &Matrix, block_size: usize, double_quant: bool) -> Result<QuantizedMatrix> {
    QuantizedMatrix::quantize(w, block_size, double_quant)
}

pub fn dequantize_nf4(q: &QuantizedMatrix) -> Result<Matrix> {
    q.dequantize()
}

impl QuantizedMatrix {
    pub fn quantize(w: &Matrix, block_size: usize, double_quant: bool) -> Result<Self> {
        if block_size < 2 {
            return Err(Error::Config(format!("block_size must be >= 2, got {block_size}")));
        }
        let book = codebook();
        let values = w.as_slice();
        let n_blocks = values.len().div_ceil(block_size);
        let mut codes = vec![0u8; values.len().div_ceil(2)];
        let mut scales = Vec::with_capacity(n_blocks);
        for (b, chunk) in values.chunks(block_size).enumerate() {
            let absmax = chunk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = absmax as f32;
            scales.push(scale);
            if scale == 0.0 {
                continue;
            }
            let s = scale as f64;
            for (k, &v) in chunk.iter().enumerate() {
                let code = book.nearest((v / s).clamp(-1.0, 1.0));
                set_nibble(&mut codes, b * block_size + k, code);
            }
        }
        let scales = if double_quant {
            double_quantize(&scales, DOUBLE_QUANT_GROUP)
        } else {
            Scales::Plain(scales)
        };
        Ok(Self {
            rows: w.rows(),
            cols: w.cols(),
            block_size,
            codes,
            scales,
        })
    }

    /// Assembles a quantized matrix from unpacked codes and plain scales,
    /// validating every field.
    pub fn from_codes(
        rows: usize,
        cols: usize,
        block_size: usize,
        codes: &[u8],
        scales: Scales,
    ) -> Result<Self> {
        let n = rows * cols;
        if codes.len() != n {
            return Err(Error::Data(format!("expected {n} codes, got {}", codes.len())));
        }
        let mut packed = vec![0u8; n.div_ceil(2)];
        for (i, &c) in codes.iter().enumerate() {
            if c >= 16 {
                return Err(Error::Data(format!("code {c} at index {i} is not a 4-bit index")));
            }
            set_nibble(&mut packed, i, c);
        }
        Self::from_packed(rows, cols, block_size, packed, scales)
    }

    /// Assembles a quantized matrix from packed codes, as read from storage.
    pub fn from_packed(
        rows: usize,
        cols: usize,
        block_size: usize,
        packed: Vec<u8>,
        scales: Scales,
    ) -> Result<Self> {
        let n = rows * cols;
        if block_size < 2 {
            return Err(Error::Data(format!("block_size {block_size} < 2")));
        }
        if packed.len() != n.div_ceil(2) {
            return Err(Error::Data(format!(
                "expected {} packed code bytes, got {}",
                n.div_ceil(2),
                packed.len()
            )));
        }
        let n_blocks = n.div_ceil(block_size);
        match &scales {
            Scales::Plain(s) => {
                if s.len() != n_blocks {
                    return Err(Error::Data(format!("expected {n_blocks} scales, got {}", s.len())));
                }
                if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Data("scales must be finite and non-negative".into()));
                }
            }
            Scales::Double {
                codes,
                group_scales,
                group_size,
            } => {
                if *group_size == 0
                    || codes.len() != n_blocks
                    || group_scales.len() != n_blocks.div_ceil(*group_size)
                {
                    return Err(Error::Data("inconsistent double-quantized scale layout".into()));
                }
                if group_scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Data("group scales must be finite and non-negative".into()));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            block_size,
            codes: packed,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &Scales {
        &self.scales
    }

    pub fn is_double_quantized(&self) -> bool {
        matches!(self.scales, Scales::Double { .. })
    }

    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    /// Decoded scale of block `b`.
    pub fn block_scale(&self, b: usize) -> f64 {
        match &self.scales {
            Scales::Plain(s) => s[b] as f64,
            Scales::Double {
                codes,
                group_scales,
                group_size,
            } => codes[b] as f64 / 255.0 * group_scales[b / group_size] as f64,
        }
    }

    pub fn dequantize(&self) -> Result<Matrix> {
        let book = codebook();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        for b in 0..self.num_blocks() {
            let s = self.block_scale(b);
            let end = ((b + 1) * self.block_size).min(n);
            for i in b * self.block_size..end {
                out.push(book.level(self.code(i)) * s);
            }
        }
        Matrix::from_vec(self.rows, self.cols, out)
    }

    pub fn storage_bytes(&self) -> Nf4Bytes {
        match &self.scales {
            Scales::Plain(s) => Nf4Bytes {
                codes: self.codes.len(),
                scales: s.len() * 4,
                double_quant_meta: 0,
            },
            Scales::Double {
                codes, group_scales, ..
            } => Nf4Bytes {
                codes: self.codes.len(),
                scales: codes.len(),
                double_quant_meta: group_scales.len() * 4,
            },
        }
    }
}

/// Stored size of an NF4 matrix with `values` entries, without building it.
pub fn nf4_storage_bytes(values: usize, block_size: usize, double_quant: bool) -> Nf4Bytes {
    let blocks = values.div_ceil(block_size);
    if double_quant {
        Nf4Bytes {
            codes: values.div_ceil(2),
            scales: blocks,
            double_quant_meta: blocks.div_ceil(DOUBLE_QUANT_GROUP) * 4,
        }
    } else {
        Nf4Bytes {
            codes: values.div_ceil(2),
            scales: blocks * 4,
            double_quant_meta: 0,
        }
    }
}

fn set_nibble(codes: &mut [u8], i: usize, code: u8) {
    let byte = &mut codes[i / 2];
    if i.is_multiple_of(2) {
        *byte = (*byte & 0xf0) | code;
    } else {
        *byte = (*byte & 0x0f) | (code << 4);
    }
}

fn double_quantize(scales: &[f32], group_size: usize) -> Scales {
    let mut codes = Vec::with_capacity(scales.len());
    let mut group_scales = Vec::with_capacity(scales.len().div_ceil(group_size));
    for group in scales.chunks(group_size) {
        let gmax = group.iter().fold(0.0f32, |m, v| m.max(*v));
        group_scales.push(gmax);
        for &s in group {
            let code = if gmax == 0.0 || s == 0.0 {
                0
            } else {
                // Nonzero blocks keep a nonzero scale.
                ((s as f64 / gmax as f64 * 255.0).round() as u8).max(1)
            };
            codes.push(code);
        }
    }
    Scales::Double {
        codes,
        group_scales,
        group_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    // Reference NF4 table as published by the bitsandbytes library (f32).
    const REFERENCE: [f64; 16] = [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ];

    #[test]
    fn codebook_matches_reference_table() {
        let book = build_nf4_codebook();
        for (a, b) in book.levels().iter().zip(REFERENCE) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn codebook_invariants() {
        let l = codebook().levels();
        assert_eq!(l[0], -1.0);
        assert_eq!(l[15], 1.0);
        assert_eq!(l.iter().filter(|v| **v == 0.0).count(), 1);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let book = codebook();
        let l = book.levels();
        let mid = 0.5 * (l[3] + l[4]);
        let lo = (mid - l[3]).abs();
        let hi = (l[4] - mid).abs();
        let expected = if lo <= hi { 3 } else { 4 };
        assert_eq!(book.nearest(mid), expected);
        assert_eq!(book.nearest(-5.0), 0);
        assert_eq!(book.nearest(5.0), 15);
    }

    #[test]
    fn all_zero_block_decodes_to_zero() {
        let q = quantize_nf4(&Matrix::zeros(2, 64), 64, false).unwrap();
        assert_eq!(q.block_scale(0), 0.0);
        assert!(q.dequantize().unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn absmax_round_trips() {
        let mut w = Matrix::from_fn(1, 64, |_, j| (j as f64 * 0.37).sin() * 0.5);
        w.set(0, 17, -2.5);
        let d = quantize_nf4(&w, 64, false).unwrap().dequantize().unwrap();
        assert_eq!(d.get(0, 17), -2.5);
    }

    #[test]
    fn partial_last_block_and_shape() {
        let w = Matrix::from_fn(3, 7, |i, j| (i as f64) - (j as f64) * 0.25);
        let q = quantize_nf4(&w, 8, false).unwrap();
        assert_eq!(q.num_blocks(), 3);
        assert_eq!(q.packed_codes().len(), 11);
        assert_eq!(q.dequantize().unwrap().shape(), (3, 7));
    }

    #[test]
    fn corrupted_codes_are_rejected() {
        let err = QuantizedMatrix::from_codes(1, 2, 2, &[3, 16], Scales::Plain(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let err = QuantizedMatrix::from_packed(1, 4, 2, vec![0; 1], Scales::Plain(vec![1.0; 2])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn block_size_below_two_is_rejected() {
        assert!(quantize_nf4(&Matrix::zeros(1, 4), 1, false).is_err());
    }

    #[test]
    fn storage_accounting_identity() {
        let mut rng = Rng::new(5);
        let w = Matrix::from_fn(32, 32, |_, _| rng.normal());
        let q = quantize_nf4(&w, 64, false).unwrap();
        assert_eq!(q.storage_bytes().total(), 512 + 16 * 4);
        assert_eq!(q.storage_bytes(), nf4_storage_bytes(1024, 64, false));
        let qd = quantize_nf4(&w, 64, true).unwrap();
        assert_eq!(qd.storage_bytes(), nf4_storage_bytes(1024, 64, true));
        assert_eq!(qd.storage_bytes().total(), 512 + 16 + 4);
    }

    #[test]
    fn double_quant_keeps_codes_and_bounds_scale_error() {
        let mut rng = Rng::new(9);
        let w = Matrix::from_fn(64, 300, |_, _| rng.normal() * (1.0 + rng.uniform()));
        let plain = quantize_nf4(&w, 64, false).unwrap();
        let dq = quantize_nf4(&w, 64, true).unwrap();
        assert_eq!(plain.packed_codes(), dq.packed_codes());
        let Scales::Double {
            group_scales,
            group_size,
            ..
        } = dq.scales()
        else {
            panic!("expected double-quantized scales");
        };
        let a = plain.dequantize().unwrap();
        let b = dq.dequantize().unwrap();
        for i in 0..w.len() {
            let block = i / 64;
            let step = group_scales[block / group_size] as f64 / 255.0;
            let diff = (a.as_slice()[i] - b.as_slice()[i]).abs();
            assert!(diff <= step + 1e-15, "diff {diff} > step {step}");
        }
        for bidx in 0..dq.num_blocks() {
            assert!(dq.block_scale(bidx) > 0.0);
        }
    }
}
