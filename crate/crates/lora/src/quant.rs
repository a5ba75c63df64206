//! 4-bit symmetric block quantization.
//!
//! Values are cut into blocks of `block_size`. Each block stores one scale
//! `absmax / 7` and a signed code in `-7..=7` per value. Rounding to the
//! nearest code keeps every value within half a step, `absmax / 14`.

use crate::matrix::Matrix;

pub const BITS: u32 = 4;
/// Largest code magnitude; the symmetric range drops the 16th level (-8).
pub const MAX_CODE: i8 = 7;
pub const DEFAULT_BLOCK_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub block_size: usize,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self { block_size: DEFAULT_BLOCK_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuantized {
    pub block_size: usize,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
}

impl BlockQuantized {
    pub fn quantize(values: &[f64], spec: QuantSpec) -> Self {
        let bs = spec.block_size.max(1);
        let mut codes = Vec::with_capacity(values.len());
        let mut scales = Vec::with_capacity(values.len().div_ceil(bs));
        for block in values.chunks(bs) {
            let absmax = block.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let scale = absmax / f64::from(MAX_CODE);
            scales.push(scale);
            for &v in block {
                let q = if scale == 0.0 { 0.0 } else { (v / scale).round() };
                codes.push(q.clamp(-f64::from(MAX_CODE), f64::from(MAX_CODE)) as i8);
            }
        }
        Self { block_size: bs, codes, scales }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().enumerate().map(|(i, &c)| f64::from(c) * self.scales[i / self.block_size]).collect()
    }

    /// Storage in bits: 4 per code plus one f64 scale per block.
    pub fn storage_bits(&self) -> u64 {
        self.codes.len() as u64 * u64::from(BITS) + self.scales.len() as u64 * 64
    }
}

/// Round-trips `w` through the quantizer (blocks run over the row-major entries)
/// and returns the reconstruction with the max absolute error of each block.
pub fn quantize_dequantize_4bit(w: &Matrix, spec: QuantSpec) -> (Matrix, Vec<f64>) {
    let q = BlockQuantized::quantize(w.data(), spec);
    let back = q.dequantize();
    let errors = w
        .data()
        .chunks(q.block_size)
        .zip(back.chunks(q.block_size))
        .map(|(a, b)| a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())))
        .collect();
    (Matrix::new(w.rows(), w.cols(), back).expect("finite input gives finite output"), errors)
}

/// Half a quantization step for a block with the given absmax.
pub fn error_bound(absmax: f64) -> f64 {
    absmax / (2.0 * f64::from(MAX_CODE))
}
