//! Low-precision formats emulated exactly in software.
//!
//! The 8-bit float here is the 4-exponent/3-mantissa variant without
//! infinities: bias 7, one NaN encoding per sign (exponent and mantissa all
//! ones), largest finite value 448, subnormal step 2^-9. Encoding rounds to
//! nearest with ties to even, exactly; every arithmetic step stays on powers
//! of two, so no double rounding sneaks in. Values past the last finite
//! midpoint saturate, which coincides with round-to-nearest-finite.
//!
//! Row-quantized GEMM mirrors the usual kernel contract: the left operand is
//! scaled per row, the right operand is supplied transposed and scaled per
//! row of the transpose (one scale per output column), accumulation runs in
//! f64, and the bias epilogue takes nothing, a row vector, or a full matrix
//! (the fused-residual case).
//!
//! The 4-bit integer path quantizes flat buffers in fixed-size groups with
//! an affine (scale, zero-point) per group, rounding half away from zero.

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const E4M3_MAX: f64 = 448.0;
pub const E4M3_MIN_SUBNORMAL: f64 = 0.001953125; // 2^-9
const E4M3_NAN: u8 = 0x7f;

/// Encodes a finite f64 to the 8-bit code, rounding to nearest (ties to
/// even) and saturating at ±448. NaN input maps to the NaN code.
pub fn e4m3_encode(x: f64) -> u8 {
    if x.is_nan() {
        return E4M3_NAN;
    }
    let sign = if x.is_sign_negative() { 0x80u8 } else { 0 };
    let a = x.abs();
    if a == 0.0 {
        return sign;
    }
    // Subnormal grid: multiples of 2^-9 up to 2^-6 (which re-enters the
    // normal range as mantissa rollover).
    if a < 0.015625 {
        let q = (a * 512.0).round_ties_even() as u8;
        if q <= 7 {
            return sign | q;
        }
        return sign | 0x08;
    }
    // Exact binade from the f64 exponent field.
    let mut e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    if e > 8 {
        return sign | 0x7e;
    }
    let frac = a / f64::powi(2.0, e); // in [1, 2), exact
    let mut m = ((frac - 1.0) * 8.0).round_ties_even() as u32;
    if m == 8 {
        e += 1;
        m = 0;
    }
    if e > 8 || (e == 8 && m == 7) {
        return sign | 0x7e;
    }
    sign | (((e + 7) as u8) << 3) | m as u8
}

/// Decodes an 8-bit code; the all-ones magnitude is NaN.
pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = (code >> 3) & 0x0f;
    let m = (code & 0x07) as f64;
    if e == 0x0f && code & 0x07 == 0x07 {
        return f64::NAN;
    }
    if e == 0 {
        return sign * m * E4M3_MIN_SUBNORMAL;
    }
    sign * f64::powi(2.0, e as i32 - 7) * (1.0 + m / 8.0)
}

/// A matrix stored as 8-bit codes with one scale per row.
#[derive(Debug, Clone)]
pub struct Fp8RowQuant {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
}

impl Fp8RowQuant {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Reconstructs the f64 matrix this quantization represents.
    pub fn dequantize(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| {
            e4m3_decode(self.codes[i * self.cols + j]) * self.scales[i]
        })
    }
}

/// Quantizes each row with scale `max|row| / 448` so the scaled row spans
/// the full format range. All-zero rows get scale one. Non-finite entries
/// are rejected.
pub fn fp8_quantize_rowwise(m: &Mat) -> Result<Fp8RowQuant> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut codes = vec![0u8; rows * cols];
    let mut scales = vec![1.0; rows];
    for i in 0..rows {
        let row = m.row(i);
        let mut amax = 0.0f64;
        for &v in row {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("row {i} holds a non-finite value")));
            }
            amax = amax.max(v.abs());
        }
        let scale = if amax == 0.0 { 1.0 } else { amax / E4M3_MAX };
        scales[i] = scale;
        for (j, &v) in row.iter().enumerate() {
            codes[i * cols + j] = e4m3_encode(v / scale);
        }
    }
    Ok(Fp8RowQuant { rows, cols, codes, scales })
}

/// Bias epilogue for the emulated GEMM.
#[derive(Debug, Clone, Copy)]
pub enum GemmBias<'a> {
    None,
    /// One value per output column.
    Row(&'a [f64]),
    /// Full `m × n` matrix added to the product (fused residual).
    Full(&'a Mat),
}

/// `A·B + bias` where `A` is row-quantized and `B` is supplied as its
/// transpose `bt` (also row-quantized, so each output column carries one
/// scale). Products are decoded to f64 and accumulated in f64.
pub fn fp8_gemm_emulated(a: &Fp8RowQuant, bt: &Fp8RowQuant, bias: GemmBias) -> Result<Mat> {
    if a.cols != bt.cols {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: {} vs {}",
            a.cols, bt.cols
        )));
    }
    let (m, n, k) = (a.rows, bt.rows, a.cols);
    let mut out = match bias {
        GemmBias::None => Mat::zeros(m, n),
        GemmBias::Row(r) => {
            if r.len() != n {
                return Err(Error::Dimension(format!(
                    "bias length {} does not match output width {n}",
                    r.len()
                )));
            }
            Mat::from_fn(m, n, |_, j| r[j])
        }
        GemmBias::Full(b) => {
            if b.rows() != m || b.cols() != n {
                return Err(Error::Dimension(format!(
                    "bias shape {}x{} does not match output {m}x{n}",
                    b.rows(),
                    b.cols()
                )));
            }
            b.clone()
        }
    };
    let da: Vec<f64> = a.codes.iter().map(|&c| e4m3_decode(c)).collect();
    let db: Vec<f64> = bt.codes.iter().map(|&c| e4m3_decode(c)).collect();
    for i in 0..m {
        let arow = &da[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &db[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            *out.data_mut().get_mut(i * n + j).unwrap() += acc * a.scales[i] * bt.scales[j];
        }
    }
    Ok(out)
}

/// A flat buffer quantized to 4-bit codes in fixed-size groups, each with an
/// affine (scale, zero-point) pair. The last group may be shorter.
#[derive(Debug, Clone, PartialEq)]
pub struct Int4GroupQuant {
    len: usize,
    group: usize,
    /// One code per element, values 0..=15.
    codes: Vec<u8>,
    scales: Vec<f64>,
    zero_points: Vec<f64>,
}

impl Int4GroupQuant {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f64] {
        &self.zero_points
    }

    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| {
                let g = i / self.group;
                self.zero_points[g] + self.codes[i] as f64 * self.scales[g]
            })
            .collect()
    }
}

/// Groupwise affine 4-bit quantization: per group, scale `(max-min)/15` and
/// zero-point `min`, codes rounded half away from zero. A constant group
/// gets scale zero and reproduces its value exactly.
pub fn quantize_int4(values: &[f64], group: usize) -> Result<Int4GroupQuant> {
    if group == 0 {
        return Err(Error::Config("group size must be positive".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cannot quantize non-finite values".into()));
    }
    let len = values.len();
    let n_groups = len.div_ceil(group);
    let mut codes = vec![0u8; len];
    let mut scales = vec![0.0; n_groups];
    let mut zero_points = vec![0.0; n_groups];
    for g in 0..n_groups {
        let lo = g * group;
        let hi = (lo + group).min(len);
        let chunk = &values[lo..hi];
        let min = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = (max - min) / 15.0;
        zero_points[g] = min;
        scales[g] = scale;
        if scale == 0.0 {
            continue;
        }
        for (i, &v) in chunk.iter().enumerate() {
            // (v - min) / scale is non-negative, so round() is half away
            // from zero here.
            let q = ((v - min) / scale).round();
            codes[lo + i] = (q as u8).min(15);
        }
    }
    Ok(Int4GroupQuant { len, group, codes, scales, zero_points })
}
