//! Group-wise asymmetric round-to-nearest weight quantizer.
//!
//! Each row of a weight matrix is split along the input dimension into
//! groups of `group_size` consecutive values (the last group may be short).
//! Every group gets its own scale `s` and zero-point `z`:
//!
//! ```text
//! s    = (max - min) / (2^bits - 1)        rounded up to f32
//! z    = round(-min / s)
//! code = clamp(round(w / s) + z, 0, 2^bits - 1)
//! w'   = (code - z) * s
//! ```
//!
//! Min-max scaling keeps every value in range, so `|w - w'| <= s / 2` for
//! every entry. That inequality is what the feedback reconstruction relies on.

mod pack;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Scalar};

pub use pack::{pack_codes, packed_row_bytes, unpack_codes};
pub(crate) use pack::{pack_row, unpack_row};

pub const DEFAULT_GROUP_SIZE: usize = 128;
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

// Largest zero-point magnitude accepted before a group is treated as
// constant. Keeps `code - z` exact in both i32 and f32 arithmetic.
const MAX_ZERO_POINT: f64 = (1u32 << 23) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    AsymmetricMinmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub rounding: Rounding,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::new(4, DEFAULT_GROUP_SIZE)
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            scheme: Scheme::AsymmetricMinmax,
            rounding: Rounding::HalfAwayFromZero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::Value(format!(
                "bits must be one of {SUPPORTED_BITS:?}, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Value("group_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest code, `2^bits - 1`.
    #[inline]
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    #[inline]
    pub fn groups_per_row(&self, in_dim: usize) -> usize {
        in_dim.div_ceil(self.group_size)
    }
}

/// Packed integer weights with per-(row, group) scales and zero-points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    out_dim: usize,
    in_dim: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    config: QuantConfig,
}

impl QuantizedTensor {
    /// Assembles a tensor from raw parts, checking every length and scale.
    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        config: QuantConfig,
    ) -> Result<Self> {
        let q = Self {
            out_dim,
            in_dim,
            codes,
            scales,
            zero_points,
            config,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected_codes = self.out_dim * self.row_bytes();
        if self.codes.len() != expected_codes {
            return Err(Error::format(
                0,
                format!(
                    "codes payload is {} bytes, expected {expected_codes}",
                    self.codes.len()
                ),
            ));
        }
        let groups = self.out_dim * self.groups_per_row();
        if self.scales.len() != groups || self.zero_points.len() != groups {
            return Err(Error::format(
                0,
                format!(
                    "{} scales / {} zero-points for {groups} groups",
                    self.scales.len(),
                    self.zero_points.len()
                ),
            ));
        }
        if let Some(i) = self.scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format(
                0,
                format!("scale {} of group {i} is not a positive finite number", self.scales[i]),
            ));
        }
        if let Some(i) = self
            .zero_points
            .iter()
            .position(|z| (*z as f64).abs() > MAX_ZERO_POINT)
        {
            return Err(Error::format(0, format!("zero-point of group {i} out of range")));
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.out_dim, self.in_dim)
    }

    #[inline]
    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    #[inline]
    pub fn row_bytes(&self) -> usize {
        packed_row_bytes(self.in_dim, self.config.bits)
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.config.groups_per_row(self.in_dim)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn packed_row(&self, r: usize) -> &[u8] {
        let rb = self.row_bytes();
        &self.codes[r * rb..(r + 1) * rb]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn row_scales(&self, r: usize) -> &[f32] {
        let g = self.groups_per_row();
        &self.scales[r * g..(r + 1) * g]
    }

    pub fn row_zero_points(&self, r: usize) -> &[i32] {
        let g = self.groups_per_row();
        &self.zero_points[r * g..(r + 1) * g]
    }

    /// Scale governing entry `(r, c)`.
    #[inline]
    pub fn scale_at(&self, r: usize, c: usize) -> f32 {
        self.scales[r * self.groups_per_row() + c / self.config.group_size]
    }

    /// Half of the largest group scale.
    pub fn max_half_scale(&self) -> f64 {
        self.scales.iter().fold(0.0f64, |m, &s| m.max(s as f64)) / 2.0
    }

    /// All codes, unpacked row-major.
    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.codes, self.out_dim, self.in_dim, self.config.bits)
            .expect("validated tensor has a consistent payload")
    }

    /// Decodes row `r` into `out` (length `in_dim`) as `(code - z) * s`.
    pub fn dequantize_row_into<T: Scalar>(&self, r: usize, codes_buf: &mut [u8], out: &mut [T]) {
        unpack_row(self.packed_row(r), self.config.bits, codes_buf);
        let gs = self.config.group_size;
        let scales = self.row_scales(r);
        let zeros = self.row_zero_points(r);
        for (g, (chunk, cchunk)) in out.chunks_mut(gs).zip(codes_buf.chunks(gs)).enumerate() {
            let s = T::from_f64(scales[g] as f64);
            let z = zeros[g];
            for (o, &c) in chunk.iter_mut().zip(cchunk) {
                *o = T::from_f64((c as i32 - z) as f64) * s;
            }
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.out_dim, self.in_dim);
        let mut buf = vec![0u8; self.in_dim];
        for r in 0..self.out_dim {
            self.dequantize_row_into(r, &mut buf, out.row_mut(r));
        }
        out
    }
}

/// Per-group parameters chosen by the quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct GroupParams {
    scale: f32,
    zero: i32,
}

fn group_params(values: &[f64], max_code: u32) -> Result<GroupParams> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max > min {
        let exact = (max - min) / max_code as f64;
        let mut scale = exact as f32;
        // Never round the scale down: a smaller scale would push the group
        // maximum past the top code.
        if (scale as f64) < exact {
            scale = scale.next_up();
        }
        if !scale.is_finite() {
            return Err(Error::Value(format!(
                "group range {:e} exceeds the f32 scale range",
                max - min
            )));
        }
        let zero = (-min / scale as f64).round();
        if zero.abs() <= MAX_ZERO_POINT {
            return Ok(GroupParams {
                scale,
                zero: zero as i32,
            });
        }
        // Range is negligible against the offset: collapse to one level.
        return constant_group((max + min) / 2.0);
    }
    constant_group(min)
}

/// A group holding a single value `c` maps onto the level `±|c|`, which
/// reproduces `c` exactly whenever it is representable in f32.
fn constant_group(c: f64) -> Result<GroupParams> {
    if c == 0.0 {
        return Ok(GroupParams { scale: 1.0, zero: 0 });
    }
    let scale = c.abs() as f32;
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::Value(format!("value {c:e} is outside the f32 scale range")));
    }
    Ok(GroupParams {
        scale,
        // c > 0: code 1, z 0. c < 0: code 0, z 1.
        zero: if c > 0.0 { 0 } else { 1 },
    })
}

#[inline]
fn encode(v: f64, p: GroupParams, max_code: u32) -> u8 {
    let q = (v / p.scale as f64).round() + p.zero as f64;
    q.clamp(0.0, max_code as f64) as u8
}

/// Round-to-nearest quantization of `w` (`out_dim × in_dim`).
pub fn quantize_rtn<T: Scalar>(w: &DenseMatrix<T>, config: &QuantConfig) -> Result<QuantizedTensor> {
    config.validate()?;
    let (rows, cols) = w.shape();
    let gs = config.group_size;
    let groups = config.groups_per_row(cols);
    let max_code = config.max_code();
    let row_bytes = packed_row_bytes(cols, config.bits);

    let mut codes = vec![0u8; rows * row_bytes];
    let mut scales = Vec::with_capacity(rows * groups);
    let mut zero_points = Vec::with_capacity(rows * groups);
    let mut row_vals = vec![0f64; cols];
    let mut row_codes = vec![0u8; cols];
    for r in 0..rows {
        for (dst, &v) in row_vals.iter_mut().zip(w.row(r)) {
            *dst = v.to_f64_lossless();
        }
        for (chunk, cchunk) in row_vals.chunks(gs).zip(row_codes.chunks_mut(gs)) {
            let p = group_params(chunk, max_code)?;
            for (c, &v) in cchunk.iter_mut().zip(chunk) {
                *c = encode(v, p, max_code);
            }
            scales.push(p.scale);
            zero_points.push(p.zero);
        }
        pack_row(&row_codes, config.bits, &mut codes[r * row_bytes..(r + 1) * row_bytes]);
    }
    Ok(QuantizedTensor {
        out_dim: rows,
        in_dim: cols,
        codes,
        scales,
        zero_points,
        config: *config,
    })
}

/// `(code - z) * s` for every entry, in f64.
pub fn dequantize(q: &QuantizedTensor) -> Result<DenseMatrix<f64>> {
    q.validate()?;
    Ok(q.dequantize())
}

/// Largest `|w - w'|` over all entries, and how many entries exceed half of
/// their own group scale.
pub fn deviation_against(w: &DenseMatrix<f64>, recon: &DenseMatrix<f64>, q: &QuantizedTensor) -> (f64, usize) {
    let mut max_dev = 0.0f64;
    let mut violations = 0;
    for r in 0..w.rows() {
        for (c, (&a, &b)) in w.row(r).iter().zip(recon.row(r)).enumerate() {
            let dev = (a - b).abs();
            max_dev = max_dev.max(dev);
            if dev > q.scale_at(r, c) as f64 / 2.0 {
                violations += 1;
            }
        }
    }
    (max_dev, violations)
}
