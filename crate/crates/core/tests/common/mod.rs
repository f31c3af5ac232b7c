//! Oracles shared by the integration tests. Everything here is written
//! against the raw matrix entries and packed bytes, not against the
//! library's own helpers.
#![allow(dead_code)]

use feedback_quant::linalg::DenseMatrix;
use feedback_quant::quant::QuantizedTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(normal))
}

/// `Σ_i ‖D x_i‖²` by explicit loops.
pub fn output_loss(d: &DenseMatrix, x: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..d.rows() {
            let mut acc = 0.0;
            for k in 0..d.cols() {
                acc += d.get(j, k) * x.get(i, k);
            }
            total += acc * acc;
        }
    }
    total
}

/// `‖(W - Ŵ) Xᵀ‖ / ‖W Xᵀ‖`.
pub fn relative_output_error(w: &DenseMatrix, w_hat: &DenseMatrix, x: &DenseMatrix) -> f64 {
    let diff = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j) - w_hat.get(i, j));
    (output_loss(&diff, x) / output_loss(w, x)).sqrt()
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum::<f64>())
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut m: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    m
}

pub fn max_abs(a: &DenseMatrix) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max(a.get(i, j).abs());
        }
    }
    m
}

/// Central differences of `f` at `m` with step `h`.
pub fn central_diff(m: &DenseMatrix, h: f64, f: impl Fn(&DenseMatrix) -> f64) -> DenseMatrix {
    let mut probe = m.clone();
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
        let v = m.get(i, j);
        probe.set(i, j, v + h);
        let up = f(&probe);
        probe.set(i, j, v - h);
        let down = f(&probe);
        probe.set(i, j, v);
        (up - down) / (2.0 * h)
    })
}

/// Code `c` of row `r` read straight from the LSB-first packed stream.
pub fn code_at(q: &QuantizedTensor, r: usize, c: usize) -> u32 {
    let bits = q.config().bits as usize;
    let row = q.packed_row(r);
    let mut v = 0u32;
    for b in 0..bits {
        let pos = c * bits + b;
        v |= (((row[pos / 8] >> (pos % 8)) & 1) as u32) << b;
    }
    v
}

/// `(code - z) · s` per entry, computed from the packed bytes.
pub fn dequant_oracle(q: &QuantizedTensor) -> DenseMatrix {
    let (rows, cols) = q.shape();
    let gs = q.config().group_size;
    let g = cols.div_ceil(gs);
    DenseMatrix::from_fn(rows, cols, |r, c| {
        let s = q.scales()[r * g + c / gs] as f64;
        let z = q.zero_points()[r * g + c / gs] as f64;
        (code_at(q, r, c) as f64 - z) * s
    })
}

/// `y = x·W'ᵀ + (x·Aᵀ)·Bᵀ` in f64 from the stored tensors.
pub fn reference_forward(q: &QuantizedTensor, a: &DenseMatrix, b: &DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
    let w = dequant_oracle(q);
    let t = DenseMatrix::from_fn(x.rows(), a.rows(), |i, p| (0..x.cols()).map(|k| x.get(i, k) * a.get(p, k)).sum::<f64>());
    DenseMatrix::from_fn(x.rows(), w.rows(), |i, j| {
        let main: f64 = (0..x.cols()).map(|k| x.get(i, k) * w.get(j, k)).sum();
        let up: f64 = (0..a.rows()).map(|p| t.get(i, p) * b.get(j, p)).sum();
        main + up
    })
}

/// Bytes per buffer, in [`feedback_quant::runtime::Buffer::ALL`] order:
/// input, codes, scales, zero_points, dequant_temp, a, b, intermediate,
/// output. Each entry is `(read, written)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Traffic {
    pub kernels: u64,
    pub macs: u64,
    pub buffers: [(u64, u64); 9],
}

/// Traffic of one forward pass with `batch` rows, an `out × inp` weight at
/// `bits`/`group`, rank `r` and element size `e`, derived from the loop
/// structure: weight-side data is read once per output row, activation
/// rows once per (output row, batch row) pair in the main and up kernels,
/// and the down-projection reads each input row once.
#[allow(clippy::too_many_arguments)]
pub fn traffic_model(fused: bool, batch: u64, out: u64, inp: u64, r: u64, bits: u64, group: u64, e: u64) -> Traffic {
    let row_bytes = (inp * bits).div_ceil(8);
    let groups = inp.div_ceil(group);
    let codes = (out * row_bytes, 0);
    let scales = (out * groups * 4, 0);
    let zeros = (out * groups * 4, 0);
    let a = (batch * r * inp * e, 0);
    let b = (out * r * e, 0);
    let inter = (out * batch * r * e, batch * r * e);
    // The down-projection is skipped entirely at rank 0.
    let input_down = if r > 0 { batch * inp * e } else { 0 };
    let input_main = out * batch * inp * e;
    let macs = out * batch * inp + batch * r * inp + out * batch * r;
    if fused {
        Traffic {
            kernels: 2,
            macs,
            buffers: [
                (input_main + input_down, 0),
                codes,
                scales,
                zeros,
                (0, 0),
                a,
                b,
                inter,
                (0, out * batch * e),
            ],
        }
    } else {
        let up_passes = if r > 0 { 1 } else { 0 };
        Traffic {
            kernels: 4,
            macs,
            buffers: [
                (input_main + input_down, 0),
                codes,
                scales,
                zeros,
                (out * inp * e, out * inp * e),
                a,
                b,
                inter,
                (up_passes * out * batch * e, (1 + up_passes) * out * batch * e),
            ],
        }
    }
}
