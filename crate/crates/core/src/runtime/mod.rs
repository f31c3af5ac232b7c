//! CPU inference path for a quantized layer with a low-rank sub-branch.
//!
//! `y = x·W'ᵀ + (x·Aᵀ)·Bᵀ` where `W'` is the dequantized main path. Two
//! schedules are provided:
//!
//! ```text
//! naive (4 kernels)                      fused (2 kernels)
//! K1 dequantize W -> W' temporary        K1 t = x·Aᵀ
//! K2 y  = x·W'ᵀ                          K2 per output row: dequantize into a
//! K3 t  = x·Aᵀ                              row-local buffer, y = x·W'ᵀ + t·Bᵀ,
//! K4 y += t·Bᵀ                              written once
//! ```
//!
//! Every kernel reports the bytes it moves to a [`TrafficCounter`]. The
//! loop structure, and therefore the traffic, is fixed by the shapes:
//!
//! - dequantization (K1 naive, K2 fused) reads each packed code row, its
//!   scales and zero-points once per output row.
//! - main and up-projection work one output row `j` at a time: `W'[j]` or
//!   `B[j]` is read once, then every batch row of `x` (and `t`) is read for
//!   it.
//! - the down-projection works one batch row `i` at a time: `x[i]` is read
//!   once, then every row of `A`.
//!
//! Accumulation is sequential over the reduced dimension in the element
//! type, so both schedules produce identical values.

mod bench;
mod counter;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::SubBranch;
use crate::linalg::{DenseMatrix, Scalar};
use crate::quant::QuantizedTensor;

pub use bench::{benchmark, benchmark_with, to_csv, BenchOptions, BenchRow, ThreadMode};
pub use counter::{Buffer, BufferTraffic, TrafficCounter, TrafficSnapshot};

/// Batch `b`, square layer dimension `d` and sub-branch rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelQuery {
    pub b: usize,
    pub d: usize,
    pub r: usize,
}

impl CostModelQuery {
    pub fn new(b: usize, d: usize, r: usize) -> Self {
        Self { b, d, r }
    }
}

/// Main-path MACs `m0 = b·d·d`, sub-branch MACs `m1 = 2·b·r·d` and their
/// ratio `2r/d`.
pub fn macs_overhead(q: CostModelQuery) -> Result<(u64, u64, f64)> {
    if q.d == 0 {
        return Err(Error::Value("macs_overhead: d must be positive".into()));
    }
    let (b, d, r) = (q.b as u64, q.d as u64, q.r as u64);
    let m0 = b * d * d;
    let m1 = 2 * b * r * d;
    Ok((m0, m1, 2.0 * q.r as f64 / q.d as f64))
}

/// Quantized main path and sub-branch factors in the compute precision,
/// plus the reusable `batch × rank` intermediate.
#[derive(Debug, Clone)]
pub struct FusedLayer<T: Scalar = f32> {
    q: QuantizedTensor,
    /// `rank × in_dim`.
    a: DenseMatrix<T>,
    /// `out_dim × rank`.
    b: DenseMatrix<T>,
    workspace: Vec<T>,
}

impl<T: Scalar> FusedLayer<T> {
    pub fn new(q: QuantizedTensor, sub: &SubBranch) -> Result<Self> {
        Self::from_parts(q, sub.a.cast(), sub.b.cast())
    }

    pub fn from_parts(q: QuantizedTensor, a: DenseMatrix<T>, b: DenseMatrix<T>) -> Result<Self> {
        let (out_dim, in_dim) = q.shape();
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::shape("FusedLayer", format!("empty layer {out_dim}x{in_dim}")));
        }
        if a.cols() != in_dim || b.rows() != out_dim || a.rows() != b.cols() {
            return Err(Error::shape(
                "FusedLayer",
                format!(
                    "W is {out_dim}x{in_dim}, A is {:?}, B is {:?}",
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        Ok(Self {
            q,
            a,
            b,
            workspace: Vec::new(),
        })
    }

    pub fn quantized(&self) -> &QuantizedTensor {
        &self.q
    }

    pub fn a(&self) -> &DenseMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix<T> {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(out_dim, in_dim)`.
    pub fn shape(&self) -> (usize, usize) {
        self.q.shape()
    }

    fn check_input(&self, x: &DenseMatrix<T>) -> Result<()> {
        if x.cols() != self.q.shape().1 {
            return Err(Error::shape(
                "forward",
                format!("x has {} features, layer expects {}", x.cols(), self.q.shape().1),
            ));
        }
        Ok(())
    }
}

#[inline]
fn dot_seq<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&u, &v) in a.iter().zip(b) {
        acc = acc + u * v;
    }
    acc
}

/// Counts writes per output element in debug builds.
struct WriteShadow {
    #[cfg(debug_assertions)]
    hits: Vec<std::sync::atomic::AtomicU8>,
}

impl WriteShadow {
    fn new(_len: usize) -> Self {
        Self {
            #[cfg(debug_assertions)]
            hits: (0.._len).map(|_| std::sync::atomic::AtomicU8::new(0)).collect(),
        }
    }

    #[inline]
    fn hit(&self, _idx: usize) {
        #[cfg(debug_assertions)]
        self.hits[_idx].fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }

    fn expect_all(&self, _times: u8) {
        #[cfg(debug_assertions)]
        for (i, h) in self.hits.iter().enumerate() {
            let n = h.load(std::sync::atomic::Ordering::Relaxed);
            assert_eq!(n, _times, "output element {i} written {n} times");
        }
    }
}

/// Down-projection `t = x·Aᵀ` into `t` (`batch × rank`, row-major).
fn down_projection<T: Scalar>(a: &DenseMatrix<T>, x: &DenseMatrix<T>, t: &mut [T], counter: &TrafficCounter) {
    counter.launch();
    let (r, n) = a.shape();
    if r == 0 {
        return;
    }
    let e = T::BYTES;
    t.par_chunks_mut(r)
        .zip(x.data().par_chunks(n))
        .for_each(|(trow, xrow)| {
            counter.read(Buffer::Input, n * e);
            counter.read(Buffer::A, r * n * e);
            for (k, out) in trow.iter_mut().enumerate() {
                *out = dot_seq(a.row(k), xrow);
            }
            counter.write(Buffer::Intermediate, r * e);
            counter.add_macs(r * n);
        });
}

fn read_group_params(q: &QuantizedTensor, counter: &TrafficCounter) {
    let g = q.groups_per_row();
    counter.read(Buffer::Codes, q.row_bytes());
    counter.read(Buffer::Scales, g * 4);
    counter.read(Buffer::ZeroPoints, g * 4);
}

/// `y[i, j]` lives at `yt[j * batch + i]` while kernels run.
fn output_from_columns<T: Scalar>(yt: &[T], batch: usize, out_dim: usize) -> DenseMatrix<T> {
    DenseMatrix::from_fn(batch, out_dim, |i, j| yt[j * batch + i])
}

/// Four-kernel forward pass: dequantize `W'` in full, main matmul,
/// down-projection, up-projection accumulated into the output.
pub fn naive_forward<T: Scalar>(
    layer: &FusedLayer<T>,
    x: &DenseMatrix<T>,
    counter: &TrafficCounter,
) -> Result<DenseMatrix<T>> {
    layer.check_input(x)?;
    let (o, n) = layer.shape();
    let (batch, r, e) = (x.rows(), layer.rank(), T::BYTES);
    let q = &layer.q;
    let shadow = WriteShadow::new(o * batch);

    // K1: W' temporary.
    counter.launch();
    let mut w_prime = vec![T::zero(); o * n];
    w_prime
        .par_chunks_mut(n)
        .enumerate()
        .for_each_init(
            || vec![0u8; n],
            |codes, (j, row)| {
                read_group_params(q, counter);
                q.dequantize_row_into(j, codes, row);
                counter.write(Buffer::DequantTemp, n * e);
            },
        );

    // K2: y = x·W'ᵀ.
    counter.launch();
    let mut yt = vec![T::zero(); o * batch];
    yt.par_chunks_mut(batch.max(1))
        .enumerate()
        .for_each(|(j, ycol)| {
            let wrow = &w_prime[j * n..(j + 1) * n];
            counter.read(Buffer::DequantTemp, n * e);
            for (i, y) in ycol.iter_mut().enumerate() {
                counter.read(Buffer::Input, n * e);
                *y = dot_seq(wrow, x.row(i));
                counter.write(Buffer::Output, e);
                shadow.hit(j * batch + i);
            }
            counter.add_macs(batch * n);
        });

    // K3: t = x·Aᵀ.
    let mut t = vec![T::zero(); batch * r];
    down_projection(&layer.a, x, &mut t, counter);

    // K4: y += t·Bᵀ.
    counter.launch();
    if r > 0 {
        yt.par_chunks_mut(batch.max(1))
            .enumerate()
            .for_each(|(j, ycol)| {
                let brow = layer.b.row(j);
                counter.read(Buffer::B, r * e);
                for (i, y) in ycol.iter_mut().enumerate() {
                    counter.read(Buffer::Intermediate, r * e);
                    let up = dot_seq(brow, &t[i * r..(i + 1) * r]);
                    counter.read(Buffer::Output, e);
                    *y = *y + up;
                    counter.write(Buffer::Output, e);
                    shadow.hit(j * batch + i);
                }
                counter.add_macs(batch * r);
            });
        shadow.expect_all(2);
    } else {
        shadow.expect_all(1);
    }
    Ok(output_from_columns(&yt, batch, o))
}

/// Two-kernel forward pass: down-projection, then one kernel that
/// dequantizes each weight row on the fly and writes main path plus
/// up-projection to the output in a single store.
pub fn fused_forward<T: Scalar>(
    layer: &mut FusedLayer<T>,
    x: &DenseMatrix<T>,
    counter: &TrafficCounter,
) -> Result<DenseMatrix<T>> {
    layer.check_input(x)?;
    let (o, n) = layer.shape();
    let (batch, r, e) = (x.rows(), layer.rank(), T::BYTES);
    layer.workspace.clear();
    layer.workspace.resize(batch * r, T::zero());

    // K1: t = x·Aᵀ.
    down_projection(&layer.a, x, &mut layer.workspace, counter);

    // K2: y = x·W'ᵀ + t·Bᵀ, one output row of W' at a time.
    counter.launch();
    let FusedLayer { q, b, workspace, .. } = &*layer;
    let shadow = WriteShadow::new(o * batch);
    let mut yt = vec![T::zero(); o * batch];
    yt.par_chunks_mut(batch.max(1))
        .enumerate()
        .for_each_init(
            || (vec![0u8; n], vec![T::zero(); n]),
            |(codes, wrow), (j, ycol)| {
                read_group_params(q, counter);
                q.dequantize_row_into(j, codes, wrow);
                let brow = b.row(j);
                counter.read(Buffer::B, r * e);
                for (i, y) in ycol.iter_mut().enumerate() {
                    counter.read(Buffer::Input, n * e);
                    let main = dot_seq(wrow, x.row(i));
                    counter.read(Buffer::Intermediate, r * e);
                    let up = dot_seq(brow, &workspace[i * r..(i + 1) * r]);
                    *y = main + up;
                    counter.write(Buffer::Output, e);
                    shadow.hit(j * batch + i);
                }
                counter.add_macs(batch * (n + r));
            },
        );
    shadow.expect_all(1);
    Ok(output_from_columns(&yt, batch, o))
}
