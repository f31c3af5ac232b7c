//! Finite-difference check of the detached feedback gradients.
//!
//! With the quantized term frozen at `Q(W - Σ₀)`, the loss
//! `‖(W - Q(W - Σ₀) - Σ) Xᵀ‖²` is an ordinary quadratic in `Σ` (and in each of
//! `A`, `B` separately), so central differences of it must reproduce the
//! analytic gradients up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feedback::{grad_ab, grad_sigma, grad_sigma_with, output_error_sq, QuantizedTerm, SubBranch};
use crate::linalg::{gram, matmul, DenseMatrix};
use crate::quant::{quantize_rtn, QuantConfig, SUPPORTED_BITS};
use crate::synth::gaussian;

pub const MAX_DIM: usize = 64;
pub const MAX_RANK: usize = 8;
const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: usize,
    /// `max |fd - analytic| / max |analytic|` over instances, per gradient.
    pub max_rel_error_sigma: f64,
    pub max_rel_error_a: f64,
    pub max_rel_error_b: f64,
    /// Largest entry of the undetached (straight-through) gradient.
    pub ste_max_abs: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_sigma
            .max(self.max_rel_error_a)
            .max(self.max_rel_error_b)
    }
}

/// One randomized layer with a sub-branch and the frozen quantized term.
pub struct GradInstance {
    pub w: DenseMatrix,
    pub x: DenseMatrix,
    pub sub: SubBranch,
    /// `dequant(Q(W - B·A))`.
    pub w_q: DenseMatrix,
}

impl GradInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let out_dim = rng.gen_range(2..=MAX_DIM);
        let in_dim = rng.gen_range(2..=MAX_DIM);
        let rank = rng.gen_range(1..=MAX_RANK.min(out_dim).min(in_dim));
        let n = rng.gen_range(2..=32);
        let bits = SUPPORTED_BITS[rng.gen_range(0..SUPPORTED_BITS.len())];
        let group = [8, 32, 128][rng.gen_range(0..3)];
        let w = gaussian(out_dim, in_dim, 1.0, rng);
        let x = gaussian(n, in_dim, 1.0, rng);
        let sub = SubBranch {
            a: gaussian(rank, in_dim, 0.3, rng),
            b: gaussian(out_dim, rank, 0.3, rng),
        };
        let w_q = quantize_rtn(&w.sub(&sub.sigma())?, &QuantConfig::new(bits, group))?.dequantize();
        Ok(Self { w, x, sub, w_q })
    }

    /// Loss with the quantized term frozen.
    pub fn loss(&self, sigma: &DenseMatrix) -> Result<f64> {
        output_error_sq(&self.w.sub(&self.w_q)?.sub(sigma)?, &self.x)
    }

    /// `W - W_F` at the instance's own `Σ`.
    pub fn delta(&self) -> Result<DenseMatrix> {
        self.w.sub(&self.w_q)?.sub(&self.sub.sigma())
    }
}

fn central_difference(m: &DenseMatrix, f: impl Fn(&DenseMatrix) -> Result<f64>) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    let mut probe = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.get(i, j);
            probe.set(i, j, v + STEP);
            let up = f(&probe)?;
            probe.set(i, j, v - STEP);
            let down = f(&probe)?;
            probe.set(i, j, v);
            out.set(i, j, (up - down) / (2.0 * STEP));
        }
    }
    Ok(out)
}

fn rel_error(fd: &DenseMatrix, analytic: &DenseMatrix) -> f64 {
    let scale = analytic.max_abs().max(f64::MIN_POSITIVE);
    fd.sub(analytic).expect("same shape").max_abs() / scale
}

/// Relative errors `(Σ, A, B)` and the largest straight-through entry for one
/// instance.
pub fn check_instance(inst: &GradInstance) -> Result<(f64, f64, f64, f64)> {
    let g = gram(&inst.x);
    let delta = inst.delta()?;
    let g_sigma = grad_sigma(&delta, &g)?;
    let (g_a, g_b) = grad_ab(&g_sigma, &inst.sub)?;
    let ste = grad_sigma_with(&delta, &g, QuantizedTerm::StraightThrough)?;

    let fd_sigma = central_difference(&inst.sub.sigma(), |s| inst.loss(s))?;
    let fd_a = central_difference(&inst.sub.a, |a| inst.loss(&matmul(&inst.sub.b, a)?))?;
    let fd_b = central_difference(&inst.sub.b, |b| inst.loss(&matmul(b, &inst.sub.a)?))?;
    Ok((
        rel_error(&fd_sigma, &g_sigma),
        rel_error(&fd_a, &g_a),
        rel_error(&fd_b, &g_b),
        ste.max_abs(),
    ))
}

pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        seed,
        instances,
        max_rel_error_sigma: 0.0,
        max_rel_error_a: 0.0,
        max_rel_error_b: 0.0,
        ste_max_abs: 0.0,
    };
    for _ in 0..instances {
        let inst = GradInstance::random(&mut rng)?;
        let (s, a, b, ste) = check_instance(&inst)?;
        report.max_rel_error_sigma = report.max_rel_error_sigma.max(s);
        report.max_rel_error_a = report.max_rel_error_a.max(a);
        report.max_rel_error_b = report.max_rel_error_b.max(b);
        report.ste_max_abs = report.ste_max_abs.max(ste);
    }
    Ok(report)
}
