//! Null-space perturbations of a conventional sub-branch.
//!
//! With fewer calibration samples than input features, `XᵀX` has a null
//! space. Adding `Σ_N = U_r S_r (α N_r)` with the rows of `N_r` in that null
//! space leaves the conventional loss `‖(W - Q(W) - Σ) Xᵀ‖²` unchanged while
//! moving `Q(W) + Σ` arbitrarily far from `W`. The feedback reconstruction of
//! the same perturbed `Σ` stays within half a step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{
    baseline_subbranch, feedback_deviation, feedback_reconstruct, output_error_sq, BaselineMethod, LayerRecord,
    OptimizerSettings,
};
use crate::linalg::{gram_null_basis, matmul, orthonormalize_rows, truncated_svd, DenseMatrix, NULL_TOL};
use crate::quant::{deviation_against, quantize_rtn, QuantConfig};
use crate::synth;

pub const DEFAULT_ALPHAS: [f64; 4] = [0.0, 1.0, 10.0, 100.0];
pub const DEFAULT_TOL: f64 = 1e-8;

const SVD_TOL: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct IllposedScenario {
    /// Layer whose calibration inputs are rank-deficient.
    pub layer: LayerRecord,
    /// Conventional sub-branch solution `Σ*`.
    pub sigma_star: DenseMatrix,
    /// Rank used for `U_r`, `S_r` and `N_r`.
    pub rank: usize,
    pub alphas: Vec<f64>,
    /// Relative tolerance on the loss change.
    pub tol: f64,
}

impl IllposedScenario {
    pub fn new(
        layer: LayerRecord,
        sigma_star: DenseMatrix,
        rank: usize,
        alphas: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        let scenario = Self {
            layer,
            sigma_star,
            rank,
            alphas,
            tol,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Fits `Σ*` with the direct gradient-descent baseline on `layer`.
    pub fn from_layer(layer: LayerRecord, config: &QuantConfig, rank: usize, seed: u64) -> Result<Self> {
        let settings = OptimizerSettings {
            rank,
            seed,
            ..Default::default()
        };
        let (sub, _) = baseline_subbranch(&layer, config, rank, BaselineMethod::DirectGd, &settings)?;
        Self::new(layer, sub.sigma(), rank, DEFAULT_ALPHAS.to_vec(), DEFAULT_TOL)
    }

    /// Gaussian `dim × dim` layer with `n_samples` calibration rows.
    pub fn seeded(dim: usize, n_samples: usize, rank: usize, seed: u64, config: &QuantConfig) -> Result<Self> {
        let layer = synth::gaussian_layer("illposed", dim, dim, n_samples, seed);
        Self::from_layer(layer, config, rank, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.sigma_star.shape() != self.layer.w.shape() {
            return Err(Error::shape(
                "IllposedScenario",
                format!("Σ* is {:?}, W is {:?}", self.sigma_star.shape(), self.layer.w.shape()),
            ));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Value(format!("tol must be positive, got {}", self.tol)));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::Value(format!("alpha {a} is not finite")));
        }
        null_basis(&self.layer.x).map(|_| ())
    }
}

/// Measurements for one perturbation magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    /// `|L(Σ') - L(Σ*)| / L(Σ*)` for the conventional loss.
    pub loss_delta: f64,
    /// `max |w - (w_Q + σ')|`.
    pub max_deviation_conventional: f64,
    /// `max |w - w_F|` with `W_F = Q(W - Σ') + Σ'`.
    pub max_deviation_fbquant: f64,
    /// Half the largest group scale of `Q(W - Σ')`.
    pub bound_s_half: f64,
    /// Half the largest group scale of `Q(W)`, the step of the conventional
    /// main path.
    pub rtn_bound_s_half: f64,
    /// Feedback entries beyond half their own group scale.
    pub fbquant_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllposedReport {
    pub rank: usize,
    /// Dimension of the numerical null space of `XᵀX`.
    pub null_dim: usize,
    pub tol: f64,
    pub points: Vec<AlphaPoint>,
}

impl IllposedReport {
    pub fn loss_invariant(&self) -> bool {
        self.points.iter().all(|p| p.loss_delta <= self.tol)
    }

    pub fn conventional_increasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].max_deviation_conventional > w[0].max_deviation_conventional)
    }

    pub fn fbquant_bounded(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.fbquant_violations == 0 && p.max_deviation_fbquant <= p.bound_s_half)
    }
}

fn null_basis(x: &DenseMatrix) -> Result<DenseMatrix> {
    let basis = gram_null_basis(x, NULL_TOL)?;
    if basis.rows() == 0 {
        return Err(Error::Precondition(
            "calibration is full rank; ill-posedness premise fails".into(),
        ));
    }
    Ok(basis)
}

/// `Σ_N = U_r · diag(S_r) · (α N_r)`, where `U_r S_r` come from the rank-`r`
/// SVD of `Σ*` and the rows of `N_r` span part of the null space of `XᵀX`.
pub fn build_perturbation(
    sigma_star: &DenseMatrix,
    x: &DenseMatrix,
    rank: usize,
    alpha: f64,
) -> Result<DenseMatrix> {
    if sigma_star.cols() != x.cols() {
        return Err(Error::shape(
            "build_perturbation",
            format!("Σ* is {:?}, X is {:?}", sigma_star.shape(), x.shape()),
        ));
    }
    let basis = null_basis(x)?;
    let n_r = cycled_rows(&basis, rank);
    perturbation_from(sigma_star, &n_r, rank, alpha)
}

/// First `rank` rows of `basis`, repeating from the top when it has fewer,
/// then orthonormalized (repeats become zero rows).
fn cycled_rows(basis: &DenseMatrix, rank: usize) -> DenseMatrix {
    let q = basis.rows();
    let picked = DenseMatrix::from_fn(rank, basis.cols(), |i, j| basis.get(i % q, j));
    orthonormalize_rows(&picked)
}

fn perturbation_from(sigma_star: &DenseMatrix, n_r: &DenseMatrix, rank: usize, alpha: f64) -> Result<DenseMatrix> {
    let svd = truncated_svd(sigma_star, rank, SVD_TOL)?;
    let mut us = svd.u;
    for i in 0..us.rows() {
        for (p, v) in us.row_mut(i).iter_mut().enumerate() {
            *v *= svd.s[p];
        }
    }
    matmul(&us, &n_r.scale(alpha))
}

/// Perturbs `Σ*` by every `α` of the scenario and measures loss drift and
/// weight deviations of the conventional and feedback reconstructions.
pub fn run_illposed_demo(scenario: &IllposedScenario, config: &QuantConfig) -> Result<IllposedReport> {
    scenario.validate()?;
    config.validate()?;
    let IllposedScenario {
        layer,
        sigma_star,
        rank,
        tol,
        ..
    } = scenario;
    let basis = null_basis(&layer.x)?;
    let n_r = cycled_rows(&basis, *rank);

    let q = quantize_rtn(&layer.w, config)?;
    let w_q = q.dequantize::<f64>();
    let rtn_error = layer.w.sub(&w_q)?;
    let base_loss = output_error_sq(&rtn_error.sub(sigma_star)?, &layer.x)?;
    let loss_scale = if base_loss > 0.0 { base_loss } else { 1.0 };

    let points = scenario
        .alphas
        .par_iter()
        .map(|&alpha| -> Result<AlphaPoint> {
            let sigma_n = perturbation_from(sigma_star, &n_r, *rank, alpha)?;
            let sigma_p = sigma_star.add(&sigma_n)?;
            let loss = output_error_sq(&rtn_error.sub(&sigma_p)?, &layer.x)?;
            let conventional = w_q.add(&sigma_p)?;
            let (max_conv, _) = deviation_against(&layer.w, &conventional, &q);
            let (_, q_f) = feedback_reconstruct(&layer.w, &sigma_p, config)?;
            let (max_fb, violations) = feedback_deviation(&layer.w, &sigma_p, &q_f)?;
            Ok(AlphaPoint {
                alpha,
                loss_delta: (loss - base_loss).abs() / loss_scale,
                max_deviation_conventional: max_conv,
                max_deviation_fbquant: max_fb,
                bound_s_half: q_f.max_half_scale(),
                rtn_bound_s_half: q.max_half_scale(),
                fbquant_violations: violations,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(IllposedReport {
        rank: *rank,
        null_dim: basis.rows(),
        tol: *tol,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_sq, gram};
    use crate::synth::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rank2_sigma(d: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = gaussian(d, 2, 1.0, &mut rng);
        let a = gaussian(2, d, 1.0, &mut rng);
        matmul(&b, &a).unwrap()
    }

    #[test]
    fn zero_alpha_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(4, 16, 1.0, &mut rng);
        let n = build_perturbation(&rank2_sigma(16, 2), &x, 2, 0.0).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbation_is_annihilated_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(4, 16, 1.0, &mut rng);
        let s = rank2_sigma(16, 4);
        let g = gram(&x);
        let one = build_perturbation(&s, &x, 2, 1.0).unwrap();
        let ten = build_perturbation(&s, &x, 2, 10.0).unwrap();
        let ng = matmul(&ten, &g).unwrap();
        let bound = 1e-9 * frobenius_sq(&ten).sqrt() * frobenius_sq(&g).sqrt();
        assert!(frobenius_sq(&ng).sqrt() <= bound);
        let ratio = frobenius_sq(&ten).sqrt() / frobenius_sq(&one).sqrt();
        assert!((ratio - 10.0).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn full_rank_calibration_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(32, 8, 1.0, &mut rng);
        let err = build_perturbation(&rank2_sigma(8, 6), &x, 2, 1.0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn short_null_basis_is_cycled() {
        let basis = DenseMatrix::<f64>::from_rows(&[[0.0, 1.0, 0.0]]);
        let n = cycled_rows(&basis, 3);
        assert_eq!(n.row(0), &[0.0, 1.0, 0.0]);
        assert!(n.row(1).iter().chain(n.row(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_demo_shows_divergence() {
        let cfg = QuantConfig::new(4, 8);
        let scenario = IllposedScenario::seeded(32, 8, 4, 11, &cfg).unwrap();
        let report = run_illposed_demo(&scenario, &cfg).unwrap();
        assert_eq!(report.points.len(), 4);
        assert!(report.loss_invariant(), "{report:?}");
        assert!(report.conventional_increasing(), "{report:?}");
        assert!(report.fbquant_bounded(), "{report:?}");
        let (p10, p100) = (&report.points[2], &report.points[3]);
        assert!(p100.max_deviation_conventional >= 0.9 * 10.0 * p10.max_deviation_conventional);
        assert!(p100.max_deviation_conventional > p100.rtn_bound_s_half);
    }
}
