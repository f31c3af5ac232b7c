//! Feedback sub-branch quantization.
//!
//! A linear layer `W` is stored as a quantized main path plus a low-rank
//! sub-branch `Σ = B·A`. Instead of quantizing `W` directly, the main path
//! quantizes `W - Σ`, and the sub-branch adds `Σ` back:
//!
//! ```text
//! W_F = Q(W - Σ) + Σ        |w - w_F| = |(w - σ) - Q(w - σ)| <= s/2
//! ```
//!
//! so every reconstructed weight stays within half a quantization step of
//! the original no matter what `Σ` is. `Σ` is then fitted per layer by
//! gradient descent on the output reconstruction error, with the quantized
//! term detached from the gradient (see [`loss`]).

pub mod loss;
mod optimize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, DenseMatrix};
use crate::quant::{deviation_against, quantize_rtn, QuantConfig, QuantizedTensor};

pub use loss::{
    grad_ab, grad_sigma, grad_sigma_with, loss_from_gram, output_error_sq, reconstruction_loss,
    QuantizedTerm,
};
pub use optimize::{baseline_subbranch, optimize_layer, quantize_model, LayerResult};

pub const DEFAULT_RANK: usize = 128;
pub const DEFAULT_EPOCHS: usize = 20;

/// Low-rank pair realizing `Σ = B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBranch {
    /// Down-projection, `rank × in_dim`.
    pub a: DenseMatrix,
    /// Up-projection, `out_dim × rank`.
    pub b: DenseMatrix,
}

impl SubBranch {
    /// `A ~ N(0, std²)`, `B = 0`.
    pub fn init(out_dim: usize, in_dim: usize, rank: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        Self {
            a: DenseMatrix::from_fn(rank, in_dim, |_, _| normal.sample(rng)),
            b: DenseMatrix::zeros(out_dim, rank),
        }
    }

    pub fn empty(out_dim: usize, in_dim: usize) -> Self {
        Self {
            a: DenseMatrix::zeros(0, in_dim),
            b: DenseMatrix::zeros(out_dim, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn sigma(&self) -> DenseMatrix {
        matmul(&self.b, &self.a).expect("sub-branch factors share the rank dimension")
    }

    fn check(&self) -> Result<()> {
        if self.b.cols() != self.a.rows() {
            return Err(Error::shape(
                "SubBranch",
                format!("B is {:?}, A is {:?}", self.b.shape(), self.a.shape()),
            ));
        }
        Ok(())
    }
}

/// One linear layer and the calibration inputs captured for it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    /// `out_dim × in_dim`.
    pub w: DenseMatrix,
    /// `n_samples × in_dim`.
    pub x: DenseMatrix,
}

impl LayerRecord {
    pub fn new(name: impl Into<String>, w: DenseMatrix, x: DenseMatrix) -> Result<Self> {
        let rec = Self {
            name: name.into(),
            w,
            x,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.cols() != self.x.cols() {
            return Err(Error::shape(
                "LayerRecord",
                format!(
                    "`{}`: weight has {} inputs, calibration has {} features",
                    self.name,
                    self.w.cols(),
                    self.x.cols()
                ),
            ));
        }
        if self.x.rows() == 0 {
            return Err(Error::Value(format!("`{}` has no calibration samples", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Plain gradient descent with a constant step.
    Fixed,
    /// Line search along the gradient: halve the step until the loss drops,
    /// double it while the loss keeps dropping.
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub rank: usize,
    pub seed: u64,
    /// Standard deviation of `A` at init, before the `1/sqrt(in_dim)` factor.
    pub sigma_init: f64,
    pub step_rule: StepRule,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: 1e-3,
            rank: DEFAULT_RANK,
            seed: 0,
            sigma_init: 0.02,
            step_rule: StepRule::Backtracking,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Value("epochs must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Value("rank must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Value(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::Value(format!("sigma_init must be >= 0, got {}", self.sigma_init)));
        }
        Ok(())
    }

    /// RNG for one layer. Streams depend on the seed and the layer name only,
    /// so layer order and scheduling never change results.
    pub fn layer_rng(&self, layer: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, layer))
    }
}

fn mix_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer over both.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which sub-branch construction to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Feedback reconstruction fitted by detached gradient descent.
    Fbquant,
    /// Plain round-to-nearest, no sub-branch.
    Rtn,
    /// Truncated SVD of the RTN weight error.
    SvdDelta,
    /// Gradient descent on the conventional objective `‖(W - W_Q - Σ) Xᵀ‖²`.
    DirectGd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbquant => "fbquant",
            Method::Rtn => "rtn",
            Method::SvdDelta => "svd_delta",
            Method::DirectGd => "direct_gd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbquant" => Ok(Method::Fbquant),
            "rtn" => Ok(Method::Rtn),
            "svd_delta" | "svd_of_delta" => Ok(Method::SvdDelta),
            "direct_gd" => Ok(Method::DirectGd),
            other => Err(Error::Value(format!("unknown method `{other}`"))),
        }
    }
}

/// Conventional sub-branch baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    SvdOfDelta,
    DirectGd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub layer: String,
    pub method: Method,
    /// Squared output error; entry 0 is plain RTN (`Σ = 0`), then one entry
    /// per completed epoch.
    pub loss_per_epoch: Vec<f64>,
    pub initial_rtn_loss: f64,
    pub final_loss: f64,
    pub max_weight_deviation: f64,
    /// Half of the largest group scale of the main-path quantizer.
    pub bound_s_half: f64,
    /// Entries whose deviation exceeds half of their own group scale.
    pub bound_violations: usize,
}

/// `W_F = Q(W - Σ) + Σ` for an explicit `Σ`. Scales are recomputed from
/// `W - Σ`.
pub fn feedback_reconstruct(
    w: &DenseMatrix,
    sigma: &DenseMatrix,
    config: &QuantConfig,
) -> Result<(DenseMatrix, QuantizedTensor)> {
    let residual = w.sub(sigma).map_err(|_| {
        Error::shape(
            "fb_reconstruct",
            format!("W is {:?}, Σ is {:?}", w.shape(), sigma.shape()),
        )
    })?;
    let q = quantize_rtn(&residual, config)?;
    let w_f = q.dequantize::<f64>().add(sigma)?;
    Ok((w_f, q))
}

/// Largest `|w - w_F|` and the number of entries beyond half their group
/// scale, for `q = Q(W - Σ)`.
///
/// Measured as `|(w - σ) - Q(w - σ)|` on the quantizer's own input: the same
/// quantity as `w - w_F` without the rounding of forming `Q(W - Σ) + Σ`.
pub fn feedback_deviation(w: &DenseMatrix, sigma: &DenseMatrix, q: &QuantizedTensor) -> Result<(f64, usize)> {
    let residual = w.sub(sigma)?;
    Ok(deviation_against(&residual, &q.dequantize::<f64>(), q))
}

/// `W_F = Q(W - B·A) + B·A`.
pub fn fb_reconstruct(
    w: &DenseMatrix,
    sub: &SubBranch,
    config: &QuantConfig,
) -> Result<(DenseMatrix, QuantizedTensor)> {
    sub.check()?;
    if sub.out_dim() != w.rows() || sub.in_dim() != w.cols() {
        return Err(Error::shape(
            "fb_reconstruct",
            format!(
                "W is {:?}, sub-branch maps {} -> {}",
                w.shape(),
                sub.in_dim(),
                sub.out_dim()
            ),
        ));
    }
    feedback_reconstruct(w, &sub.sigma(), config)
}
