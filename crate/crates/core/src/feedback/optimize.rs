use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gram, truncated_svd, DenseMatrix};
use crate::quant::{deviation_against, quantize_rtn, QuantConfig, QuantizedTensor};

use super::loss::{grad_ab, grad_sigma, loss_from_gram};
use super::{
    feedback_deviation, feedback_reconstruct, BaselineMethod, LayerRecord, Method, OptimizerSettings,
    ReconstructionReport, StepRule, SubBranch,
};

const MAX_HALVINGS: usize = 20;
const MAX_DOUBLINGS: usize = 20;
const SVD_TOL: f64 = 1e-15;

/// Quantized main path, fitted sub-branch and report for one layer.
#[derive(Debug, Clone)]
pub struct LayerResult {
    pub quantized: QuantizedTensor,
    pub sub: SubBranch,
    pub report: ReconstructionReport,
}

/// State of the sub-branch at one point of the descent.
struct Evaluated {
    loss: f64,
    /// Residual the loss is measured on (`W - W_F` or `Δ - Σ`).
    delta: DenseMatrix,
}

/// Objective being minimized over `(A, B)`.
trait Objective {
    fn evaluate(&self, sub: &SubBranch) -> Result<Evaluated>;
}

/// `‖(W - Q(W - Σ) - Σ) Xᵀ‖²`, quantized term recomputed at every point.
struct FeedbackObjective<'a> {
    w: &'a DenseMatrix,
    gram: &'a DenseMatrix,
    config: &'a QuantConfig,
}

impl Objective for FeedbackObjective<'_> {
    fn evaluate(&self, sub: &SubBranch) -> Result<Evaluated> {
        let (w_f, _) = feedback_reconstruct(self.w, &sub.sigma(), self.config)?;
        let delta = self.w.sub(&w_f)?;
        Ok(Evaluated {
            loss: loss_from_gram(&delta, self.gram)?,
            delta,
        })
    }
}

/// `‖(Δ - Σ) Xᵀ‖²` with `Δ = W - Q(W)` fixed.
struct ConventionalObjective<'a> {
    rtn_error: &'a DenseMatrix,
    gram: &'a DenseMatrix,
}

impl Objective for ConventionalObjective<'_> {
    fn evaluate(&self, sub: &SubBranch) -> Result<Evaluated> {
        let delta = self.rtn_error.sub(&sub.sigma())?;
        Ok(Evaluated {
            loss: loss_from_gram(&delta, self.gram)?,
            delta,
        })
    }
}

fn step(sub: &SubBranch, grad_a: &DenseMatrix, grad_b: &DenseMatrix, eta: f64) -> SubBranch {
    let mut next = sub.clone();
    next.a.axpy(-eta, grad_a).expect("gradient matches A");
    next.b.axpy(-eta, grad_b).expect("gradient matches B");
    next
}

/// Gradient descent on `(A, B)`. Returns the final sub-branch and the loss
/// after every epoch, starting with the loss at `Σ = 0`.
fn descend(
    objective: &impl Objective,
    gram_x: &DenseMatrix,
    mut sub: SubBranch,
    settings: &OptimizerSettings,
) -> Result<(SubBranch, Vec<f64>)> {
    let mut current = objective.evaluate(&sub)?;
    if !current.loss.is_finite() {
        return Err(Error::Numeric { what: "loss", epoch: 0 });
    }
    let mut losses = vec![current.loss];
    let mut eta = settings.learning_rate;
    for epoch in 1..=settings.epochs {
        if current.loss == 0.0 {
            break;
        }
        let g_sigma = grad_sigma(&current.delta, gram_x)?;
        let (g_a, g_b) = grad_ab(&g_sigma, &sub)?;
        if !(g_a.is_finite() && g_b.is_finite()) {
            return Err(Error::Numeric { what: "gradient", epoch });
        }
        match settings.step_rule {
            StepRule::Fixed => {
                sub = step(&sub, &g_a, &g_b, eta);
                current = objective.evaluate(&sub)?;
            }
            StepRule::Backtracking => {
                let mut accepted: Option<(SubBranch, Evaluated)> = None;
                for _ in 0..=MAX_HALVINGS {
                    let cand = step(&sub, &g_a, &g_b, eta);
                    let eval = objective.evaluate(&cand)?;
                    if eval.loss < current.loss {
                        accepted = Some((cand, eval));
                        break;
                    }
                    eta *= 0.5;
                }
                if let Some((mut best, mut best_eval)) = accepted {
                    // Keep stretching the step while it still pays off.
                    for _ in 0..MAX_DOUBLINGS {
                        let cand = step(&sub, &g_a, &g_b, eta * 2.0);
                        let eval = objective.evaluate(&cand)?;
                        if eval.loss.partial_cmp(&best_eval.loss) != Some(std::cmp::Ordering::Less) {
                            break;
                        }
                        eta *= 2.0;
                        best = cand;
                        best_eval = eval;
                    }
                    sub = best;
                    current = best_eval;
                } else {
                    // No descent within the halving budget; stay put and
                    // restart the next epoch from the original step.
                    eta = settings.learning_rate;
                }
            }
        }
        if !current.loss.is_finite() {
            return Err(Error::Numeric { what: "loss", epoch });
        }
        losses.push(current.loss);
    }
    Ok((sub, losses))
}

fn rtn_parts(layer: &LayerRecord, config: &QuantConfig) -> Result<(QuantizedTensor, DenseMatrix)> {
    let q = quantize_rtn(&layer.w, config)?;
    let w_q = q.dequantize::<f64>();
    let delta = layer.w.sub(&w_q)?;
    Ok((q, delta))
}

/// Fits the feedback sub-branch of one layer.
///
/// `A` starts as `N(0, (sigma_init / sqrt(in_dim))²)` drawn from the layer's
/// RNG stream and `B` at zero, so the first loss is plain RTN. Each epoch
/// recomputes `Q(W - Σ)` (scales included), takes the detached gradient and
/// updates `A`, `B`. With [`StepRule::Backtracking`] the recorded loss never
/// increases.
pub fn optimize_layer(
    layer: &LayerRecord,
    config: &QuantConfig,
    settings: &OptimizerSettings,
) -> Result<(SubBranch, ReconstructionReport)> {
    layer.validate()?;
    config.validate()?;
    settings.validate()?;
    let (out_dim, in_dim) = layer.w.shape();
    let gram_x = gram(&layer.x);
    let mut rng = settings.layer_rng(&layer.name);
    let std = settings.sigma_init / (in_dim.max(1) as f64).sqrt();
    let init = SubBranch::init(out_dim, in_dim, settings.rank, std, &mut rng);

    let objective = FeedbackObjective {
        w: &layer.w,
        gram: &gram_x,
        config,
    };
    let (sub, losses) = descend(&objective, &gram_x, init, settings)?;

    let sigma = sub.sigma();
    let (_, q) = feedback_reconstruct(&layer.w, &sigma, config)?;
    let (max_dev, violations) = feedback_deviation(&layer.w, &sigma, &q)?;
    let report = ReconstructionReport {
        layer: layer.name.clone(),
        method: Method::Fbquant,
        initial_rtn_loss: losses[0],
        final_loss: *losses.last().expect("at least the initial loss"),
        loss_per_epoch: losses,
        max_weight_deviation: max_dev,
        bound_s_half: q.max_half_scale(),
        bound_violations: violations,
    };
    Ok((sub, report))
}

fn conventional_report(
    layer: &LayerRecord,
    method: Method,
    q: &QuantizedTensor,
    sub: &SubBranch,
    losses: Vec<f64>,
) -> Result<ReconstructionReport> {
    let recon = q.dequantize::<f64>().add(&sub.sigma())?;
    let (max_dev, violations) = deviation_against(&layer.w, &recon, q);
    Ok(ReconstructionReport {
        layer: layer.name.clone(),
        method,
        initial_rtn_loss: losses[0],
        final_loss: *losses.last().expect("at least the initial loss"),
        loss_per_epoch: losses,
        max_weight_deviation: max_dev,
        bound_s_half: q.max_half_scale(),
        bound_violations: violations,
    })
}

/// Conventional sub-branch `W' = Q(W) + Σ` built either from the truncated
/// SVD of the RTN error or by gradient descent on the conventional output
/// loss. Nothing bounds `|w - w'|` here; the report counts entries beyond
/// half their group scale.
pub fn baseline_subbranch(
    layer: &LayerRecord,
    config: &QuantConfig,
    rank: usize,
    method: BaselineMethod,
    settings: &OptimizerSettings,
) -> Result<(SubBranch, ReconstructionReport)> {
    layer.validate()?;
    config.validate()?;
    let (q, rtn_error) = rtn_parts(layer, config)?;
    let gram_x = gram(&layer.x);
    let rtn_loss = loss_from_gram(&rtn_error, &gram_x)?;
    let (out_dim, in_dim) = layer.w.shape();

    let (sub, losses, tag) = match method {
        BaselineMethod::SvdOfDelta => {
            let k = rank.min(out_dim.min(in_dim));
            let sub = if k == 0 {
                SubBranch::empty(out_dim, in_dim)
            } else {
                let svd = truncated_svd(&rtn_error, k, SVD_TOL)?;
                let mut b = svd.u.clone();
                for i in 0..out_dim {
                    for (p, v) in b.row_mut(i).iter_mut().enumerate() {
                        *v *= svd.s[p];
                    }
                }
                SubBranch { a: svd.v, b }
            };
            let mut losses = vec![rtn_loss];
            if k > 0 {
                losses.push(loss_from_gram(&rtn_error.sub(&sub.sigma())?, &gram_x)?);
            }
            (sub, losses, Method::SvdDelta)
        }
        BaselineMethod::DirectGd => {
            if rank == 0 {
                (SubBranch::empty(out_dim, in_dim), vec![rtn_loss], Method::DirectGd)
            } else {
                let settings = OptimizerSettings { rank, ..*settings };
                settings.validate()?;
                let mut rng = settings.layer_rng(&layer.name);
                let std = settings.sigma_init / (in_dim.max(1) as f64).sqrt();
                let init = SubBranch::init(out_dim, in_dim, rank, std, &mut rng);
                let objective = ConventionalObjective {
                    rtn_error: &rtn_error,
                    gram: &gram_x,
                };
                let (sub, losses) = descend(&objective, &gram_x, init, &settings)?;
                (sub, losses, Method::DirectGd)
            }
        }
    };
    let report = conventional_report(layer, tag, &q, &sub, losses)?;
    Ok((sub, report))
}

fn quantize_layer(
    layer: &LayerRecord,
    config: &QuantConfig,
    settings: &OptimizerSettings,
    method: Method,
) -> Result<LayerResult> {
    match method {
        Method::Fbquant => {
            let (sub, report) = optimize_layer(layer, config, settings)?;
            let quantized = quantize_rtn(&layer.w.sub(&sub.sigma())?, config)?;
            Ok(LayerResult {
                quantized,
                sub,
                report,
            })
        }
        Method::Rtn => {
            layer.validate()?;
            let (q, rtn_error) = rtn_parts(layer, config)?;
            let loss = loss_from_gram(&rtn_error, &gram(&layer.x))?;
            let sub = SubBranch::empty(layer.w.rows(), layer.w.cols());
            let report = conventional_report(layer, Method::Rtn, &q, &sub, vec![loss])?;
            Ok(LayerResult {
                quantized: q,
                sub,
                report,
            })
        }
        Method::SvdDelta | Method::DirectGd => {
            let baseline = if method == Method::SvdDelta {
                BaselineMethod::SvdOfDelta
            } else {
                BaselineMethod::DirectGd
            };
            let (sub, report) =
                baseline_subbranch(layer, config, settings.rank, baseline, settings)?;
            Ok(LayerResult {
                quantized: quantize_rtn(&layer.w, config)?,
                sub,
                report,
            })
        }
    }
}

/// Runs `method` on every layer independently (in parallel). Output order
/// follows input order; each layer's randomness depends only on the seed and
/// its name.
pub fn quantize_model(
    layers: &[LayerRecord],
    config: &QuantConfig,
    settings: &OptimizerSettings,
    method: Method,
) -> Result<Vec<LayerResult>> {
    if layers.is_empty() {
        return Err(Error::Value("no layers to quantize".into()));
    }
    layers
        .par_iter()
        .map(|layer| quantize_layer(layer, config, settings, method).map_err(|e| e.in_layer(&layer.name)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::reconstruction_loss;
    use crate::synth;

    fn layer(seed: u64) -> LayerRecord {
        synth::gaussian_layer("L", 16, 32, 8, seed)
    }

    fn settings() -> OptimizerSettings {
        OptimizerSettings {
            rank: 4,
            epochs: 10,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn first_loss_is_rtn_and_losses_never_rise() {
        let l = layer(1);
        let cfg = QuantConfig::new(3, 8);
        let (sub, report) = optimize_layer(&l, &cfg, &settings()).unwrap();
        let rtn = quantize_rtn(&l.w, &cfg).unwrap().dequantize::<f64>();
        let rtn_loss = reconstruction_loss(&l.w, &rtn, &l.x).unwrap();
        assert!((report.loss_per_epoch[0] - rtn_loss).abs() <= 1e-12 * rtn_loss);
        assert_eq!(report.loss_per_epoch.len(), 11);
        assert!(report.loss_per_epoch.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_loss < report.initial_rtn_loss);
        assert_eq!(report.bound_violations, 0);
        assert_eq!(sub.rank(), 4);
    }

    #[test]
    fn on_grid_weights_stay_put() {
        let cfg = QuantConfig::new(2, 8);
        let w = DenseMatrix::from_fn(4, 8, |i, j| ((i + j) % 4) as f64 - 1.0);
        let x = DenseMatrix::from_fn(3, 8, |i, j| (i + 2 * j) as f64 * 0.1);
        let l = LayerRecord::new("grid", w, x).unwrap();
        let (sub, report) = optimize_layer(&l, &cfg, &settings()).unwrap();
        assert_eq!(report.initial_rtn_loss, 0.0);
        assert_eq!(report.final_loss, 0.0);
        assert_eq!(report.loss_per_epoch.len(), 1);
        assert!(sub.sigma().max_abs() == 0.0);
    }

    #[test]
    fn all_zero_weights_exit_after_first_epoch() {
        let l = LayerRecord::new("z", DenseMatrix::zeros(3, 8), DenseMatrix::identity(8)).unwrap();
        let (_, report) = optimize_layer(&l, &QuantConfig::new(4, 8), &settings()).unwrap();
        assert_eq!(report.loss_per_epoch, vec![0.0]);
    }

    #[test]
    fn svd_baseline_recovers_low_rank_error() {
        let l = layer(2);
        let cfg = QuantConfig::new(3, 8);
        let (sub, report) =
            baseline_subbranch(&l, &cfg, 16, BaselineMethod::SvdOfDelta, &settings()).unwrap();
        // rank 16 = min(out, in): Δ is reproduced, so W' == W up to rounding.
        let q = quantize_rtn(&l.w, &cfg).unwrap();
        let recon = q.dequantize::<f64>().add(&sub.sigma()).unwrap();
        assert!(l.w.sub(&recon).unwrap().max_abs() < 1e-12);
        assert!(report.final_loss <= 1e-20 * report.initial_rtn_loss.max(1.0));
    }

    #[test]
    fn rank_zero_baselines_are_rtn() {
        let l = layer(3);
        let cfg = QuantConfig::new(4, 8);
        for m in [BaselineMethod::SvdOfDelta, BaselineMethod::DirectGd] {
            let (sub, report) = baseline_subbranch(&l, &cfg, 0, m, &settings()).unwrap();
            assert_eq!(sub.rank(), 0);
            assert_eq!(report.loss_per_epoch.len(), 1);
            assert_eq!(report.final_loss, report.initial_rtn_loss);
            assert_eq!(report.bound_violations, 0);
        }
    }

    #[test]
    fn model_order_and_single_layer_agree() {
        let layers = vec![layer(4), synth::gaussian_layer("M", 8, 32, 8, 5)];
        let cfg = QuantConfig::new(3, 8);
        let s = settings();
        let out = quantize_model(&layers, &cfg, &s, Method::Fbquant).unwrap();
        let (sub, report) = optimize_layer(&layers[0], &cfg, &s).unwrap();
        assert_eq!(out[0].sub, sub);
        assert_eq!(out[0].report, report);
        let reversed: Vec<_> = layers.iter().rev().cloned().collect();
        let out_rev = quantize_model(&reversed, &cfg, &s, Method::Fbquant).unwrap();
        assert_eq!(out_rev[1].sub, out[0].sub);
        assert_eq!(out_rev[0].report, out[1].report);
    }

    #[test]
    fn model_errors_name_the_layer() {
        let mut bad = layer(6);
        bad.name = "broken".into();
        bad.x = DenseMatrix::zeros(4, 31);
        let err = quantize_model(&[bad], &QuantConfig::new(4, 8), &settings(), Method::Rtn).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
        assert!(quantize_model(&[], &QuantConfig::new(4, 8), &settings(), Method::Rtn).is_err());
    }
}
