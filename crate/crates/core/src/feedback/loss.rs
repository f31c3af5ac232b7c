//! Layer-wise reconstruction loss and its detached gradients.

use crate::error::{Error, Result};
use crate::linalg::{dot, frobenius_sq, gram, matmul, matmul_nt, DenseMatrix};

use super::SubBranch;

/// `tr(Δ · G · Δᵀ)` for `Δ = w - w_f` and `G = XᵀX`, i.e. the squared
/// Frobenius norm of the output error `‖W Xᵀ - W_F Xᵀ‖²_F`.
pub fn reconstruction_loss(
    w: &DenseMatrix,
    w_f: &DenseMatrix,
    x: &DenseMatrix,
) -> Result<f64> {
    if x.cols() != w.cols() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("x has {} features, w has {} inputs", x.cols(), w.cols()),
        ));
    }
    let delta = w.sub(w_f)?;
    loss_from_gram(&delta, &gram(x))
}

/// `tr(Δ · G · Δᵀ)` with a precomputed Gram matrix.
pub fn loss_from_gram(delta: &DenseMatrix, gram_x: &DenseMatrix) -> Result<f64> {
    let dg = matmul(delta, gram_x)
        .map_err(|_| Error::shape("loss_from_gram", "delta.cols != gram.rows"))?;
    // tr(A Bᵀ) = Σ_ij A_ij B_ij
    Ok(dot(dg.data(), delta.data()))
}

/// Direct form `‖Δ Xᵀ‖²_F`. Same value as the trace form; used where the
/// calibration samples themselves are at hand (evaluation on held-out X).
pub fn output_error_sq(delta: &DenseMatrix, x: &DenseMatrix) -> Result<f64> {
    Ok(frobenius_sq(&matmul_nt(delta, x)?))
}

/// How the quantized term `Q(W - Σ)` enters the chain rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizedTerm {
    /// Treated as a constant: `∂Δ_F/∂Σ = -I`.
    Detached,
    /// Differentiated with the straight-through estimator `∂Q(u)/∂u ≈ I`.
    StraightThrough,
}

impl QuantizedTerm {
    /// Scalar coefficient of `∂Δ_F/∂Σ` for `Δ_F = W - Q(W - Σ) - Σ`:
    /// `∂W/∂Σ` (0) minus `∂Q(W - Σ)/∂Σ` minus `∂Σ/∂Σ` (1).
    pub fn delta_jacobian(self) -> f64 {
        let d_w = 0.0;
        let d_quant = match self {
            QuantizedTerm::Detached => 0.0,
            // STE passes the inner derivative -I straight through.
            QuantizedTerm::StraightThrough => -1.0,
        };
        d_w - d_quant - 1.0
    }
}

/// `∂L/∂Σ = (2 Δ_F G) · ∂Δ_F/∂Σ` under the given treatment of the quantized
/// term. With [`QuantizedTerm::Detached`] this is `-2 Δ_F G`; with the
/// straight-through estimator the Jacobian cancels to zero.
pub fn grad_sigma_with(
    delta_f: &DenseMatrix,
    gram_x: &DenseMatrix,
    term: QuantizedTerm,
) -> Result<DenseMatrix> {
    if delta_f.cols() != gram_x.rows() {
        return Err(Error::shape(
            "grad_sigma",
            format!("delta is {:?}, gram is {:?}", delta_f.shape(), gram_x.shape()),
        ));
    }
    let outer = matmul(delta_f, gram_x)?.scale(2.0);
    let jac = term.delta_jacobian();
    Ok(outer.map(|v| v * jac))
}

/// Gradient of the feedback loss with respect to `Σ`, quantized term
/// detached: `-2 Δ_F XᵀX`.
pub fn grad_sigma(delta_f: &DenseMatrix, gram_x: &DenseMatrix) -> Result<DenseMatrix> {
    grad_sigma_with(delta_f, gram_x, QuantizedTerm::Detached)
}

/// Chain rule through `Σ = B · A`: returns `(∂L/∂A, ∂L/∂B)` as
/// `(Bᵀ · gΣ, gΣ · Aᵀ)`.
pub fn grad_ab(grad_sigma: &DenseMatrix, sub: &SubBranch) -> Result<(DenseMatrix, DenseMatrix)> {
    let (out_dim, in_dim) = grad_sigma.shape();
    if sub.b.rows() != out_dim || sub.a.cols() != in_dim {
        return Err(Error::shape(
            "grad_ab",
            format!(
                "gradient is {out_dim}x{in_dim}, sub-branch is B {:?} A {:?}",
                sub.b.shape(),
                sub.a.shape()
            ),
        ));
    }
    let grad_a = matmul(&sub.b.transpose(), grad_sigma)?;
    let grad_b = matmul_nt(grad_sigma, &sub.a)?;
    Ok((grad_a, grad_b))
}
