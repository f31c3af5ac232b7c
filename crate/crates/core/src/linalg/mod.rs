//! Small deterministic dense linear algebra: products, norms, Gram matrices,
//! Jacobi SVD and null-space bases.

mod matrix;
mod svd;

pub use matrix::{dot, frobenius_sq, gram, matmul, matmul_nt, trace, DenseMatrix, Scalar};
pub use svd::{
    gram_null_basis, orthonormalize_rows, symmetric_eigen, truncated_svd, SvdResult, MAX_SWEEPS,
    NULL_TOL,
};
