//! Library linear algebra and runtime against independent references:
//! nalgebra for SVD and symmetric eigenproblems, an f64 dense forward pass
//! for the kernels.

mod common;

use common::*;
use feedback_quant::feedback::{baseline_subbranch, BaselineMethod, OptimizerSettings, SubBranch};
use feedback_quant::linalg::{gram, gram_null_basis, symmetric_eigen, truncated_svd, DenseMatrix, NULL_TOL};
use feedback_quant::quant::{quantize_rtn, QuantConfig};
use feedback_quant::runtime::{fused_forward, naive_forward, FusedLayer, TrafficCounter};
use feedback_quant::synth;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j))
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..40 {
        let m = rng.gen_range(1..40);
        let n = rng.gen_range(1..40);
        let a = randn(m, n, 1.0, &mut rng);
        let k = m.min(n);
        let ours = truncated_svd(&a, k, 1e-15).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (s, t) in ours.s.iter().zip(&theirs) {
            assert!((s - t).abs() <= 1e-10 * theirs[0], "{m}x{n}: {s} vs {t}");
        }
        assert!(max_abs_diff(&ours.reconstruct(), &a) <= 1e-10 * theirs[0]);
    }
}

#[test]
fn truncated_svd_is_best_low_rank_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let a = randn(30, 20, 1.0, &mut rng);
    let na = to_na(&a);
    let sv = {
        let mut v: Vec<f64> = na.singular_values().iter().copied().collect();
        v.sort_by(|x, y| y.partial_cmp(x).unwrap());
        v
    };
    for k in [1, 4, 10] {
        let approx = truncated_svd(&a, k, 1e-15).unwrap().reconstruct();
        let err: f64 = (0..30)
            .flat_map(|i| (0..20).map(move |j| (i, j)))
            .map(|(i, j)| (a.get(i, j) - approx.get(i, j)).powi(2))
            .sum();
        // Eckart–Young: the residual is the tail of the spectrum.
        let tail: f64 = sv[k..].iter().map(|s| s * s).sum();
        assert!((err - tail).abs() <= 1e-9 * tail.max(1.0), "k={k}: {err} vs {tail}");
    }
}

#[test]
fn eigenvalues_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for d in [1, 2, 5, 17, 48] {
        let x = randn(d + 3, d, 1.0, &mut rng);
        let g = gram(&x);
        let (mut ours, vecs) = symmetric_eigen(&g).unwrap();
        let ng = to_na(&g);
        let mut theirs: Vec<f64> = ng.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ours.sort_by(|a, b| a.partial_cmp(b).unwrap());
        theirs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = theirs[d - 1];
        for (o, t) in ours.iter().zip(&theirs) {
            assert!((o - t).abs() <= 1e-11 * top, "d={d}: {o} vs {t}");
        }
        // Rows are orthonormal eigenvectors.
        let v = to_na(&vecs);
        let eye = &v * v.transpose();
        assert!((eye - DMatrix::<f64>::identity(d, d)).amax() < 1e-12);
    }
}

#[test]
fn null_basis_matches_nalgebra_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for (n, d) in [(4, 16), (10, 32), (31, 32), (40, 32), (1, 7)] {
        let x = randn(n, d, 1.0, &mut rng);
        let basis = gram_null_basis(&x, NULL_TOL).unwrap();
        let rank = to_na(&x).rank(1e-10);
        assert_eq!(basis.rows(), d - rank, "n={n} d={d}");
        if basis.rows() > 0 {
            let b = to_na(&basis);
            // Orthonormal and annihilated by X.
            assert!((&b * b.transpose() - DMatrix::<f64>::identity(b.nrows(), b.nrows())).amax() < 1e-10);
            assert!((to_na(&x) * b.transpose()).amax() < 1e-10);
        }
    }
}

#[test]
fn svd_of_delta_baseline_is_optimal_rank_r_fit() {
    // svd_delta uses the top singular triplets of W - Q(W); its Σ must
    // coincide with nalgebra's rank-r truncation of the same matrix.
    let layer = synth::gaussian_layer("svd", 24, 20, 40, 35);
    let config = QuantConfig::new(3, 8);
    let settings = OptimizerSettings { rank: 3, ..Default::default() };
    let (sub, _) = baseline_subbranch(&layer, &config, 3, BaselineMethod::SvdOfDelta, &settings).unwrap();
    let w_q = dequant_oracle(&quantize_rtn(&layer.w, &config).unwrap());
    let delta = DMatrix::from_fn(24, 20, |i, j| layer.w.get(i, j) - w_q.get(i, j));
    let svd = delta.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut best = DMatrix::<f64>::zeros(24, 20);
    for &p in &order[..3] {
        best += svd.singular_values[p] * u.column(p) * vt.row(p);
    }
    let ours = to_na(&matmul(&sub.b, &sub.a));
    assert!((ours - best).amax() < 1e-10);
}

#[test]
fn kernels_match_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..60 {
        let batch = rng.gen_range(1..6);
        let out = rng.gen_range(1..50);
        let inp = rng.gen_range(1..90);
        let r = rng.gen_range(0..6);
        let bits = [2, 3, 4, 8][rng.gen_range(0..4)];
        let group = [8, 32, 128][rng.gen_range(0..3)];
        let q = quantize_rtn(&randn(out, inp, 1.0, &mut rng), &QuantConfig::new(bits, group)).unwrap();
        let sub = SubBranch {
            a: randn(r, inp, 0.5, &mut rng),
            b: randn(out, r, 0.5, &mut rng),
        };
        let x = randn(batch, inp, 1.0, &mut rng);
        let y_ref = reference_forward(&q, &sub.a, &sub.b, &x);
        let scale = max_abs(&y_ref).max(1.0);

        let mut l64 = FusedLayer::<f64>::new(q.clone(), &sub).unwrap();
        let c = TrafficCounter::new();
        let y64 = fused_forward(&mut l64, &x, &c).unwrap();
        assert!(max_abs_diff(&y64, &y_ref) <= 1e-12 * scale);
        assert!(max_abs_diff(&naive_forward(&l64, &x, &c).unwrap(), &y_ref) <= 1e-12 * scale);

        let mut l32 = FusedLayer::<f32>::new(q, &sub).unwrap();
        let y32 = fused_forward(&mut l32, &x.cast::<f32>(), &c).unwrap().cast::<f64>();
        assert!(max_abs_diff(&y32, &y_ref) <= 1e-4 * scale);
    }
}

#[test]
fn packed_codes_decode_to_library_dequantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for bits in [2, 3, 4, 8] {
        let w = randn(5, 77, 1.0, &mut rng);
        let q = quantize_rtn(&w, &QuantConfig::new(bits, 32)).unwrap();
        assert_eq!(max_abs_diff(&dequant_oracle(&q), &q.dequantize::<f64>()), 0.0);
    }
}
