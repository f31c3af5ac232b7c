//! RTN, the two conventional sub-branch baselines and feedback quantization
//! on layers whose calibration set is smaller than the input dimension.
//! Output error is measured on the calibration inputs and on fresh inputs.
//!
//! cargo run --release --example compare_methods -- [layers] [dim]

use feedback_quant::feedback::{quantize_model, output_error_sq, Method, OptimizerSettings};
use feedback_quant::quant::QuantConfig;
use feedback_quant::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let layers: usize = args.next().map_or(10, |s| s.parse().expect("layer count"));
    let dim: usize = args.next().map_or(64, |s| s.parse().expect("dimension"));
    run(layers, dim)
}

pub fn run(layers: usize, dim: usize) -> feedback_quant::Result<()> {
    let n = dim / 4;

    let config = QuantConfig::new(3, 32);
    let settings = OptimizerSettings {
        rank: 8,
        epochs: 20,
        seed: 1,
        ..Default::default()
    };

    let records: Vec<_> = (0..layers)
        .map(|i| synth::gaussian_layer(&format!("L{i}"), dim, dim, n, 100 + i as u64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let held_out: Vec<_> = (0..layers).map(|_| synth::gaussian(4 * dim, dim, 1.0, &mut rng)).collect();

    println!("{layers} layers {dim}x{dim}, {n} calibration rows, 3-bit, group 32, rank 8");
    println!("{:<10} {:>14} {:>14} {:>10}", "method", "calib err", "held-out err", "violations");
    for method in [Method::Rtn, Method::SvdDelta, Method::DirectGd, Method::Fbquant] {
        let results = quantize_model(&records, &config, &settings, method)?;
        let (mut calib, mut test, mut violations) = (0.0, 0.0, 0);
        for ((r, rec), x_test) in results.iter().zip(&records).zip(&held_out) {
            let w_hat = r.quantized.dequantize::<f64>().add(&r.sub.sigma())?;
            let diff = rec.w.sub(&w_hat)?;
            calib += relative(&diff, &rec.w, &rec.x)?;
            test += relative(&diff, &rec.w, x_test)?;
            violations += r.report.bound_violations;
        }
        let k = layers as f64;
        println!(
            "{:<10} {:>14.5e} {:>14.5e} {:>10}",
            method.name(),
            calib / k,
            test / k,
            violations
        );
    }
    Ok(())
}

fn relative(
    diff: &feedback_quant::linalg::DenseMatrix,
    w: &feedback_quant::linalg::DenseMatrix,
    x: &feedback_quant::linalg::DenseMatrix,
) -> feedback_quant::Result<f64> {
    Ok((output_error_sq(diff, x)? / output_error_sq(w, x)?).sqrt())
}
