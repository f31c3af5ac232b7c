//! With fewer calibration rows than input features, a sub-branch can move
//! along the null space of `XᵀX` without changing the calibration loss.
//! The conventional reconstruction drifts away from `W`; the feedback one
//! stays within half a quantization step.
//!
//! cargo run --release --example illposed_demo -- [dim] [calibration rows]

use feedback_quant::illposed::{run_illposed_demo, IllposedScenario};
use feedback_quant::quant::QuantConfig;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(64, |s| s.parse().expect("dim"));
    let n: usize = args.next().map_or(16, |s| s.parse().expect("calibration rows"));
    run(dim, n)
}

pub fn run(dim: usize, n: usize) -> feedback_quant::Result<()> {

    let config = QuantConfig::new(4, 32);
    let scenario = IllposedScenario::seeded(dim, n, 4, 5, &config)?;
    let report = run_illposed_demo(&scenario, &config)?;

    println!("null space dimension {} of {dim}", report.null_dim);
    println!(
        "{:>6} {:>12} {:>14} {:>14} {:>10} {:>10}",
        "alpha", "loss delta", "conv max dev", "fb max dev", "rtn s/2", "fb s/2"
    );
    for p in &report.points {
        println!(
            "{:>6} {:>12.3e} {:>14.4e} {:>14.4e} {:>10.4e} {:>10.4e}",
            p.alpha,
            p.loss_delta,
            p.max_deviation_conventional,
            p.max_deviation_fbquant,
            p.rtn_bound_s_half,
            p.bound_s_half
        );
    }
    println!(
        "loss invariant: {}, conventional drift grows: {}, feedback bounded: {}",
        report.loss_invariant(),
        report.conventional_increasing(),
        report.fbquant_bounded()
    );
    Ok(())
}
