//! Fits a feedback sub-branch to one layer and prints the loss curve next to
//! the RTN starting point.
//!
//! cargo run --release --example feedback_layer -- [dim] [calibration rows]

use feedback_quant::feedback::{fb_reconstruct, optimize_layer, OptimizerSettings};
use feedback_quant::quant::QuantConfig;
use feedback_quant::synth;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(128, |s| s.parse().expect("dim"));
    let n: usize = args.next().map_or(256, |s| s.parse().expect("calibration rows"));
    run(dim, n)
}

pub fn run(dim: usize, n: usize) -> feedback_quant::Result<()> {

    let layer = synth::gaussian_layer("proj", dim, dim, n, 11);
    let config = QuantConfig::new(3, 64);
    let settings = OptimizerSettings {
        rank: 16,
        epochs: 30,
        ..Default::default()
    };
    let (sub, report) = optimize_layer(&layer, &config, &settings)?;

    for (epoch, loss) in report.loss_per_epoch.iter().enumerate() {
        println!("epoch {epoch:>3}  loss {loss:.6e}");
    }
    println!(
        "rtn {:.6e} -> feedback {:.6e} ({:.1}% lower)",
        report.initial_rtn_loss,
        report.final_loss,
        100.0 * (1.0 - report.final_loss / report.initial_rtn_loss)
    );
    println!(
        "max |w - w_F| {:.4e}, largest s/2 {:.4e}, violations {}",
        report.max_weight_deviation, report.bound_s_half, report.bound_violations
    );

    let (w_f, _) = fb_reconstruct(&layer.w, &sub, &config)?;
    println!("reconstructed W_F: {:?}, rank-{} sub-branch", w_f.shape(), sub.rank());
    Ok(())
}
