//! Central finite differences against the detached analytic gradients, and
//! the straight-through gradient, which is identically zero.
//!
//! cargo run --release --example gradcheck -- [instances] [seed]

use feedback_quant::gradcheck::run_gradcheck;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().map_or(20, |s| s.parse().expect("instances"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    run(instances, seed)
}

pub fn run(instances: usize, seed: u64) -> feedback_quant::Result<()> {

    let r = run_gradcheck(seed, instances)?;
    println!("{instances} instances, seed {seed}");
    println!("max relative error  dL/dSigma {:.3e}", r.max_rel_error_sigma);
    println!("                    dL/dA     {:.3e}", r.max_rel_error_a);
    println!("                    dL/dB     {:.3e}", r.max_rel_error_b);
    println!("largest straight-through entry {:e}", r.ste_max_abs);
    Ok(())
}
