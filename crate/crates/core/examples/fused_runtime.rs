//! Runs the four-kernel and two-kernel forward passes of one quantized layer
//! with a sub-branch, checks they agree and prints the traffic counters.
//!
//! cargo run --release --example fused_runtime -- [batch] [dim] [rank]

use feedback_quant::feedback::SubBranch;
use feedback_quant::quant::{quantize_rtn, QuantConfig};
use feedback_quant::runtime::{fused_forward, naive_forward, Buffer, FusedLayer, TrafficCounter};
use feedback_quant::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let batch: usize = args.next().map_or(4, |s| s.parse().expect("batch"));
    let dim: usize = args.next().map_or(1024, |s| s.parse().expect("dim"));
    let rank: usize = args.next().map_or(64, |s| s.parse().expect("rank"));
    run(batch, dim, rank)
}

pub fn run(batch: usize, dim: usize, rank: usize) -> feedback_quant::Result<()> {

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = synth::gaussian(dim, dim, 0.02, &mut rng);
    let sub = SubBranch {
        a: synth::gaussian(rank, dim, 0.02, &mut rng),
        b: synth::gaussian(dim, rank, 0.02, &mut rng),
    };
    let q = quantize_rtn(&w.sub(&sub.sigma())?, &QuantConfig::new(4, 128))?;
    let mut layer = FusedLayer::<f32>::new(q, &sub)?;
    let x = synth::gaussian(batch, dim, 1.0, &mut rng).cast::<f32>();

    let naive = TrafficCounter::new();
    let fused = TrafficCounter::new();
    let y_naive = naive_forward(&layer, &x, &naive)?;
    let y_fused = fused_forward(&mut layer, &x, &fused)?;
    let max_diff = y_naive.sub(&y_fused)?.max_abs();
    println!("b={batch} d={dim} r={rank}, max |naive - fused| = {max_diff:e}");

    let (n, f) = (naive.snapshot(), fused.snapshot());
    println!("{:<14} {:>14} {:>14}", "", "naive", "fused");
    println!("{:<14} {:>14} {:>14}", "kernels", n.kernels_launched, f.kernels_launched);
    println!("{:<14} {:>14} {:>14}", "bytes read", n.bytes_read, f.bytes_read);
    println!("{:<14} {:>14} {:>14}", "bytes written", n.bytes_written, f.bytes_written);
    println!("{:<14} {:>14} {:>14}", "macs", n.macs, f.macs);
    for buf in Buffer::ALL {
        let (a, b) = (n.buffer(buf), f.buffer(buf));
        println!("  {:<12} r {:>10} / {:<10} w {:>10} / {:<10}", buf.name(), a.read, b.read, a.written, b.written);
    }
    Ok(())
}
