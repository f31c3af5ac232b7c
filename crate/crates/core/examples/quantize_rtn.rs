//! Group-wise round-to-nearest at every supported bit width: packed size,
//! worst deviation against half the group step, and output error.
//!
//! cargo run --release --example quantize_rtn -- [out_dim] [in_dim]

use feedback_quant::feedback::output_error_sq;
use feedback_quant::quant::{deviation_against, packed_row_bytes, quantize_rtn, QuantConfig, SUPPORTED_BITS};
use feedback_quant::synth;

fn main() -> feedback_quant::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dim: usize = args.next().map_or(256, |s| s.parse().expect("out_dim"));
    let in_dim: usize = args.next().map_or(512, |s| s.parse().expect("in_dim"));
    run(out_dim, in_dim)
}

pub fn run(out_dim: usize, in_dim: usize) -> feedback_quant::Result<()> {
    let layer = synth::gaussian_layer("demo", out_dim, in_dim, 64, 3);

    println!("{out_dim}x{in_dim}, group 128");
    println!(
        "{:>4} {:>12} {:>12} {:>12} {:>11} {:>12}",
        "bits", "code bytes", "max |w-q|", "max s/2", "violations", "rel out err"
    );
    for bits in SUPPORTED_BITS {
        let config = QuantConfig::new(bits, 128);
        let q = quantize_rtn(&layer.w, &config)?;
        let w_q = q.dequantize::<f64>();
        let (max_dev, violations) = deviation_against(&layer.w, &w_q, &q);
        assert_eq!(q.packed_codes().len(), out_dim * packed_row_bytes(in_dim, bits));
        let rel = (output_error_sq(&layer.w.sub(&w_q)?, &layer.x)? / output_error_sq(&layer.w, &layer.x)?).sqrt();
        println!(
            "{bits:>4} {:>12} {max_dev:>12.4e} {:>12.4e} {violations:>11} {rel:>12.4e}",
            q.packed_codes().len(),
            q.max_half_scale()
        );
    }
    Ok(())
}
