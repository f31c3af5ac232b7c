//! Extra multiply-accumulates of a rank-r sub-branch relative to the main
//! path, for a few hidden sizes and ranks.

use feedback_quant::runtime::{macs_overhead, CostModelQuery};

fn main() -> feedback_quant::Result<()> {
    run()
}

pub fn run() -> feedback_quant::Result<()> {
    println!("{:>6} {:>6} {:>5} {:>14} {:>14} {:>8}", "d", "b", "r", "main", "sub-branch", "ratio");
    for d in [2048, 4096, 8192] {
        for r in [32, 64, 128] {
            for b in [1, 2048] {
                let (m0, m1, ratio) = macs_overhead(CostModelQuery::new(b, d, r))?;
                println!("{d:>6} {b:>6} {r:>5} {m0:>14} {m1:>14} {ratio:>8.4}");
            }
        }
    }
    Ok(())
}
