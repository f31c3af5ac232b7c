use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::SubBranch;
use crate::linalg::DenseMatrix;
use crate::quant::{quantize_rtn, QuantConfig};
use crate::synth::gaussian;

use super::{fused_forward, naive_forward, CostModelQuery, FusedLayer, TrafficCounter, TrafficSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub bits: u8,
    pub group_size: usize,
    pub seed: u64,
    pub modes: Vec<ThreadMode>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: crate::quant::DEFAULT_GROUP_SIZE,
            seed: 0,
            modes: vec![ThreadMode::Single, ThreadMode::Multi],
        }
    }
}

/// One (variant, shape, thread mode) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `naive` or `fused`, with `_mt` appended in multi-threaded mode.
    pub variant: String,
    pub threads: ThreadMode,
    pub b: usize,
    pub d: usize,
    pub r: usize,
    pub median_ns: u64,
    /// Batch rows processed per second at the median time.
    pub tokens_per_s: f64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub kernels: u64,
    pub macs: u64,
    pub counters: TrafficSnapshot,
}

/// [`benchmark_with`] at 4 bits, group 128, seed 0, single- and
/// multi-threaded.
pub fn benchmark(shapes: &[CostModelQuery], reps: usize) -> Result<Vec<BenchRow>> {
    benchmark_with(shapes, reps, &BenchOptions::default())
}

/// Times naive and fused forward passes on seeded `d × d` layers. One warmup
/// pass per variant is discarded; the two variants alternate across reps.
pub fn benchmark_with(shapes: &[CostModelQuery], reps: usize, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if reps < 3 {
        return Err(Error::Value(format!("benchmark needs at least 3 reps, got {reps}")));
    }
    let config = QuantConfig::new(opts.bits, opts.group_size);
    config.validate()?;
    let mut rows = Vec::new();
    for &shape in shapes {
        if shape.d == 0 {
            return Err(Error::Value("benchmark shape with d = 0".into()));
        }
        let (mut layer, x) = workload(shape, &config, opts.seed)?;
        for &mode in &opts.modes {
            let mut run = || measure(&mut layer, &x, reps);
            let [(naive_ns, naive_c), (fused_ns, fused_c)] = match mode {
                ThreadMode::Single => rayon::ThreadPoolBuilder::new()
                    .num_threads(1)
                    .build()
                    .map_err(|e| Error::Value(format!("thread pool: {e}")))?
                    .install(run)?,
                ThreadMode::Multi => run()?,
            };
            let suffix = if mode == ThreadMode::Multi { "_mt" } else { "" };
            for (name, ns, c) in [("naive", naive_ns, naive_c), ("fused", fused_ns, fused_c)] {
                rows.push(BenchRow {
                    variant: format!("{name}{suffix}"),
                    threads: mode,
                    b: shape.b,
                    d: shape.d,
                    r: shape.r,
                    median_ns: ns,
                    tokens_per_s: if ns == 0 { 0.0 } else { shape.b as f64 * 1e9 / ns as f64 },
                    bytes_read: c.bytes_read,
                    bytes_written: c.bytes_written,
                    kernels: c.kernels_launched,
                    macs: c.macs,
                    counters: c,
                });
            }
        }
    }
    Ok(rows)
}

fn workload(shape: CostModelQuery, config: &QuantConfig, seed: u64) -> Result<(FusedLayer<f32>, DenseMatrix<f32>)> {
    let CostModelQuery { b, d, r } = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let q = quantize_rtn(&w, config)?;
    let sub = SubBranch {
        a: gaussian(r, d, 1.0 / (d as f64).sqrt(), &mut rng),
        b: gaussian(d, r, 0.01, &mut rng),
    };
    let x = gaussian(b, d, 1.0, &mut rng).cast::<f32>();
    Ok((FusedLayer::new(q, &sub)?, x))
}

type Measured = [(u64, TrafficSnapshot); 2];

fn measure(layer: &mut FusedLayer<f32>, x: &DenseMatrix<f32>, reps: usize) -> Result<Measured> {
    let naive_c = TrafficCounter::new();
    let fused_c = TrafficCounter::new();
    naive_forward(layer, x, &naive_c)?;
    fused_forward(layer, x, &fused_c)?;
    let (mut naive_t, mut fused_t) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        naive_c.reset();
        let start = Instant::now();
        std::hint::black_box(naive_forward(layer, x, &naive_c)?);
        naive_t.push(start.elapsed().as_nanos() as u64);

        fused_c.reset();
        let start = Instant::now();
        std::hint::black_box(fused_forward(layer, x, &fused_c)?);
        fused_t.push(start.elapsed().as_nanos() as u64);
    }
    Ok([
        (median(&mut naive_t), naive_c.snapshot()),
        (median(&mut fused_t), fused_c.snapshot()),
    ])
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// CSV with columns `variant,b,d,r,median_ns,bytes_read,bytes_written,kernels,macs`.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,b,d,r,median_ns,bytes_read,bytes_written,kernels,macs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant, r.b, r.d, r.r, r.median_ns, r.bytes_read, r.bytes_written, r.kernels, r.macs
        ));
    }
    out
}
