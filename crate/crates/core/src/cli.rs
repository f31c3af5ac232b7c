//! `fbq` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::feedback::{
    output_error_sq, quantize_model, Method, OptimizerSettings, StepRule, DEFAULT_EPOCHS, DEFAULT_RANK,
};
use crate::gradcheck::run_gradcheck;
use crate::illposed::{run_illposed_demo, IllposedScenario, DEFAULT_TOL};
use crate::io::{
    load_bundle, load_fbq, save_fbq, write_json, write_text, BenchReport, EvalLayer, EvalReport, FbqModel,
    IllposedDemoReport, IllposedLayerReport, QuantizeReport, TOOLKIT_VERSION,
};
use crate::io::plot::{line_chart, Series};
use crate::quant::{QuantConfig, DEFAULT_GROUP_SIZE};
use crate::runtime::{benchmark_with, to_csv, BenchOptions, CostModelQuery, ThreadMode};

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "fbq", version, about = "Feedback sub-branch weight quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize every layer of a calibration bundle.
    Quantize(QuantizeArgs),
    /// Relative output error of a quantized container against a bundle.
    Eval(EvalArgs),
    /// Time naive and fused forward passes.
    Bench(BenchArgs),
    /// Null-space perturbation demo on each bundle layer.
    IllposedDemo(IllposedArgs),
    /// Finite-difference check of the detached gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Fbquant,
    Rtn,
    #[value(name = "svd_delta")]
    SvdDelta,
    #[value(name = "direct_gd")]
    DirectGd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fbquant => Method::Fbquant,
            MethodArg::Rtn => Method::Rtn,
            MethodArg::SvdDelta => Method::SvdDelta,
            MethodArg::DirectGd => Method::DirectGd,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StepRuleArg {
    Fixed,
    Backtracking,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ThreadsArg {
    Single,
    Multi,
    Both,
}

#[derive(Debug, Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 4, value_parser = parse_bits)]
    bits: u8,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group: usize,
}

impl QuantArgs {
    fn config(&self) -> QuantConfig {
        QuantConfig::new(self.bits, self.group)
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Fbquant)]
    method: MethodArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = StepRuleArg::Backtracking)]
    step_rule: StepRuleArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write a loss-per-epoch SVG chart.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated `BxDxR` triples.
    #[arg(long, default_value = "1x4096x128", value_parser = parse_shapes)]
    shapes: Shapes,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    csv: PathBuf,
    /// JSON twin of the CSV table.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ThreadsArg::Both)]
    threads: ThreadsArg,
}

#[derive(Debug, Args)]
struct IllposedArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "0,1,10,100", value_parser = parse_alphas)]
    alphas: Alphas,
    /// Rank of the conventional solution being perturbed.
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a deviation-vs-alpha SVG chart.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

#[derive(Debug, Clone)]
struct Shapes(Vec<CostModelQuery>);

#[derive(Debug, Clone)]
struct Alphas(Vec<f64>);

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b) if crate::quant::SUPPORTED_BITS.contains(&b) => Ok(b),
        _ => Err(format!("expected one of 2, 3, 4, 8, got `{s}`")),
    }
}

fn parse_shapes(s: &str) -> std::result::Result<Shapes, String> {
    s.split(',')
        .map(|item| {
            let dims: Vec<usize> = item
                .trim()
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("bad shape `{item}`, expected BxDxR"))?;
            match dims[..] {
                [b, d, r] if d > 0 => Ok(CostModelQuery::new(b, d, r)),
                _ => Err(format!("bad shape `{item}`, expected BxDxR with D > 0")),
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map(Shapes)
}

fn parse_alphas(s: &str) -> std::result::Result<Alphas, String> {
    s.split(',')
        .map(|a| match a.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("bad alpha `{a}`")),
        })
        .collect::<std::result::Result<_, _>>()
        .map(Alphas)
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::IllposedDemo(a) => illposed_demo(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn quantize(a: QuantizeArgs) -> Result<i32> {
    let config = a.quant.config();
    config.validate()?;
    let method = Method::from(a.method);
    let settings = OptimizerSettings {
        epochs: a.epochs,
        learning_rate: a.lr,
        rank: a.rank,
        seed: a.seed,
        step_rule: match a.step_rule {
            StepRuleArg::Fixed => StepRule::Fixed,
            StepRuleArg::Backtracking => StepRule::Backtracking,
        },
        ..Default::default()
    };
    let layers = load_bundle(&a.bundle)?;
    let results = quantize_model(&layers, &config, &settings, method)?;
    save_fbq(&a.out, &FbqModel::from_results(config, &results)?)?;

    let report = QuantizeReport {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        seed: a.seed,
        method,
        qconfig: config,
        settings,
        layers: results.iter().map(|r| r.report.clone()).collect(),
    };
    write_json(&a.report, &report)?;
    if let Some(path) = &a.plot {
        let series: Vec<Series> = report
            .layers
            .iter()
            .map(|r| {
                let pts = r.loss_per_epoch.iter().enumerate().map(|(e, &l)| (e as f64, l)).collect();
                Series::new(&r.layer, pts)
            })
            .collect();
        let title = format!("{} reconstruction loss", method.name());
        write_text(path, &line_chart(&title, "epoch", "loss", &series))?;
    }
    println!("{:<16} {:>14} {:>14} {:>12} {:>10}", "layer", "rtn_loss", "final_loss", "max_dev", "violations");
    for r in &report.layers {
        println!(
            "{:<16} {:>14.6e} {:>14.6e} {:>12.4e} {:>10}",
            r.layer, r.initial_rtn_loss, r.final_loss, r.max_weight_deviation, r.bound_violations
        );
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let layers = load_bundle(&a.bundle)?;
    let model = load_fbq(&a.model)?;
    let mut out = Vec::with_capacity(layers.len());
    for layer in &layers {
        let stored = model
            .layer(&layer.name)
            .ok_or_else(|| Error::Schema(format!("layer `{}` is missing from {}", layer.name, a.model.display())))?;
        if stored.quantized.shape() != layer.w.shape() {
            return Err(Error::Schema(format!(
                "layer `{}`: container holds {:?}, bundle {:?}",
                layer.name,
                stored.quantized.shape(),
                layer.w.shape()
            )));
        }
        let w_f = stored.reconstruct()?;
        let diff = layer.w.sub(&w_f)?;
        let num = output_error_sq(&diff, &layer.x)?.sqrt();
        let den = output_error_sq(&layer.w, &layer.x)?.sqrt();
        out.push(EvalLayer {
            layer: layer.name.clone(),
            relative_output_error: if den > 0.0 { num / den } else { num },
            max_weight_deviation: diff.max_abs(),
        });
    }
    let mean = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|l| l.relative_output_error).sum::<f64>() / out.len() as f64
    };
    for l in &out {
        println!("{:<16} {:>12.6e}", l.layer, l.relative_output_error);
    }
    println!("mean relative output error {mean:.6e}");
    write_json(
        &a.report,
        &EvalReport {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            qconfig: model.config,
            layers: out,
            mean_relative_output_error: mean,
        },
    )?;
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<i32> {
    let modes = match a.threads {
        ThreadsArg::Single => vec![ThreadMode::Single],
        ThreadsArg::Multi => vec![ThreadMode::Multi],
        ThreadsArg::Both => vec![ThreadMode::Single, ThreadMode::Multi],
    };
    let opts = BenchOptions {
        bits: a.quant.bits,
        group_size: a.quant.group,
        seed: a.seed,
        modes,
    };
    let rows = benchmark_with(&a.shapes.0, a.reps, &opts)?;
    let csv = to_csv(&rows);
    print!("{csv}");
    write_text(&a.csv, &csv)?;
    if let Some(path) = &a.json {
        write_json(
            path,
            &BenchReport {
                toolkit_version: TOOLKIT_VERSION.to_string(),
                seed: a.seed,
                reps: a.reps,
                rows,
            },
        )?;
    }
    Ok(0)
}

fn illposed_demo(a: IllposedArgs) -> Result<i32> {
    let config = a.quant.config();
    config.validate()?;
    let layers = load_bundle(&a.bundle)?;
    let mut reports = Vec::with_capacity(layers.len());
    for layer in layers {
        let name = layer.name.clone();
        let run = || -> Result<_> {
            let mut scenario = IllposedScenario::from_layer(layer, &config, a.rank, a.seed)?;
            scenario.alphas = a.alphas.0.clone();
            scenario.tol = DEFAULT_TOL;
            run_illposed_demo(&scenario, &config)
        };
        let report = run().map_err(|e| e.in_layer(&name))?;
        reports.push(IllposedLayerReport { layer: name, report });
    }
    println!(
        "{:<12} {:>8} {:>12} {:>14} {:>14} {:>12}",
        "layer", "alpha", "loss_delta", "dev_conv", "dev_fbquant", "s/2"
    );
    for l in &reports {
        for p in &l.report.points {
            println!(
                "{:<12} {:>8} {:>12.3e} {:>14.6e} {:>14.6e} {:>12.6e}",
                l.layer, p.alpha, p.loss_delta, p.max_deviation_conventional, p.max_deviation_fbquant, p.bound_s_half
            );
        }
    }
    let doc = IllposedDemoReport {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        seed: a.seed,
        qconfig: config,
        layers: reports,
    };
    write_json(&a.out, &doc)?;
    if let Some(path) = &a.plot {
        let mut series = Vec::new();
        for l in &doc.layers {
            let pick = |f: fn(&crate::illposed::AlphaPoint) -> f64| -> Vec<(f64, f64)> {
                l.report.points.iter().map(|p| (p.alpha, f(p))).collect()
            };
            series.push(Series::new(format!("{} conventional", l.layer), pick(|p| p.max_deviation_conventional)));
            series.push(Series::new(format!("{} fbquant", l.layer), pick(|p| p.max_deviation_fbquant)));
            series.push(Series::new(format!("{} s/2", l.layer), pick(|p| p.bound_s_half)));
        }
        write_text(path, &line_chart("max weight deviation", "alpha", "max |w - w'|", &series))?;
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let report = run_gradcheck(a.seed, a.instances)?;
    let worst = report.max_rel_error();
    println!("instances                 {}", report.instances);
    println!("max rel error (sigma)     {:.3e}", report.max_rel_error_sigma);
    println!("max rel error (A)         {:.3e}", report.max_rel_error_a);
    println!("max rel error (B)         {:.3e}", report.max_rel_error_b);
    println!("straight-through max |g|  {:.3e}", report.ste_max_abs);
    println!("max relative error {worst:.3e}");
    Ok(if worst < GRADCHECK_LIMIT { 0 } else { 2 })
}
