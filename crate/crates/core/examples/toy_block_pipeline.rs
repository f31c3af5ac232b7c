//! End to end on a seven-projection toy block: write a calibration bundle,
//! quantize every layer, save and reload the packed container, and measure
//! the relative output error of what was loaded.
//!
//! cargo run --release --example toy_block_pipeline -- [output dir]

use std::path::{Path, PathBuf};

use feedback_quant::feedback::{output_error_sq, quantize_model, Method, OptimizerSettings};
use feedback_quant::io::{load_bundle, load_fbq, save_bundle, save_fbq, Dtype, FbqModel};
use feedback_quant::quant::QuantConfig;
use feedback_quant::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    run(&dir)
}

pub fn run(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let bundle_path = dir.join("toy_block.safetensors");
    let model_path = dir.join("toy_block.fbq");

    save_bundle(&bundle_path, &synth::toy_block(64, 172, 48, 21), Dtype::F32)?;
    let layers = load_bundle(&bundle_path)?;

    let config = QuantConfig::new(3, 64);
    let settings = OptimizerSettings {
        rank: 8,
        epochs: 15,
        ..Default::default()
    };
    let results = quantize_model(&layers, &config, &settings, Method::Fbquant)?;
    save_fbq(&model_path, &FbqModel::from_results(config, &results)?)?;
    let model = load_fbq(&model_path)?;
    println!(
        "{} ({} bytes) -> {} ({} bytes)",
        bundle_path.display(),
        std::fs::metadata(&bundle_path)?.len(),
        model_path.display(),
        std::fs::metadata(&model_path)?.len()
    );

    println!("{:<6} {:>10} {:>12} {:>12}", "layer", "shape", "rtn err", "loaded err");
    for (layer, result) in layers.iter().zip(&results) {
        let stored = model.layer(&layer.name).expect("layer saved");
        let w_f = stored.reconstruct()?;
        let base = output_error_sq(&layer.w, &layer.x)?;
        let rel = (output_error_sq(&layer.w.sub(&w_f)?, &layer.x)? / base).sqrt();
        let rtn = (result.report.initial_rtn_loss / base).sqrt();
        let (o, i) = layer.w.shape();
        println!("{:<6} {:>10} {rtn:>12.4e} {rel:>12.4e}", layer.name, format!("{o}x{i}"));
    }
    Ok(())
}
