//! File formats: safetensors calibration bundles, the FBQ1 quantized
//! container, JSON reports and SVG plots.

mod container;
pub mod plot;
mod report;
mod safetensors;

pub use container::{
    fbq_from_bytes, fbq_to_bytes, load_fbq, save_fbq, FbqLayer, FbqModel, FORMAT_VERSION, MAGIC,
};
pub use report::{
    to_json, write_json, write_text, BenchReport, EvalLayer, EvalReport, IllposedDemoReport,
    IllposedLayerReport, QuantizeReport, TOOLKIT_VERSION,
};
pub use safetensors::{bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle, Dtype};
