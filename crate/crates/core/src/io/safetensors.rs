//! Calibration bundles in the safetensors layout: an 8-byte little-endian
//! header length, a JSON header mapping tensor names to dtype, shape and
//! payload offsets, then the raw row-major payloads.
//!
//! Each layer contributes `<layer>.weight` (`out_dim × in_dim`) and
//! `<layer>.calib_x` (`n_samples × in_dim`).

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::feedback::LayerRecord;
use crate::linalg::DenseMatrix;

const WEIGHT_SUFFIX: &str = ".weight";
const CALIB_SUFFIX: &str = ".calib_x";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    start: usize,
    end: usize,
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<LayerRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}

pub fn save_bundle(path: impl AsRef<Path>, layers: &[LayerRecord], dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle_to_bytes(layers, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a bundle. Layers come out in the header order of their weights.
pub fn bundle_from_bytes(bytes: &[u8]) -> Result<Vec<LayerRecord>> {
    let entries = parse_header(bytes)?;
    let header_end = 8 + read_u64(bytes, 0)? as usize;
    let payload = &bytes[header_end..];

    let mut layers = Vec::new();
    for w in entries.iter().filter(|e| e.name.ends_with(WEIGHT_SUFFIX)) {
        let layer = &w.name[..w.name.len() - WEIGHT_SUFFIX.len()];
        let calib_name = format!("{layer}{CALIB_SUFFIX}");
        let x = entries
            .iter()
            .find(|e| e.name == calib_name)
            .ok_or_else(|| Error::Schema(format!("layer `{layer}` has a weight but no `{calib_name}`")))?;
        let w_mat = decode(w, payload, header_end)?;
        let x_mat = decode(x, payload, header_end)?;
        if w_mat.cols() != x_mat.cols() {
            return Err(Error::Schema(format!(
                "layer `{layer}`: weight has {} inputs, calibration has {} features",
                w_mat.cols(),
                x_mat.cols()
            )));
        }
        layers.push(LayerRecord::new(layer, w_mat, x_mat)?);
    }
    for x in entries.iter().filter(|e| e.name.ends_with(CALIB_SUFFIX)) {
        let layer = &x.name[..x.name.len() - CALIB_SUFFIX.len()];
        if !layers.iter().any(|l| l.name == layer) {
            return Err(Error::Schema(format!(
                "layer `{layer}` has calibration data but no `{layer}{WEIGHT_SUFFIX}`"
            )));
        }
    }
    Ok(layers)
}

pub fn bundle_to_bytes(layers: &[LayerRecord], dtype: Dtype) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut payload = Vec::new();
    for layer in layers {
        layer.validate()?;
        for (suffix, m) in [(WEIGHT_SUFFIX, &layer.w), (CALIB_SUFFIX, &layer.x)] {
            let start = payload.len();
            match dtype {
                Dtype::F32 => m.data().iter().for_each(|&v| payload.extend((v as f32).to_le_bytes())),
                Dtype::F64 => m.data().iter().for_each(|&v| payload.extend(v.to_le_bytes())),
            }
            header.insert(
                format!("{}{suffix}", layer.name),
                json!({
                    "dtype": dtype.tag(),
                    "shape": [m.rows(), m.cols()],
                    "data_offsets": [start, payload.len()],
                }),
            );
        }
    }
    let mut text = serde_json::to_vec(&Value::Object(header))?;
    // Pad with spaces so the payload starts 8-byte aligned.
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + payload.len());
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(payload);
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::format(at as u64, "file too short for the header length"))
}

/// Byte offset of a serde_json line/column position inside the header text.
fn json_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match text[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => break,
        }
    }
    (offset + column.saturating_sub(1)).min(text.len())
}

fn parse_header(bytes: &[u8]) -> Result<Vec<Entry>> {
    let len = read_u64(bytes, 0)?;
    let avail = bytes.len() as u64 - 8;
    if len > avail {
        return Err(Error::format(
            0,
            format!("header length {len} exceeds the {avail} bytes after it"),
        ));
    }
    let text = &bytes[8..8 + len as usize];
    let value: Value = serde_json::from_slice(text).map_err(|e| {
        let at = 8 + json_offset(text, e.line(), e.column());
        Error::format(at as u64, format!("malformed header: {e}"))
    })?;
    let Value::Object(map) = value else {
        return Err(Error::format(8, "header is not a JSON object"));
    };
    let payload_len = avail - len;
    let mut entries = Vec::with_capacity(map.len());
    for (name, info) in map {
        if name == METADATA_KEY {
            continue;
        }
        let bad = |detail: &str| Error::format(8, format!("tensor `{name}`: {detail}"));
        let dtype = match info.get("dtype").and_then(Value::as_str) {
            Some("F32") => Dtype::F32,
            Some("F64") => Dtype::F64,
            Some(other) => return Err(bad(&format!("unsupported dtype {other}"))),
            None => return Err(bad("missing dtype")),
        };
        let shape: Vec<usize> = info
            .get("shape")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|v| v.as_u64().map(|v| v as usize)).collect())
            .ok_or_else(|| bad("missing or invalid shape"))?;
        let offsets: Vec<u64> = info
            .get("data_offsets")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_u64).collect())
            .ok_or_else(|| bad("missing or invalid data_offsets"))?;
        let [start, end] = offsets[..] else {
            return Err(bad("data_offsets must have two entries"));
        };
        if start > end || end > payload_len {
            return Err(Error::format(
                8 + len + start.min(payload_len),
                format!("tensor `{name}`: offsets [{start}, {end}] outside the {payload_len}-byte payload"),
            ));
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if count.and_then(|c| c.checked_mul(dtype.size())) != Some((end - start) as usize) {
            return Err(bad(&format!(
                "shape {shape:?} of {} does not fill {} bytes",
                dtype.tag(),
                end - start
            )));
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            start: start as usize,
            end: end as usize,
        });
    }
    Ok(entries)
}

fn decode(entry: &Entry, payload: &[u8], payload_offset: usize) -> Result<DenseMatrix> {
    let (rows, cols) = match entry.shape[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::Schema(format!(
                "tensor `{}` must be 2-D, has shape {:?}",
                entry.name, entry.shape
            )))
        }
    };
    let raw = &payload[entry.start..entry.end];
    let data: Vec<f64> = match entry.dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "tensor `{}` has a non-finite value at element {i} (byte {})",
            entry.name,
            payload_offset + entry.start + i * entry.dtype.size()
        )));
    }
    DenseMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn empty_bundle() {
        let bytes = bundle_to_bytes(&[], Dtype::F32).unwrap();
        assert!(bundle_from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let layers = synth::toy_block(8, 16, 4, 1);
        let back = bundle_from_bytes(&bundle_to_bytes(&layers, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, layers);
    }

    #[test]
    fn payload_is_aligned() {
        let layers = vec![synth::gaussian_layer("abc", 2, 3, 1, 0)];
        let bytes = bundle_to_bytes(&layers, Dtype::F32).unwrap();
        assert_eq!(read_u64(&bytes, 0).unwrap() % 8, 0);
    }

    #[test]
    fn missing_calibration_names_layer() {
        let mut bytes = Vec::new();
        let header = br#"{"L1.weight":{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]}}"#;
        bytes.extend((header.len() as u64).to_le_bytes());
        bytes.extend(header);
        bytes.extend(1.0f32.to_le_bytes());
        match bundle_from_bytes(&bytes) {
            Err(Error::Schema(msg)) => assert!(msg.contains("L1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nan_is_a_data_error() {
        let mut layer = synth::gaussian_layer("L", 2, 2, 2, 0);
        layer.x.set(1, 0, f64::NAN);
        let bytes = bundle_to_bytes(&[layer], Dtype::F32).unwrap();
        assert!(matches!(bundle_from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let header = b"{\"a\": [1, 2,}";
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend(header);
        match bundle_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8 + 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_oversized() {
        assert!(matches!(bundle_from_bytes(&[1, 2, 3]), Err(Error::Format { offset: 0, .. })));
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend(b"{}");
        assert!(matches!(bundle_from_bytes(&bytes), Err(Error::Format { .. })));
        let layers = vec![synth::gaussian_layer("L", 2, 3, 2, 0)];
        let full = bundle_to_bytes(&layers, Dtype::F32).unwrap();
        assert!(matches!(
            bundle_from_bytes(&full[..full.len() - 4]),
            Err(Error::Format { .. })
        ));
    }
}
