//! FBQ1 container for quantized layers with their sub-branches.
//!
//! ```text
//! "FBQ1" | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The payload concatenates, per layer and in header order, the packed codes,
//! f32 scales, i32 zero-points and the f32 factors `A` and `B`, all little
//! endian. Declared segments must tile the payload exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::LayerResult;
use crate::linalg::{matmul, DenseMatrix};
use crate::quant::{packed_row_bytes, QuantConfig, QuantizedTensor};
use crate::runtime::FusedLayer;

pub const MAGIC: &[u8; 4] = b"FBQ1";
pub const FORMAT_VERSION: u32 = 1;

/// One stored layer; factors are kept in the f32 precision they are saved in.
#[derive(Debug, Clone, PartialEq)]
pub struct FbqLayer {
    pub name: String,
    pub quantized: QuantizedTensor,
    pub a: DenseMatrix<f32>,
    pub b: DenseMatrix<f32>,
}

impl FbqLayer {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `dequant(Q) + B·A` in f64.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let sigma = matmul(&self.b.cast::<f64>(), &self.a.cast::<f64>())?;
        self.quantized.dequantize::<f64>().add(&sigma)
    }

    pub fn to_fused(&self) -> Result<FusedLayer<f32>> {
        FusedLayer::from_parts(self.quantized.clone(), self.a.clone(), self.b.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbqModel {
    pub config: QuantConfig,
    pub layers: Vec<FbqLayer>,
}

impl FbqModel {
    /// Collects `quantize_model` output, rounding `A`, `B` to f32.
    pub fn from_results(config: QuantConfig, results: &[LayerResult]) -> Result<Self> {
        let layers = results
            .iter()
            .map(|r| {
                if r.quantized.config() != &config {
                    return Err(Error::Value(format!(
                        "layer `{}` was quantized with a different configuration",
                        r.report.layer
                    )));
                }
                Ok(FbqLayer {
                    name: r.report.layer.clone(),
                    quantized: r.quantized.clone(),
                    a: r.sub.a.cast(),
                    b: r.sub.b.cast(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&FbqLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Segment {
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    name: String,
    out_dim: usize,
    in_dim: usize,
    rank: usize,
    codes: Segment,
    scales: Segment,
    zeros: Segment,
    a: Segment,
    b: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    qconfig: QuantConfig,
    layers: Vec<LayerHeader>,
}

pub fn save_fbq(path: impl AsRef<Path>, model: &FbqModel) -> Result<()> {
    let path = path.as_ref();
    let bytes = fbq_to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_fbq(path: impl AsRef<Path>) -> Result<FbqModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    fbq_from_bytes(&bytes)
}

pub fn fbq_to_bytes(model: &FbqModel) -> Result<Vec<u8>> {
    model.config.validate()?;
    let mut payload = Vec::new();
    let mut push = |bytes: &mut dyn Iterator<Item = u8>| {
        let offset = payload.len() as u64;
        payload.extend(bytes);
        Segment {
            offset,
            len: payload.len() as u64 - offset,
        }
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let (out_dim, in_dim) = l.quantized.shape();
        if l.quantized.config() != &model.config {
            return Err(Error::Value(format!("layer `{}` disagrees with the model qconfig", l.name)));
        }
        if l.a.shape() != (l.rank(), in_dim) || l.b.shape() != (out_dim, l.rank()) {
            return Err(Error::shape(
                "save_fbq",
                format!("layer `{}`: A {:?}, B {:?} for W {out_dim}x{in_dim}", l.name, l.a.shape(), l.b.shape()),
            ));
        }
        let q = &l.quantized;
        let codes = push(&mut q.packed_codes().iter().copied());
        let scales = push(&mut q.scales().iter().flat_map(|v| v.to_le_bytes()));
        let zeros = push(&mut q.zero_points().iter().flat_map(|v| v.to_le_bytes()));
        let a = push(&mut l.a.data().iter().flat_map(|v| v.to_le_bytes()));
        let b = push(&mut l.b.data().iter().flat_map(|v| v.to_le_bytes()));
        layers.push(LayerHeader {
            name: l.name.clone(),
            out_dim,
            in_dim,
            rank: l.rank(),
            codes,
            scales,
            zeros,
            a,
            b,
        });
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        qconfig: model.config,
        layers,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend(MAGIC);
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(payload);
    Ok(out)
}

pub fn fbq_from_bytes(bytes: &[u8]) -> Result<FbqModel> {
    if bytes.len() < 12 {
        return Err(Error::format(0, format!("{} bytes is too short for an FBQ1 preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "missing FBQ1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let avail = bytes.len() as u64 - 12;
    if header_len > avail {
        return Err(Error::format(4, format!("header length {header_len} exceeds the {avail} remaining bytes")));
    }
    let header_end = 12 + header_len as usize;
    let text = &bytes[12..header_end];
    let raw: serde_json::Value = serde_json::from_slice(text)
        .map_err(|e| Error::format(12, format!("malformed header: {e}")))?;
    // Check the version before the rest of the schema so future headers fail
    // with the right error.
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version {
            found: version.map_or(0, |v| v.min(u32::MAX as u64) as u32),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::format(12, format!("invalid header: {e}")))?;
    header.qconfig.validate()?;
    let payload = &bytes[header_end..];
    check_tiling(&header, payload.len() as u64, header_end as u64)?;

    let layers = header
        .layers
        .iter()
        .map(|lh| read_layer(lh, &header.qconfig, payload, header_end as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(FbqModel {
        config: header.qconfig,
        layers,
    })
}

fn check_tiling(header: &Header, payload_len: u64, base: u64) -> Result<()> {
    let mut segs: Vec<(Segment, String)> = header
        .layers
        .iter()
        .flat_map(|l| {
            [
                (l.codes, "codes"),
                (l.scales, "scales"),
                (l.zeros, "zeros"),
                (l.a, "a"),
                (l.b, "b"),
            ]
            .into_iter()
            .map(move |(s, what)| (s, format!("{}.{what}", l.name)))
        })
        .collect();
    segs.sort_by_key(|(s, _)| (s.offset, s.len));
    let mut cursor = 0u64;
    for (s, name) in &segs {
        if s.offset != cursor {
            let kind = if s.offset > cursor { "gap" } else { "overlap" };
            return Err(Error::format(base + cursor.min(s.offset), format!("{kind} before segment {name}")));
        }
        cursor = s
            .offset
            .checked_add(s.len)
            .ok_or_else(|| Error::format(base, format!("segment {name} overflows")))?;
    }
    if cursor != payload_len {
        return Err(Error::format(
            base + cursor.min(payload_len),
            format!("segments cover {cursor} bytes, payload has {payload_len}"),
        ));
    }
    Ok(())
}

fn read_layer(lh: &LayerHeader, config: &QuantConfig, payload: &[u8], base: u64) -> Result<FbqLayer> {
    let groups = lh.out_dim * config.groups_per_row(lh.in_dim);
    let expect = [
        (lh.codes, lh.out_dim * packed_row_bytes(lh.in_dim, config.bits), "codes"),
        (lh.scales, groups * 4, "scales"),
        (lh.zeros, groups * 4, "zeros"),
        (lh.a, lh.rank * lh.in_dim * 4, "a"),
        (lh.b, lh.out_dim * lh.rank * 4, "b"),
    ];
    for (seg, want, what) in expect {
        if seg.len != want as u64 {
            return Err(Error::format(
                base + seg.offset,
                format!("layer `{}` {what}: {} bytes, expected {want}", lh.name, seg.len),
            ));
        }
    }
    let slice = |s: Segment| &payload[s.offset as usize..(s.offset + s.len) as usize];
    let f32s = |s: Segment| -> Vec<f32> {
        slice(s)
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect()
    };
    let zeros = slice(lh.zeros)
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let quantized = QuantizedTensor::from_parts(
        lh.out_dim,
        lh.in_dim,
        slice(lh.codes).to_vec(),
        f32s(lh.scales),
        zeros,
        *config,
    )
    .map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(base + lh.codes.offset, format!("layer `{}`: {detail}", lh.name)),
        other => other,
    })?;
    let a = DenseMatrix::new_finite(lh.rank, lh.in_dim, f32s(lh.a))?;
    let b = DenseMatrix::new_finite(lh.out_dim, lh.rank, f32s(lh.b))?;
    Ok(FbqLayer {
        name: lh.name.clone(),
        quantized,
        a,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_rtn;
    use crate::synth::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> FbqModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = QuantConfig::new(3, 8);
        let layers = (0..2)
            .map(|i| FbqLayer {
                name: format!("L{i}"),
                quantized: quantize_rtn(&gaussian(4, 20, 1.0, &mut rng), &config).unwrap(),
                a: gaussian(2, 20, 1.0, &mut rng).cast(),
                b: gaussian(4, 2, 1.0, &mut rng).cast(),
            })
            .collect();
        FbqModel { config, layers }
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = fbq_to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(fbq_from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = fbq_to_bytes(&model()).unwrap();
        for cut in [0, 3, 11, 40, bytes.len() - 1] {
            assert!(
                matches!(fbq_from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = fbq_to_bytes(&model()).unwrap();
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'2';
        assert!(matches!(
            fbq_from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn trailing_bytes_break_tiling() {
        let mut bytes = fbq_to_bytes(&model()).unwrap();
        bytes.push(0);
        assert!(matches!(fbq_from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
