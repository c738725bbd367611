//! `IYW1` weight files, little-endian throughout:
//!
//! ```text
//! "IYW1" | u32 version=1 | u32 num_classes | u32 anchor_count | f32[2*anchor_count] anchors
//! u32 conv_layer_count
//! per conv layer, in index order:
//!   u32 layer_index | u8 has_bn
//!   has_bn: f32[out] gamma, beta, running_mean, running_var   else: f32[out] bias
//!   f32[out*in*k*k] weights
//! ```

use std::path::{Path, PathBuf};

use crate::tensor::{BatchNorm, ConvParams, Normalization, Shape, DEFAULT_BN_EPSILON};

use super::{iyolo_spec, tiny_spec, LayerKind, Network, NetworkError, NetworkSpec};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"IYW1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte offset {offset}: expected \"IYW1\", found {found:?}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("unsupported version {found} at byte offset {offset}")]
    UnsupportedVersion { offset: usize, found: u32 },
    #[error("truncated weight file at byte offset {offset}: expected {expected} bytes, file has {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("weight file does not match network spec at byte offset {offset}: {reason}")]
    ShapeMismatch { offset: usize, reason: String },
    #[error("invalid value at byte offset {offset}: {reason}")]
    InvalidValue { offset: usize, reason: String },
    #[error("{extra} unexpected trailing bytes at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Exact size in bytes of a weight file for `spec`.
pub fn expected_file_len(spec: &NetworkSpec) -> Result<usize, NetworkError> {
    let shapes = spec.validate()?;
    let mut len = 4 + 4 + 4 + 4 + 8 * spec.anchors.len() + 4;
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerKind::Convolutional {
            filters,
            kernel,
            batch_norm,
        } = &layer.kind
        {
            let cin = spec.layer_input_shape(&shapes, i).0;
            let norm = if *batch_norm { 4 * filters } else { *filters };
            len += 4 + 1 + 4 * (norm + filters * cin * kernel * kernel);
        }
    }
    Ok(len)
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_weights(net: &Network<f32>) -> Vec<u8> {
    let spec = net.spec();
    let mut buf = Vec::with_capacity(expected_file_len(spec).unwrap_or(0));
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.anchors.len() as u32).to_le_bytes());
    for &(w, h) in &spec.anchors {
        put_f32s(&mut buf, &[w as f32, h as f32]);
    }
    let convs: Vec<(usize, &ConvParams<f32>)> = net
        .params()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    buf.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (i, p) in convs {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        match &p.norm {
            Normalization::BatchNorm(bn) => {
                buf.push(1);
                put_f32s(&mut buf, &bn.gamma);
                put_f32s(&mut buf, &bn.beta);
                put_f32s(&mut buf, &bn.running_mean);
                put_f32s(&mut buf, &bn.running_var);
            }
            Normalization::Bias(b) => {
                buf.push(0);
                put_f32s(&mut buf, b);
            }
        }
        put_f32s(&mut buf, &p.weights);
    }
    buf
}

pub fn save_weights(net: &Network<f32>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(net)).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    data: &'a [u8],
    offset: usize,
    /// Full expected length, once the header has pinned it down.
    expected: Option<usize>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        if self.offset + n > self.data.len() {
            return Err(WeightsError::Truncated {
                offset: self.offset,
                expected: self.expected.unwrap_or(self.offset + n),
                actual: self.data.len(),
            });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, WeightsError> {
        let start = self.offset;
        let b = self.take(4 * n)?;
        let vals: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(WeightsError::InvalidValue {
                offset: start + 4 * k,
                reason: "non-finite parameter".into(),
            });
        }
        Ok(vals)
    }

    fn mismatch(&self, at: usize, reason: impl Into<String>) -> WeightsError {
        WeightsError::ShapeMismatch {
            offset: at,
            reason: reason.into(),
        }
    }
}

/// Walks the layer-index markers at the offsets implied by `spec`, so a file
/// written for different layer widths is reported as a shape mismatch rather
/// than as whatever its misaligned payload happens to decode to.
fn check_layer_markers(spec: &NetworkSpec, shapes: &[Shape], data: &[u8], start: usize) -> Result<(), WeightsError> {
    let mut at = start;
    for (i, layer) in spec.layers.iter().enumerate() {
        let LayerKind::Convolutional {
            filters,
            kernel,
            batch_norm,
        } = &layer.kind
        else {
            continue;
        };
        let Some(b) = data.get(at..at + 4) else {
            return Ok(());
        };
        let index = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        if index != i {
            return Err(WeightsError::ShapeMismatch {
                offset: at,
                reason: format!("expected conv layer {i} marker, found {index}: layer widths differ from the expected network"),
            });
        }
        let cin = spec.layer_input_shape(shapes, i).0;
        let norm = if *batch_norm { 4 * filters } else { *filters };
        at += 4 + 1 + 4 * (norm + filters * cin * kernel * kernel);
    }
    Ok(())
}

/// Parses a weight file image against `spec`. Anchor values come from the file.
pub fn decode_weights(spec: &NetworkSpec, data: &[u8]) -> Result<Network<f32>, WeightsError> {
    let shapes = spec.validate()?;
    let mut r = Reader {
        data,
        offset: 0,
        expected: None,
    };
    let magic = r.take(4).map_err(|_| WeightsError::BadMagic {
        offset: 0,
        found: data[..data.len().min(4)].to_vec(),
    })?;
    if magic != WEIGHTS_MAGIC {
        return Err(WeightsError::BadMagic {
            offset: 0,
            found: magic.to_vec(),
        });
    }
    let at = r.offset;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(WeightsError::UnsupportedVersion {
            offset: at,
            found: version,
        });
    }
    let at = r.offset;
    let num_classes = r.u32()? as usize;
    if num_classes != spec.num_classes {
        return Err(r.mismatch(at, format!("file has {num_classes} classes, spec has {}", spec.num_classes)));
    }
    let at = r.offset;
    let anchor_count = r.u32()? as usize;
    if anchor_count != spec.anchors.len() {
        return Err(r.mismatch(
            at,
            format!("file has {anchor_count} anchors, spec has {}", spec.anchors.len()),
        ));
    }
    r.expected = Some(expected_file_len(spec)?);
    let at = r.offset;
    let raw = r.f32s(2 * anchor_count)?;
    let anchors: Vec<(f64, f64)> = raw.chunks_exact(2).map(|p| (p[0] as f64, p[1] as f64)).collect();
    if anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(WeightsError::InvalidValue {
            offset: at,
            reason: "anchor sizes must be positive".into(),
        });
    }
    let at = r.offset;
    let conv_count = r.u32()? as usize;
    let expected_convs = spec.conv_layers().count();
    if conv_count != expected_convs {
        return Err(r.mismatch(
            at,
            format!("file has {conv_count} conv layers, spec has {expected_convs}"),
        ));
    }

    check_layer_markers(spec, &shapes, data, r.offset)?;

    let mut params: Vec<Option<ConvParams<f32>>> = vec![None; spec.layers.len()];
    for (i, layer) in spec.layers.iter().enumerate() {
        let LayerKind::Convolutional {
            filters,
            kernel,
            batch_norm,
        } = &layer.kind
        else {
            continue;
        };
        let at = r.offset;
        let index = r.u32()? as usize;
        if index != i {
            return Err(r.mismatch(at, format!("expected conv layer {i}, found layer index {index}")));
        }
        let at = r.offset;
        let has_bn = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(WeightsError::InvalidValue {
                    offset: at,
                    reason: format!("has_bn flag must be 0 or 1, found {other}"),
                })
            }
        };
        if has_bn != *batch_norm {
            return Err(r.mismatch(at, format!("layer {i} batch-norm flag {has_bn} disagrees with spec")));
        }
        let out = *filters;
        let norm = if has_bn {
            let gamma = r.f32s(out)?;
            let beta = r.f32s(out)?;
            let running_mean = r.f32s(out)?;
            let at = r.offset;
            let running_var = r.f32s(out)?;
            if running_var.iter().any(|v| !(*v > 0.0)) {
                return Err(WeightsError::InvalidValue {
                    offset: at,
                    reason: format!("layer {i} running variance must be > 0"),
                });
            }
            Normalization::BatchNorm(BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon: DEFAULT_BN_EPSILON,
            })
        } else {
            Normalization::Bias(r.f32s(out)?)
        };
        let cin = spec.layer_input_shape(&shapes, i).0;
        let weights = r.f32s(out * cin * kernel * kernel)?;
        params[i] = Some(ConvParams {
            in_channels: cin,
            out_channels: out,
            kernel: *kernel,
            weights,
            norm,
            activation: layer.kind.activation().expect("conv"),
        });
    }
    if r.offset != data.len() {
        return Err(WeightsError::TrailingBytes {
            offset: r.offset,
            extra: data.len() - r.offset,
        });
    }
    let mut spec = spec.clone();
    spec.anchors = anchors;
    Ok(Network::from_params(spec, params)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>, WeightsError> {
    std::fs::read(path).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(spec: &NetworkSpec, path: impl AsRef<Path>) -> Result<Network<f32>, WeightsError> {
    decode_weights(spec, &read_file(path.as_ref())?)
}

/// Loads a file written for either the full or the tiny network, picking the
/// spec whose exact byte layout matches the file's header and length.
pub fn load_weights_any(path: impl AsRef<Path>) -> Result<Network<f32>, WeightsError> {
    let data = read_file(path.as_ref())?;
    let num_classes = if data.len() >= 12 && &data[..4] == WEIGHTS_MAGIC {
        u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize
    } else {
        // Let the full spec produce the precise header error.
        return decode_weights(&iyolo_spec(), &data);
    };
    let candidates = [iyolo_spec(), tiny_spec(num_classes.max(1))];
    for spec in &candidates {
        if expected_file_len(spec).ok() == Some(data.len()) {
            return decode_weights(spec, &data);
        }
    }
    decode_weights(&candidates[0], &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tiny_spec;

    fn tiny() -> Network<f32> {
        Network::build(tiny_spec(3), 11).unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let net = tiny();
        let bytes = encode_weights(&net);
        assert_eq!(bytes.len(), expected_file_len(net.spec()).unwrap());
        let back = decode_weights(net.spec(), &bytes).unwrap();
        assert_eq!(encode_weights(&back), bytes);
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn bad_magic_at_zero() {
        let mut bytes = encode_weights(&tiny());
        bytes[..4].copy_from_slice(b"XXXX");
        match decode_weights(&tiny_spec(3), &bytes) {
            Err(WeightsError::BadMagic { offset: 0, found }) => assert_eq!(found, b"XXXX"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_reports_sizes() {
        let bytes = encode_weights(&tiny());
        let cut = bytes.len() / 2;
        match decode_weights(&tiny_spec(3), &bytes[..cut]) {
            Err(WeightsError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, cut);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_spec_is_shape_mismatch() {
        let bytes = encode_weights(&tiny());
        assert!(matches!(
            decode_weights(&tiny_spec(2), &bytes),
            Err(WeightsError::ShapeMismatch { offset: 8, .. })
        ));
        // Same header, different layer widths.
        assert!(matches!(
            decode_weights(&iyolo_spec(), &bytes),
            Err(WeightsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn version_and_trailing() {
        let mut bytes = encode_weights(&tiny());
        bytes.push(0);
        assert!(matches!(
            decode_weights(&tiny_spec(3), &bytes),
            Err(WeightsError::TrailingBytes { extra: 1, .. })
        ));
        bytes.pop();
        bytes[4] = 2;
        assert!(matches!(
            decode_weights(&tiny_spec(3), &bytes),
            Err(WeightsError::UnsupportedVersion { offset: 4, found: 2 })
        ));
    }
}
