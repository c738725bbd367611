//! Binary PPM (P6, maxval 255) images as 3×H×W tensors scaled to `[0, 1]`.

use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format {0:?}: only binary P6 is accepted")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}: only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("image must have 3 channels, got {0}")]
    ChannelCount(usize),
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32, PpmError> {
        let tok = self
            .token()
            .ok_or_else(|| PpmError::BadHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| PpmError::BadHeader(format!("{what} is not a number: {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, PpmError> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token().unwrap_or_default();
    if magic != b"P6" {
        return Err(PpmError::UnsupportedFormat(String::from_utf8_lossy(magic).into_owned()));
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(PpmError::BadHeader("missing separator before pixel data".into())),
    }
    let expected = 3 * width * height;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let plane = width * height;
    let mut data = vec![0.0f32; expected];
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new(3, height, width, data).expect("length matches header"))
}

/// Values are clamped to `[0, 1]` and rounded to the nearest byte.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>, PpmError> {
    if image.channels() != 3 {
        return Err(PpmError::ChannelCount(image.channels()));
    }
    let (w, h) = (image.width(), image.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = image.plane_len();
    let data = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, PpmError> {
    let bytes = std::fs::read(path).map_err(|source| PpmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes)
}

pub fn write_ppm(image: &Tensor<f32>, path: &Path) -> Result<(), PpmError> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|source| PpmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Nearest-neighbor resize to `height × width`.
pub fn resize_nearest(image: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let (sh, sw) = (image.height(), image.width());
    Tensor::from_fn(image.channels(), height, width, |c, y, x| {
        image.get(c, y * sh / height, x * sw / width)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), (3, 1, 1));
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_comments_and_layout() {
        let t = decode_ppm(b"P6 # c\n2 1 # w h\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(t.get(0, 0, 1), 4.0 / 255.0);
        assert_eq!(t.get(2, 0, 0), 3.0 / 255.0);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(PpmError::UnsupportedFormat(m)) if m == "P5"));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\x00"), Err(PpmError::UnsupportedMaxval(65535))));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\x00\x00"),
            Err(PpmError::Truncated { expected: 12, actual: 2 })
        ));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(PpmError::BadHeader(_))));
        assert!(matches!(decode_ppm(b""), Err(PpmError::UnsupportedFormat(_))));
    }

    #[test]
    fn round_trip_fixed_point() {
        let bytes = b"P6\n2 2\n255\n\x00\x10\x20\x30\x40\x50\x60\x70\x80\x90\xa0\xff";
        let t = decode_ppm(bytes).unwrap();
        let again = encode_ppm(&t).unwrap();
        assert_eq!(again.as_slice(), bytes.as_slice());
        assert_eq!(decode_ppm(&again).unwrap(), t);
    }

    #[test]
    fn resize_picks_nearest() {
        let t = Tensor::from_fn(3, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f32);
        let r = resize_nearest(&t, 4, 4);
        assert_eq!(r.get(1, 3, 3), t.get(1, 1, 1));
        assert_eq!(r.get(0, 1, 2), t.get(0, 0, 1));
    }
}
