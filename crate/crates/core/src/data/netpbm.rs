//! Binary 8-bit netpbm: P6 (RGB images) and P5 (grayscale, used for label maps).

use std::fs;
use std::path::Path;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A decoded 8-bit raster, interleaved when `channels == 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Data(format!("malformed netpbm header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("malformed netpbm header: bad {what}")))
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!("{channels} channels; only 1 (P5) or 3 (P6) supported")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{} bytes for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(Error::Data("malformed netpbm header: expected P5 or P6 magic".into())),
        };
        let mut hdr = Header { bytes, pos: 2 };
        let width = hdr.number("width")?;
        let height = hdr.number("height")?;
        let maxval = hdr.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported maxval {maxval}; only 255 is accepted")));
        }
        if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Data("malformed netpbm header: no separator before pixel data".into()));
        }
        let start = hdr.pos + 1;
        let len = width * height * channels;
        let payload = bytes.get(start..start + len).ok_or_else(|| {
            Error::Data(format!(
                "truncated netpbm payload: need {len} bytes, found {}",
                bytes.len().saturating_sub(start)
            ))
        })?;
        Raster::new(width, height, channels, payload.to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path, e))
    }

    /// (1, 3, H, W) tensor with bytes scaled into [0, 1].
    pub fn to_image(&self) -> Result<Tensor> {
        if self.channels != 3 {
            return Err(Error::Data("image files must be P6 (RGB)".into()));
        }
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data)
    }

    /// Raw bytes as a (1, H, W) label map.
    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.channels != 1 {
            return Err(Error::Data("label files must be P5 (grayscale)".into()));
        }
        LabelMap::new(1, self.height, self.width, self.data.clone())
    }

    /// Quantizes a (1, 3, H, W) tensor in [0, 1] to bytes.
    pub fn from_image(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Data(format!("cannot write {s:?} as a P6 image")));
        }
        let plane = s.plane();
        let mut data = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[3 * i + c] = (t.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Raster::new(s.w, s.h, 3, data)
    }

    pub fn from_labels(m: &LabelMap) -> Result<Self> {
        if m.batch() != 1 {
            return Err(Error::Data("only single label maps can be written".into()));
        }
        Raster::new(m.width(), m.height(), 1, m.data().to_vec())
    }
}

/// Reads a binary PPM (P6) or PGM (P5) file with maxval 255.
pub fn load_ppm_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    Raster::decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.as_ref().display())),
        other => other,
    })
}
