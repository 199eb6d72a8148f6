//! Dataset plumbing: label maps and samples, binary PPM/PGM files, split
//! manifests, class palettes and a synthetic scene generator.

mod manifest;
pub mod netpbm;
mod palette;
mod synth;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use manifest::{load_manifest, load_split, DatasetManifest, ManifestEntry, Split};
pub use netpbm::{load_ppm_pgm, Raster};
pub use palette::{Palette, PaletteEntry};
pub use synth::{class_color, synth_dataset, synth_scene};

/// Label value excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Integer class map in (N, H, W) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!("label map {n}x{h}x{w} is empty")));
        }
        if data.len() != n * h * w {
            return Err(Error::Data(format!(
                "{} labels supplied for a {n}x{h}x{w} map",
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Shape as a (N, 1, H, W) tensor shape.
    pub fn shape(&self) -> Shape {
        Shape::new(self.n, 1, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    /// Concatenates single maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| Error::Data("no label maps to stack".into()))?;
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::Data(format!(
                    "cannot stack {}x{} labels with {}x{}",
                    m.h, m.w, first.h, first.w
                )));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }

    /// Checks that every label is a class index or the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE_LABEL && v as usize >= num_classes {
                let (n, rest) = (i / (self.h * self.w), i % (self.h * self.w));
                return Err(Error::Data(format!(
                    "label {v} at (n={n}, y={}, x={}) is neither a class in 0..{num_classes} nor {IGNORE_LABEL}",
                    rest / self.w,
                    rest % self.w
                )));
            }
        }
        Ok(())
    }
}

/// One image with its dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// (1, 3, H, W) with values in [0, 1].
    pub image: Tensor,
    /// (1, H, W).
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Data(format!("image tensor {s:?} is not (1, 3, H, W)")));
        }
        if labels.batch() != 1 || (labels.height(), labels.width()) != (s.h, s.w) {
            return Err(Error::Data(format!(
                "labels {}x{} do not match image {}x{}",
                labels.height(),
                labels.width(),
                s.h,
                s.w
            )));
        }
        Ok(SegSample {
            id: id.into(),
            image,
            labels,
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("image {} has values outside [0, 1]", self.id)));
        }
        self.labels.validate(num_classes)
    }

    pub fn flip_horizontal(&self) -> SegSample {
        let s = self.image.shape();
        let mut image = self.image.clone();
        for row in image.data_mut().chunks_mut(s.w) {
            row.reverse();
        }
        SegSample {
            id: self.id.clone(),
            image,
            labels: self.labels.flip_horizontal(),
        }
    }
}

/// Stacks samples of equal size into an image batch and a label batch.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor, LabelMap)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let s = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.numel());
    for smp in samples {
        if smp.image.shape() != s {
            return Err(Error::Data(format!(
                "sample {} is {:?}, batch is {s:?}",
                smp.id,
                smp.image.shape()
            )));
        }
        data.extend_from_slice(smp.image.data());
    }
    let images = Tensor::from_vec(Shape::new(samples.len(), 3, s.h, s.w), data)?;
    let labels = LabelMap::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    Ok((images, labels))
}
