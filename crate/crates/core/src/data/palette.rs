//! Class palettes: `class_id<TAB>name<TAB>R,G,B` lines.
//!
//! Class ids must be contiguous from 0. An optional entry with id 255 names
//! the void color, which maps to the ignore label.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::netpbm::Raster;
use super::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};

const CAMVID: &str = include_str!("../../data/camvid.palette");
const CITYSCAPES: &str = include_str!("../../data/cityscapes.palette");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    classes: Vec<PaletteEntry>,
    void: Option<PaletteEntry>,
}

impl Palette {
    /// The 11 CamVid classes plus void.
    pub fn camvid() -> Palette {
        Palette::parse(CAMVID).expect("bundled CamVid palette is valid")
    }

    /// The 19 Cityscapes evaluation classes (train ids) plus void.
    pub fn cityscapes() -> Palette {
        Palette::parse(CITYSCAPES).expect("bundled Cityscapes palette is valid")
    }

    pub fn builtin(name: &str) -> Option<Palette> {
        match name {
            "camvid" => Some(Palette::camvid()),
            "cityscapes" => Some(Palette::cityscapes()),
            _ => None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Palette> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Palette::parse(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Palette> {
        let mut classes = Vec::new();
        let mut void = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("palette line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, name, rgb] = fields[..] else {
                return Err(bad("expected class_id<TAB>name<TAB>R,G,B"));
            };
            let id: u8 = id.trim().parse().map_err(|_| bad("class id is not in 0..=255"))?;
            let channels = rgb
                .split(',')
                .map(|v| v.trim().parse::<u8>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("color components must be integers in 0..=255"))?;
            let rgb: [u8; 3] = channels.try_into().map_err(|_| bad("color needs three components"))?;
            let entry = PaletteEntry {
                id,
                name: name.trim().to_string(),
                rgb,
            };
            if id == IGNORE_LABEL {
                if void.replace(entry).is_some() {
                    return Err(bad("second void entry"));
                }
            } else if id as usize != classes.len() {
                return Err(bad(&format!("class id {id} out of order, expected {}", classes.len())));
            } else {
                classes.push(entry);
            }
        }
        if classes.is_empty() {
            return Err(Error::Data("palette defines no classes".into()));
        }
        let mut seen = HashMap::new();
        for e in classes.iter().chain(void.iter()) {
            if let Some(prev) = seen.insert(e.rgb, e.id) {
                return Err(Error::Data(format!(
                    "classes {prev} and {} share color {:?}",
                    e.id, e.rgb
                )));
            }
        }
        Ok(Palette { classes, void })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[PaletteEntry] {
        &self.classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|e| e.name.clone()).collect()
    }

    pub fn color(&self, label: u8) -> Option<[u8; 3]> {
        if label == IGNORE_LABEL {
            return self.void.as_ref().map(|e| e.rgb);
        }
        self.classes.get(label as usize).map(|e| e.rgb)
    }

    /// Converts a color-coded annotation into class ids. A color absent from
    /// the palette is an error rather than a silent clamp.
    pub fn map_rgb(&self, raster: &Raster) -> Result<LabelMap> {
        if raster.channels != 3 {
            return Err(Error::Data("color annotations must be P6".into()));
        }
        let lookup: HashMap<[u8; 3], u8> = self
            .classes
            .iter()
            .chain(self.void.iter())
            .map(|e| (e.rgb, e.id))
            .collect();
        let mut labels = Vec::with_capacity(raster.width * raster.height);
        for (i, px) in raster.data.chunks_exact(3).enumerate() {
            let rgb = [px[0], px[1], px[2]];
            let id = lookup.get(&rgb).ok_or_else(|| {
                Error::Data(format!(
                    "color {rgb:?} at (y={}, x={}) is not in the palette",
                    i / raster.width,
                    i % raster.width
                ))
            })?;
            labels.push(*id);
        }
        LabelMap::new(1, raster.height, raster.width, labels)
    }

    /// Renders a single label map with the palette colors.
    pub fn colorize(&self, labels: &LabelMap) -> Result<Raster> {
        if labels.batch() != 1 {
            return Err(Error::Data("only single label maps can be colorized".into()));
        }
        let mut data = Vec::with_capacity(labels.data().len() * 3);
        for &l in labels.data() {
            let rgb = self
                .color(l)
                .ok_or_else(|| Error::Data(format!("label {l} has no palette color")))?;
            data.extend_from_slice(&rgb);
        }
        Raster::new(labels.width(), labels.height(), 3, data)
    }
}
