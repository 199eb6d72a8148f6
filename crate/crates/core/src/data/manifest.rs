//! Split manifests: `split<TAB>image_path<TAB>label_path` per line, paths
//! relative to the manifest's directory.
//!
//! Lines starting with `#` are comments, except two directives that name the
//! classes: `#classes<TAB>name<TAB>name...` or `#palette<TAB>camvid|cityscapes|file`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::netpbm::load_ppm_pgm;
use super::{Palette, SegSample};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of the image; unique across the manifest.
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<SegSample> {
        let image = load_ppm_pgm(&self.image)?.to_image()?;
        let labels = load_ppm_pgm(&self.label)?.to_labels()?;
        SegSample::new(self.id.clone(), image, labels).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", self.id)),
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Empty when the manifest carries no class directive.
    pub class_names: Vec<String>,
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, root).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads every sample of one split in stream order.
pub fn load_split(manifest: &DatasetManifest, split: Split, seed: u64) -> Result<Vec<SegSample>> {
    manifest.iterate(split, seed).collect()
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
        let root = root.into();
        let mut entries = Vec::new();
        let mut class_names = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            let at = |msg: String| Error::Data(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("#classes\t") {
                class_names = rest.split('\t').map(|s| s.trim().to_string()).collect();
                continue;
            }
            if let Some(rest) = line.strip_prefix("#palette\t") {
                let rest = rest.trim();
                let palette = match Palette::builtin(rest) {
                    Some(p) => p,
                    None => Palette::load(root.join(rest))?,
                };
                class_names = palette.class_names();
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, image, label] = fields[..] else {
                return Err(at("expected split<TAB>image_path<TAB>label_path".into()));
            };
            let split: Split = split.trim().parse().map_err(|e: Error| at(e.to_string()))?;
            let image = root.join(image.trim());
            let label = root.join(label.trim());
            for p in [&image, &label] {
                if !p.is_file() {
                    return Err(at(format!("missing file {}", p.display())));
                }
            }
            let id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| at("image path has no file name".into()))?;
            if !ids.insert(id.clone()) {
                return Err(at(format!("duplicate id '{id}'")));
            }
            entries.push(ManifestEntry {
                id,
                image,
                label,
                split,
            });
        }
        Ok(DatasetManifest {
            root,
            entries,
            class_names,
        })
    }

    pub fn len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Entries of one split: seeded shuffle for train, sorted by id otherwise.
    pub fn ordered(&self, split: Split, seed: u64) -> Vec<&ManifestEntry> {
        let mut out: Vec<&ManifestEntry> = self.entries.iter().filter(|e| e.split == split).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        if split == Split::Train {
            out.shuffle(&mut rng_for(seed, "manifest.train"));
        }
        out
    }

    /// Loads samples in [`ordered`](Self::ordered) order. When the manifest
    /// names its classes, every label must be a class id or the ignore label.
    pub fn iterate(&self, split: Split, seed: u64) -> impl Iterator<Item = Result<SegSample>> + '_ {
        let classes = self.class_names.len();
        self.ordered(split, seed).into_iter().map(move |e| {
            let s = e.load()?;
            if classes > 0 {
                s.validate(classes).map_err(|err| match err {
                    Error::Data(msg) => Error::Data(format!("{}: {msg}", e.id)),
                    other => other,
                })?;
            }
            Ok(s)
        })
    }

    /// Serializes with paths relative to `root` where possible.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.class_names.is_empty() {
            out.push_str("#classes\t");
            out.push_str(&self.class_names.join("\t"));
            out.push('\n');
        }
        let rel = |p: &Path| p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.split, rel(&e.image), rel(&e.label)));
        }
        out
    }
}
