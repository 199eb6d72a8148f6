//! Confusion matrix, per-class IoU and mean IoU.
//!
//! A class whose union is empty (absent from both truth and prediction) has
//! an undefined IoU and is left out of the mean instead of counting as 0.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Pixel counts with rows indexed by truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore: Option<u8>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore: Option<u8>) -> Self {
        ConfusionMatrix {
            num_classes,
            ignore,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    /// Adds one pixel per position where the truth label is not ignored.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape(
                "confusion",
                format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
            ));
        }
        truth.validate(self.num_classes)?;
        let c = self.num_classes;
        let mut local = vec![0u64; c * c];
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if Some(t) == self.ignore {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                let plane = truth.height() * truth.width();
                let rest = i % plane;
                return Err(Error::Data(format!(
                    "label pair (truth {t}, pred {p}) at (n={}, y={}, x={}) is out of range for {c} classes",
                    i / plane,
                    rest / truth.width(),
                    rest % truth.width()
                )));
            }
            local[t as usize * c + p as usize] += 1;
        }
        for (a, b) in self.counts.iter_mut().zip(local) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise sum with a matrix gathered elsewhere.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Usage(format!(
                "cannot merge {}-class and {}-class matrices",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `tp / (row + col - tp)` per class; `None` when the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a defined IoU.
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Data("mean IoU is undefined: no class occurs in truth or prediction".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// IoU table with one column per class and a closing `mIoU` column; one row
/// per labelled matrix. Undefined IoUs are written as `undefined`, values
/// with six decimals.
pub fn iou_table_csv(class_names: &[String], rows: &[(&str, &ConfusionMatrix)]) -> Result<String> {
    let c = rows.first().map_or(class_names.len(), |(_, m)| m.num_classes);
    if let Some((label, m)) = rows.iter().find(|(_, m)| m.num_classes != c) {
        return Err(Error::Usage(format!("row {label} has {} classes, table has {c}", m.num_classes)));
    }
    let mut out = String::from("split");
    for k in 0..c {
        let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        let _ = write!(out, ",{name}");
    }
    out.push_str(",mIoU\n");
    for (label, m) in rows {
        out.push_str(label);
        for iou in m.per_class_iou() {
            match iou {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push_str(",undefined"),
            }
        }
        let _ = writeln!(out, ",{:.6}", m.mean_iou()?);
    }
    Ok(out)
}
