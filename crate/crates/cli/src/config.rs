//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]`,
//! `[run]` and `[ablate]` sections. Every key has a default, so an empty
//! file describes the full-scale recipe.
//!
//! All randomness comes from `run.seed`. Sub-seeds are
//! `derive_seed(run.seed, tag)` for the tags `model`, `train`,
//! `synth.train`, `synth.val` and `synth.test`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sernet_core::model::ModelConfig;
use sernet_core::seed::derive_seed;
use sernet_core::train::{TrainConfig, WeightScheme};
use sernet_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub run: RunSection,
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: usize,
    pub width_mult: f64,
    pub input_h: usize,
    pub input_w: usize,
    pub abm5: bool,
    pub dbn: bool,
    pub afn1: bool,
    pub afn2: bool,
    pub abm_all_stages: bool,
    pub afn_convs: usize,
    pub afn1_skip_stage: usize,
    pub afn2_skip_stage: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_classes: m.num_classes,
            width_mult: m.width_mult,
            input_h: m.input_hw.0,
            input_w: m.input_hw.1,
            abm5: m.enable_abm5,
            dbn: m.enable_dbn,
            afn1: m.enable_afn1,
            afn2: m.enable_afn2,
            abm_all_stages: m.abm_all_stages,
            afn_convs: m.afn_convs,
            afn1_skip_stage: m.afn1_skip_stage,
            afn2_skip_stage: m.afn2_skip_stage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub max_iters: Option<usize>,
    pub flip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            l2: t.l2,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            max_iters: t.max_iters,
            flip: t.flip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Split manifest; when absent, synthetic scenes at the model input size
    /// are generated instead.
    pub manifest: Option<PathBuf>,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    /// `inverse`, `median` or `uniform`.
    pub weights: String,
    pub ignore: u8,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            synth_train: 8,
            synth_val: 8,
            synth_test: 0,
            weights: WeightScheme::default().name().into(),
            ignore: sernet_core::data::IGNORE_LABEL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: vec![0, 1, 2] }
    }
}

fn config_err(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{origin}: {e}"))
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `section.key=value`
    /// overrides and resolves a relative manifest against the file's
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e))?;
                let table: toml::Table = text.parse().map_err(|e| config_err(&p.display().to_string(), e))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e| config_err(path.map_or("defaults".into(), |p| p.display().to_string()).as_str(), e))?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.weight_scheme()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr {} must be finite and non-negative", self.train.lr)));
        }
        if (self.data.ignore as usize) < self.model.num_classes {
            return Err(Error::Config(format!(
                "data.ignore {} collides with a class id (num_classes {})",
                self.data.ignore, self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.run.seed, "model")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_classes: m.num_classes,
            width_mult: m.width_mult,
            input_hw: (m.input_h, m.input_w),
            enable_abm5: m.abm5,
            enable_dbn: m.dbn,
            enable_afn1: m.afn1,
            enable_afn2: m.afn2,
            abm_all_stages: m.abm_all_stages,
            afn_convs: m.afn_convs,
            afn1_skip_stage: m.afn1_skip_stage,
            afn2_skip_stage: m.afn2_skip_stage,
            seed: self.model_seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            l2: t.l2,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay,
            max_iters: t.max_iters,
            flip: t.flip,
            ignore: Some(self.data.ignore),
            seed: derive_seed(self.run.seed, "train"),
        }
    }

    pub fn weight_scheme(&self) -> Result<WeightScheme> {
        self.data.weights.parse()
    }
}

/// `section.key=value`; the value is read as a TOML literal and falls back
/// to a bare string, so `data.weights=uniform` needs no quotes.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = |why: &str| Error::Config(format!("override '{spec}': {why}"));
    let (key, raw) = spec.split_once('=').ok_or_else(|| bad("expected section.key=value"))?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| bad("key must be section.key"))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sub = entry.as_table_mut().ok_or_else(|| bad("section is not a table"))?;
    sub.insert(field.to_string(), value);
    Ok(())
}
