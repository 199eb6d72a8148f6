//! Network assembly.
//!
//! Encoder: a 7x7 stride-2 stem and four bottleneck stages (3, 4, 6, 3
//! blocks). The first block of every stage has stride 2, so the encoder
//! output is at 1/32 of the input. An attention-boosting module (`abm5`)
//! gates the last bottleneck of stage 4 into the stage output; `abm2`..`abm4`
//! do the same for stages 1..3 when `abm_all_stages` is set.
//!
//! Bridge: the dilated separable bridge, or a 1x1 conv + BN + ReLU with the
//! same channel interface when it is disabled.
//!
//! Decoder: the bridge output is resized to 1/16 and feeds two paths. Path 1
//! is a stride-1 transposed convolution fused with the stage-3 skip by
//! `afn1`; path 2 is a stride-4 transposed convolution (1/4) fused with the
//! stage-1 skip by `afn2`. Path 1 is resized to 1/4, both are concatenated,
//! and a 1x1 head produces class scores that are resized to the input size.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use crate::blocks::{Abm, Afn, Bottleneck, Dbn, PointwiseBridge};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::params::{LayerDecl, ParamStore, Session, BN_MOMENTUM};
use crate::tensor::{ConvGeometry, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord};

/// Product of all encoder strides; inputs must be a multiple of it.
pub const OUTPUT_STRIDE: usize = 32;

const STEM_WIDTH: usize = 64;
const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_MID: [usize; 4] = [64, 128, 256, 512];
const STAGE_OUT: [usize; 4] = [256, 512, 1024, 2048];
const BRIDGE_OUT: usize = 1024;
const DEC1_OUT: usize = 512;
const DEC2_OUT: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Scales every channel width; 1.0 is the full model.
    pub width_mult: f64,
    /// Nominal training resolution (H, W).
    pub input_hw: (usize, usize),
    pub enable_abm5: bool,
    pub enable_dbn: bool,
    pub enable_afn1: bool,
    pub enable_afn2: bool,
    pub abm_all_stages: bool,
    /// 3x3 conv + BN + ReLU layers after each attention fusion.
    pub afn_convs: usize,
    /// Encoder stage (1..=4) whose output feeds `afn1`.
    pub afn1_skip_stage: usize,
    /// Encoder stage (1..=4) whose output feeds `afn2`.
    pub afn2_skip_stage: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 19,
            width_mult: 1.0,
            input_hw: (512, 512),
            enable_abm5: true,
            enable_dbn: true,
            enable_afn1: true,
            enable_afn2: true,
            abm_all_stages: false,
            afn_convs: 2,
            afn1_skip_stage: 3,
            afn2_skip_stage: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small model for tests and desk-scale experiments.
    pub fn toy(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            width_mult: 0.125,
            input_hw: (32, 32),
            ..ModelConfig::default()
        }
    }

    pub fn width(&self, base: usize) -> Result<usize> {
        let w = (base as f64 * self.width_mult).round() as usize;
        if w == 0 {
            return Err(Error::Config(format!(
                "width_mult {} turns a {base}-channel layer into 0 channels",
                self.width_mult
            )));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(Error::Config(format!("width_mult {} not in (0, 1]", self.width_mult)));
        }
        if !(1..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} not in 1..=255", self.num_classes)));
        }
        for (name, s) in [("afn1", self.afn1_skip_stage), ("afn2", self.afn2_skip_stage)] {
            if !(1..=4).contains(&s) {
                return Err(Error::Config(format!("{name} skip stage {s} not in 1..=4")));
            }
        }
        check_input_hw(self.input_hw.0, self.input_hw.1)
    }

    pub fn toggle(&self, t: Toggle) -> bool {
        match t {
            Toggle::AbM5 => self.enable_abm5,
            Toggle::DbN => self.enable_dbn,
            Toggle::AfN1 => self.enable_afn1,
            Toggle::AfN2 => self.enable_afn2,
        }
    }

    pub fn set_toggle(&mut self, t: Toggle, on: bool) {
        match t {
            Toggle::AbM5 => self.enable_abm5 = on,
            Toggle::DbN => self.enable_dbn = on,
            Toggle::AfN1 => self.enable_afn1 = on,
            Toggle::AfN2 => self.enable_afn2 = on,
        }
    }
}

fn check_input_hw(h: usize, w: usize) -> Result<()> {
    if h < OUTPUT_STRIDE || w < OUTPUT_STRIDE || !h.is_multiple_of(OUTPUT_STRIDE) || !w.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::Config(format!(
            "input {h}x{w} must be at least {OUTPUT_STRIDE} and a multiple of {OUTPUT_STRIDE}; resize it first"
        )));
    }
    Ok(())
}

/// The four ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Toggle {
    AbM5,
    DbN,
    AfN1,
    AfN2,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::AbM5, Toggle::DbN, Toggle::AfN1, Toggle::AfN2];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::AbM5 => "AbM5",
            Toggle::DbN => "DbN",
            Toggle::AfN1 => "AfN1",
            Toggle::AfN2 => "AfN2",
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Toggle> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown toggle '{s}' (expected AbM5, DbN, AfN1 or AfN2)")))
    }
}

/// `config` with one toggle switched off.
pub fn ablate(config: &ModelConfig, drop: Toggle) -> ModelConfig {
    let mut c = config.clone();
    c.set_toggle(drop, false);
    c
}

#[derive(Clone, Debug, PartialEq)]
enum Bridge {
    Dilated(Dbn),
    Pointwise(PointwiseBridge),
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    blocks: Vec<Bottleneck>,
    abm: Option<Abm>,
}

/// Block-level description of a network, derived from its config.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    stem_width: usize,
    stages: Vec<Stage>,
    bridge: Bridge,
    dec1_width: usize,
    dec2_width: usize,
    afn1: Option<Afn>,
    afn2: Option<Afn>,
    head_in: usize,
    num_classes: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Layout> {
        config.validate()?;
        let stem_width = config.width(STEM_WIDTH)?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = stem_width;
        for s in 0..4 {
            let mid = config.width(STAGE_MID[s])?;
            let out = config.width(STAGE_OUT[s])?;
            let blocks = (0..STAGE_BLOCKS[s])
                .map(|j| {
                    let cin = if j == 0 { in_ch } else { out };
                    let stride = if j == 0 { 2 } else { 1 };
                    Bottleneck::new(format!("stage{}.block{j}", s + 1), cin, mid, out, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            let has_abm = if s == 3 { config.enable_abm5 } else { config.abm_all_stages };
            let abm = has_abm.then(|| Abm::new(&format!("abm{}", s + 2), out, out));
            stages.push(Stage { blocks, abm });
            in_ch = out;
        }
        let enc_out = in_ch;
        let bridge_out = config.width(BRIDGE_OUT)?;
        let bridge = if config.enable_dbn {
            Bridge::Dilated(Dbn::new("dbn", enc_out, bridge_out))
        } else {
            Bridge::Pointwise(PointwiseBridge::new("bridge", enc_out, bridge_out))
        };
        let dec1_width = config.width(DEC1_OUT)?;
        let dec2_width = config.width(DEC2_OUT)?;
        let skip = |stage: usize| config.width(STAGE_OUT[stage - 1]);
        let afn1 = match config.enable_afn1 {
            true => Some(Afn::new("afn1", dec1_width, skip(config.afn1_skip_stage)?, config.afn_convs)),
            false => None,
        };
        let afn2 = match config.enable_afn2 {
            true => Some(Afn::new("afn2", dec2_width, skip(config.afn2_skip_stage)?, config.afn_convs)),
            false => None,
        };
        Ok(Layout {
            stem_width,
            stages,
            bridge,
            dec1_width,
            dec2_width,
            afn1,
            afn2,
            head_in: dec1_width + dec2_width,
            num_classes: config.num_classes,
        })
    }

    fn bridge_width(&self) -> (usize, usize) {
        match &self.bridge {
            Bridge::Dilated(d) => (d.channels, d.out_channels),
            Bridge::Pointwise(p) => (p.channels, p.out_channels),
        }
    }

    /// Every layer of the network, in forward order.
    pub fn decls(&self) -> Vec<LayerDecl> {
        let mut d = vec![LayerDecl::conv("stem", 3, self.stem_width, 7).with_bn()];
        for stage in &self.stages {
            for b in &stage.blocks {
                d.extend(b.decls());
            }
            if let Some(abm) = &stage.abm {
                d.extend(abm.decls());
            }
        }
        d.extend(match &self.bridge {
            Bridge::Dilated(b) => b.decls(),
            Bridge::Pointwise(b) => b.decls(),
        });
        let (_, bridge_out) = self.bridge_width();
        d.push(LayerDecl::deconv("dec1.deconv", bridge_out, self.dec1_width, 3, 1).with_bn());
        if let Some(afn) = &self.afn1 {
            d.extend(afn.decls());
        }
        d.push(LayerDecl::deconv("dec2.deconv", bridge_out, self.dec2_width, 4, 4).with_bn());
        if let Some(afn) = &self.afn2 {
            d.extend(afn.decls());
        }
        d.push(LayerDecl::conv("head", self.head_in, self.num_classes, 1).with_bias());
        d
    }

    pub fn param_count(&self) -> usize {
        self.decls().iter().map(LayerDecl::learnable_count).sum()
    }
}

/// Learnable count of the network a config describes, without allocating it.
pub fn layout_param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Layout::new(config)?.param_count())
}

/// Learnable counts grouped by the first segment of the layer id, in forward
/// order (`stem`, `stage1`, ..., `dbn`, `dec1`, `afn1`, ..., `head`).
pub fn param_breakdown(config: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for d in Layout::new(config)?.decls() {
        let group = d.id.split('.').next().unwrap_or(&d.id).to_string();
        match out.last_mut() {
            Some((g, n)) if *g == group => *n += d.learnable_count(),
            _ => out.push((group, d.learnable_count())),
        }
    }
    Ok(out)
}

/// Encoder activations the decoder needs.
struct Encoded {
    stage_outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    pub store: ParamStore,
}

impl Model {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        let layout = Layout::new(config)?;
        let store = ParamStore::from_decls(&layout.decls(), config.seed)?;
        Ok(Model {
            config: config.clone(),
            layout,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn encode(&self, s: &mut Session<'_>, x: Var) -> Result<Encoded> {
        let mut h = s.conv_bn_relu(x, "stem", ConvGeometry::new(2, 3))?;
        let mut stage_outputs = Vec::with_capacity(4);
        for stage in &self.layout.stages {
            let mut gate = h;
            for b in &stage.blocks {
                let o = b.forward(s, h)?;
                h = o.out;
                gate = o.gate;
            }
            if let Some(abm) = &stage.abm {
                h = abm.forward(s, h, gate)?;
            }
            stage_outputs.push(h);
        }
        Ok(Encoded { stage_outputs })
    }

    /// Records the forward pass of `x` (N, 3, H, W) on the session's graph and
    /// returns the (N, num_classes, H, W) logits.
    pub fn forward_session(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let xs = s.graph.shape(x);
        if xs.c != 3 {
            return Err(Error::shape("model", format!("input {xs:?} must have 3 channels")));
        }
        check_input_hw(xs.h, xs.w)?;
        let enc = self.encode(s, x)?;
        let top = enc.stage_outputs[3];
        let bridged = match &self.layout.bridge {
            Bridge::Dilated(b) => b.forward(s, top)?,
            Bridge::Pointwise(b) => b.forward(s, top)?,
        };
        let u = s.graph.resize_bilinear(bridged, xs.h / 16, xs.w / 16)?;

        let d1 = s.deconv(u, "dec1.deconv", 1, 1)?;
        let d1 = s.bn(d1, "dec1.deconv")?;
        let mut p1 = s.graph.relu(d1)?;
        if let Some(afn) = &self.layout.afn1 {
            p1 = afn.forward(s, p1, enc.stage_outputs[self.config.afn1_skip_stage - 1])?;
        }

        let d2 = s.deconv(u, "dec2.deconv", 4, 0)?;
        let d2 = s.bn(d2, "dec2.deconv")?;
        let mut p2 = s.graph.relu(d2)?;
        if let Some(afn) = &self.layout.afn2 {
            p2 = afn.forward(s, p2, enc.stage_outputs[self.config.afn2_skip_stage - 1])?;
        }

        let p2s = s.graph.shape(p2);
        let p1 = s.graph.resize_bilinear(p1, p2s.h, p2s.w)?;
        let cat = s.graph.concat_channels(&[p1, p2])?;
        let logits = s.conv(cat, "head", ConvGeometry::default())?;
        s.graph.resize_bilinear(logits, xs.h, xs.w)
    }

    /// Runs one forward pass. In training mode, batch norm uses batch
    /// statistics and folds them into the running averages afterwards.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (logits, stats) = {
            let mut s = Session::new(&self.store, training);
            let xv = s.graph.constant(x.clone());
            let y = self.forward_session(&mut s, xv)?;
            (s.graph.value(y).clone(), s.take_stats())
        };
        if training {
            self.store.update_running_stats(&stats, BN_MOMENTUM)?;
        }
        Ok(logits)
    }

    /// Eval-mode class map; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<LabelMap> {
        let mut s = Session::new(&self.store, false);
        let xv = s.graph.constant(x.clone());
        let y = self.forward_session(&mut s, xv)?;
        Ok(argmax_channels(s.graph.value(y)))
    }
}

/// Per-pixel index of the largest channel, lowest index on ties.
pub fn argmax_channels(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let plane = s.plane();
    let mut labels = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let mut best = 0;
            let mut best_v = logits.data()[base + i];
            for c in 1..s.c {
                let v = logits.data()[base + c * plane + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMap::new(s.n, s.h, s.w, labels).expect("argmax map matches logits shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_parse_case_insensitively() {
        assert_eq!("afn2".parse::<Toggle>().unwrap(), Toggle::AfN2);
        assert_eq!("DBN".parse::<Toggle>().unwrap(), Toggle::DbN);
        assert!("abm4".parse::<Toggle>().is_err());
    }

    #[test]
    fn ablate_is_idempotent_and_local() {
        let c = ModelConfig::toy(4);
        let once = ablate(&c, Toggle::AfN2);
        assert_eq!(ablate(&once, Toggle::AfN2), once);
        assert!(!once.enable_afn2 && once.enable_afn1 && once.enable_dbn && once.enable_abm5);
    }

    #[test]
    fn zero_width_is_rejected() {
        let c = ModelConfig {
            width_mult: 0.001,
            ..ModelConfig::toy(4)
        };
        assert!(matches!(Layout::new(&c), Err(Error::Config(_))));
    }

    #[test]
    fn ties_pick_lowest_class() {
        let t = Tensor::from_vec(crate::tensor::Shape::new(1, 3, 1, 2), vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).data(), &[0, 1]);
    }
}
