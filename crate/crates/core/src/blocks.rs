//! Building blocks of the network: the attention-boosting gate and module,
//! the residual bottleneck, the dilated separable bridge, and the
//! attention-fusion decoder unit.
//!
//! Every block owns only layer ids and geometry. Parameters live in a
//! [`ParamStore`](crate::params::ParamStore); a block lists what it needs via
//! `decls()` and reads it through a [`Session`] during `forward`.

use std::sync::Once;

use crate::error::{Error, Result};
use crate::params::{LayerDecl, Session};
use crate::tensor::{ConvGeometry, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    AbG,
    AbM,
    Bottleneck,
    DbN,
    AfN,
}

/// Geometry summary of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Only non-empty for the dilated bridge.
    pub dilations: Vec<usize>,
}

/// Attention-boosting gate: `sigmoid(x) * x`, elementwise.
///
/// `x` is the batch-normalized output of a block's last convolution; the
/// result has the same shape.
pub fn abg_forward(g: &mut Graph, x: Var) -> Result<Var> {
    let gate = g.sigmoid(x)?;
    g.mul(gate, x)
}

fn check_channels(g: &Graph, v: Var, want: usize, op: &'static str, what: &str) -> Result<()> {
    let got = g.shape(v).c;
    if got != want {
        return Err(Error::Shape {
            op,
            detail: format!("{what} has {got} channels, block expects {want}"),
        });
    }
    Ok(())
}

/// Attention-boosting module: gates `gate_src` with [`abg_forward`], maps it
/// to the trunk's channel count with a 1x1 convolution, resizes it to the
/// trunk's spatial size and adds it to the trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Abm {
    pub adapter: String,
    pub gate_channels: usize,
    pub trunk_channels: usize,
}

impl Abm {
    pub fn new(prefix: &str, gate_channels: usize, trunk_channels: usize) -> Self {
        Abm {
            adapter: format!("{prefix}.adapter"),
            gate_channels,
            trunk_channels,
        }
    }

    pub fn decls(&self) -> Vec<LayerDecl> {
        vec![LayerDecl::conv(&self.adapter, self.gate_channels, self.trunk_channels, 1).with_bias()]
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            kind: BlockKind::AbM,
            in_channels: self.gate_channels,
            out_channels: self.trunk_channels,
            stride: 1,
            dilations: vec![],
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, trunk: Var, gate_src: Var) -> Result<Var> {
        check_channels(&s.graph, gate_src, self.gate_channels, "abm", "gate source")?;
        check_channels(&s.graph, trunk, self.trunk_channels, "abm", "trunk")?;
        let gated = abg_forward(&mut s.graph, gate_src)?;
        let mapped = s.conv(gated, &self.adapter, ConvGeometry::default())?;
        let t = s.graph.shape(trunk);
        let resized = s.graph.resize_bilinear(mapped, t.h, t.w)?;
        s.graph.add(trunk, resized)
    }
}

/// Outputs of a bottleneck: the block result and the batch-normalized output
/// of its last convolution (before the residual sum), which is the input of
/// an attention-boosting gate.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckOutput {
    pub out: Var,
    pub gate: Var,
}

/// 1x1 → 3x3 → 1x1 residual bottleneck with a projection shortcut when the
/// shape changes. The stride sits on the 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub prefix: String,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Bottleneck {
    pub fn new(prefix: impl Into<String>, in_channels: usize, mid_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("bottleneck stride {stride} not in {{1, 2}}")));
        }
        Ok(Bottleneck {
            prefix: prefix.into(),
            in_channels,
            mid_channels,
            out_channels,
            stride,
        })
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn layer_id(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn decls(&self) -> Vec<LayerDecl> {
        let mut d = vec![
            LayerDecl::conv(self.layer_id("conv1"), self.in_channels, self.mid_channels, 1).with_bn(),
            LayerDecl::conv(self.layer_id("conv2"), self.mid_channels, self.mid_channels, 3).with_bn(),
            LayerDecl::conv(self.layer_id("conv3"), self.mid_channels, self.out_channels, 1).with_bn(),
        ];
        if self.has_projection() {
            d.push(LayerDecl::conv(self.layer_id("proj"), self.in_channels, self.out_channels, 1).with_bn());
        }
        d
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            dilations: vec![],
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<BottleneckOutput> {
        check_channels(&s.graph, x, self.in_channels, "bottleneck", "input")?;
        let a = s.conv_bn_relu(x, &self.layer_id("conv1"), ConvGeometry::default())?;
        let b = s.conv_bn_relu(a, &self.layer_id("conv2"), ConvGeometry::new(self.stride, 1))?;
        let gate = s.conv_bn(b, &self.layer_id("conv3"), ConvGeometry::default())?;
        let shortcut = if self.has_projection() {
            s.conv_bn(x, &self.layer_id("proj"), ConvGeometry::new(self.stride, 0))?
        } else {
            x
        };
        let (rs, ss) = (s.graph.shape(gate), s.graph.shape(shortcut));
        if rs != ss {
            return Err(Error::Shape {
                op: "bottleneck",
                detail: format!("residual path {rs:?} vs shortcut {ss:?}"),
            });
        }
        let sum = s.graph.add(gate, shortcut)?;
        let out = s.graph.relu(sum)?;
        Ok(BottleneckOutput { out, gate })
    }
}

static SMALL_DBN_INPUT: Once = Once::new();

/// Dilation-based separable bridge: parallel depthwise 3x3 convolutions with
/// large dilations (each followed by batch norm and ReLU), fused by
/// elementwise addition and projected by one shared 1x1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dbn {
    pub prefix: String,
    pub channels: usize,
    pub out_channels: usize,
    pub dilations: Vec<usize>,
}

impl Dbn {
    pub const DEFAULT_DILATIONS: [usize; 3] = [12, 16, 18];

    /// Smallest feature map on which every default branch sees real pixels at
    /// all nine taps somewhere in the interior.
    pub const MIN_FULL_SUPPORT: usize = 25;

    pub fn new(prefix: impl Into<String>, channels: usize, out_channels: usize) -> Self {
        Dbn {
            prefix: prefix.into(),
            channels,
            out_channels,
            dilations: Self::DEFAULT_DILATIONS.to_vec(),
        }
    }

    pub fn branch_id(&self, i: usize) -> String {
        format!("{}.branch{i}", self.prefix)
    }

    pub fn proj_id(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    pub fn decls(&self) -> Vec<LayerDecl> {
        let mut d: Vec<LayerDecl> = (0..self.dilations.len())
            .map(|i| LayerDecl::conv(self.branch_id(i), 1, self.channels, 3).with_bn())
            .collect();
        d.push(LayerDecl::conv(self.proj_id(), self.channels, self.out_channels, 1).with_bias());
        d
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            kind: BlockKind::DbN,
            in_channels: self.channels,
            out_channels: self.out_channels,
            stride: 1,
            dilations: self.dilations.clone(),
        }
    }

    /// Per-branch outputs (depthwise dilated conv, batch norm, ReLU).
    pub fn branches(&self, s: &mut Session<'_>, x: Var) -> Result<Vec<Var>> {
        check_channels(&s.graph, x, self.channels, "dbn", "input")?;
        let xs = s.graph.shape(x);
        if xs.h.min(xs.w) < Self::MIN_FULL_SUPPORT {
            SMALL_DBN_INPUT.call_once(|| {
                log::warn!(
                    "dilated bridge input {}x{} is smaller than {}; outer taps only see zero padding",
                    xs.h,
                    xs.w,
                    Self::MIN_FULL_SUPPORT
                )
            });
        }
        let mut outs = Vec::with_capacity(self.dilations.len());
        for (i, &d) in self.dilations.iter().enumerate() {
            let geom = ConvGeometry::dilated(d, d).with_groups(self.channels);
            outs.push(s.conv_bn_relu(x, &self.branch_id(i), geom)?);
        }
        let first = s.graph.shape(outs[0]);
        if let Some(&bad) = outs.iter().find(|&&v| s.graph.shape(v) != first) {
            return Err(Error::Shape {
                op: "dbn",
                detail: format!("branch output {:?} vs {first:?}", s.graph.shape(bad)),
            });
        }
        Ok(outs)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let outs = self.branches(s, x)?;
        let mut fused = outs[0];
        for &o in &outs[1..] {
            fused = s.graph.add(fused, o)?;
        }
        s.conv(fused, &self.proj_id(), ConvGeometry::default())
    }
}

/// Stand-in for [`Dbn`] with the same channel interface: 1x1 conv, batch
/// norm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseBridge {
    pub id: String,
    pub channels: usize,
    pub out_channels: usize,
}

impl PointwiseBridge {
    pub fn new(prefix: &str, channels: usize, out_channels: usize) -> Self {
        PointwiseBridge {
            id: format!("{prefix}.conv"),
            channels,
            out_channels,
        }
    }

    pub fn decls(&self) -> Vec<LayerDecl> {
        vec![LayerDecl::conv(&self.id, self.channels, self.out_channels, 1).with_bn()]
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.conv_bn_relu(x, &self.id, ConvGeometry::default())
    }
}

/// Attention-fusion unit for the decoder.
///
/// The encoder skip is projected to the decoder's channel count (1x1 conv +
/// batch norm) and resized to its spatial size, giving `e`. A sigmoid gate
/// computed from `e` by a 1x1 convolution scales it, the result is added to
/// the decoder tensor, and `convs` 3x3 conv + BN + ReLU layers follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Afn {
    pub prefix: String,
    pub dec_channels: usize,
    pub skip_channels: usize,
    pub convs: usize,
}

impl Afn {
    pub fn new(prefix: impl Into<String>, dec_channels: usize, skip_channels: usize, convs: usize) -> Self {
        Afn {
            prefix: prefix.into(),
            dec_channels,
            skip_channels,
            convs,
        }
    }

    pub fn layer_id(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn fuse_id(&self, i: usize) -> String {
        self.layer_id(&format!("fuse{i}"))
    }

    pub fn decls(&self) -> Vec<LayerDecl> {
        let c = self.dec_channels;
        let mut d = vec![
            LayerDecl::conv(self.layer_id("proj"), self.skip_channels, c, 1).with_bn(),
            LayerDecl::conv(self.layer_id("gate"), c, c, 1).with_bias(),
        ];
        d.extend((0..self.convs).map(|i| LayerDecl::conv(self.fuse_id(i), c, c, 3).with_bn()));
        d
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            kind: BlockKind::AfN,
            in_channels: self.dec_channels,
            out_channels: self.dec_channels,
            stride: 1,
            dilations: vec![],
        }
    }

    /// Projected and resized skip, `e`.
    pub fn project_skip(&self, s: &mut Session<'_>, dec: Var, enc_skip: Var) -> Result<Var> {
        check_channels(&s.graph, dec, self.dec_channels, "afn", "decoder input")?;
        check_channels(&s.graph, enc_skip, self.skip_channels, "afn", "encoder skip")?;
        let e = s.conv_bn(enc_skip, &self.layer_id("proj"), ConvGeometry::default())?;
        let (d, es) = (s.graph.shape(dec), s.graph.shape(e));
        if (es.h, es.w) == (d.h, d.w) {
            Ok(e)
        } else {
            s.graph.resize_bilinear(e, d.h, d.w)
        }
    }

    /// `dec + sigmoid(gate(e)) * e`
    pub fn fuse(&self, s: &mut Session<'_>, dec: Var, e: Var) -> Result<Var> {
        let logits = s.conv(e, &self.layer_id("gate"), ConvGeometry::default())?;
        let g = s.graph.sigmoid(logits)?;
        let gated = s.graph.mul(g, e)?;
        s.graph.add(dec, gated)
    }

    pub fn forward(&self, s: &mut Session<'_>, dec: Var, enc_skip: Var) -> Result<Var> {
        let e = self.project_skip(s, dec, enc_skip)?;
        let mut y = self.fuse(s, dec, e)?;
        for i in 0..self.convs {
            y = s.conv_bn_relu(y, &self.fuse_id(i), ConvGeometry::new(1, 1))?;
        }
        Ok(y)
    }
}
