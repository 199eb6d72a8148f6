//! Learnable layer parameters, their registry, and the per-forward session
//! that binds them onto a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{BatchNormMode, BatchStats, ConvGeometry, Graph, Shape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        let cs = Shape::new(1, channels, 1, 1);
        BatchNormParams {
            scale: Tensor::ones(cs).with_requires_grad(true),
            shift: Tensor::zeros(cs).with_requires_grad(true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Weights of one convolution-like layer, optionally followed by batch norm.
///
/// Convolution weights are laid out (C_out, C_in / groups, k, k); transposed
/// convolution weights (C_in, C_out, k, k). Biases are (1, C_out, 1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub id: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNormParams>,
}

/// Names of the learnable slots of a layer, in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
            Slot::BnScale => "bn_scale",
            Slot::BnShift => "bn_shift",
        }
    }
}

impl LayerParams {
    pub fn new(id: impl Into<String>, weight: Tensor) -> Self {
        LayerParams {
            id: id.into(),
            weight: weight.with_requires_grad(true),
            bias: None,
            bn: None,
        }
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias.with_requires_grad(true));
        self
    }

    pub fn with_bn(mut self, bn: BatchNormParams) -> Self {
        self.bn = Some(bn);
        self
    }

    pub fn learnables(&self) -> Vec<(Slot, &Tensor)> {
        let mut out = vec![(Slot::Weight, &self.weight)];
        if let Some(b) = &self.bias {
            out.push((Slot::Bias, b));
        }
        if let Some(bn) = &self.bn {
            out.push((Slot::BnScale, &bn.scale));
            out.push((Slot::BnShift, &bn.shift));
        }
        out
    }

    pub fn learnables_mut(&mut self) -> Vec<(Slot, &mut Tensor)> {
        let mut out = vec![(Slot::Weight, &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push((Slot::Bias, b));
        }
        if let Some(bn) = &mut self.bn {
            out.push((Slot::BnScale, &mut bn.scale));
            out.push((Slot::BnShift, &mut bn.shift));
        }
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.learnables().iter().map(|(_, t)| t.shape().numel()).sum()
    }
}

/// Shape-only description of a layer, used both to count parameters without
/// allocating them and to materialize them from a seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDecl {
    pub id: String,
    pub weight: Shape,
    pub bias: bool,
    pub bn: bool,
    pub transposed: bool,
    fan_in: usize,
}

impl LayerDecl {
    /// Convolution with `c_in` input channels per group.
    pub fn conv(id: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        LayerDecl {
            id: id.into(),
            weight: Shape::new(c_out, c_in, k, k),
            bias: false,
            bn: false,
            transposed: false,
            fan_in: c_in * k * k,
        }
    }

    /// Transposed convolution. Each output pixel receives about
    /// `c_in * k² / stride²` contributions, which sets the init scale.
    pub fn deconv(id: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        LayerDecl {
            id: id.into(),
            weight: Shape::new(c_in, c_out, k, k),
            bias: false,
            bn: false,
            transposed: true,
            fan_in: (c_in * k * k / (stride * stride)).max(1),
        }
    }

    pub fn with_bias(self) -> Self {
        LayerDecl { bias: true, ..self }
    }

    pub fn with_bn(self) -> Self {
        LayerDecl { bn: true, ..self }
    }

    /// Channel count seen by bias and batch norm.
    pub fn out_channels(&self) -> usize {
        if self.transposed {
            self.weight.c
        } else {
            self.weight.n
        }
    }

    pub fn learnable_count(&self) -> usize {
        let c = self.out_channels();
        self.weight.numel() + if self.bias { c } else { 0 } + if self.bn { 2 * c } else { 0 }
    }

    /// He-normal weights drawn from a stream keyed by the layer id; zero
    /// bias; identity batch norm.
    pub fn materialize(&self, seed: u64) -> LayerParams {
        let mut rng = rng_for(seed, &self.id);
        let std = (2.0 / self.fan_in as f64).sqrt();
        let c = self.out_channels();
        let mut p = LayerParams::new(self.id.clone(), Tensor::randn(self.weight, std, &mut rng));
        if self.bias {
            p = p.with_bias(Tensor::zeros(Shape::new(1, c, 1, 1)));
        }
        if self.bn {
            p = p.with_bn(BatchNormParams::identity(c));
        }
        p
    }
}

/// Ordered registry of every learnable layer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    layers: Vec<LayerParams>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_decls(decls: &[LayerDecl], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for d in decls {
            store.insert(d.materialize(seed))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, layer: LayerParams) -> Result<()> {
        if self.index.contains_key(&layer.id) {
            return Err(Error::Config(format!("duplicate layer id {}", layer.id)));
        }
        self.index.insert(layer.id.clone(), self.layers.len());
        self.layers.push(layer);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LayerParams> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut LayerParams> {
        self.index.get(id).map(|&i| &mut self.layers[i])
    }

    pub fn layer(&self, id: &str) -> Result<&LayerParams> {
        self.get(id)
            .ok_or_else(|| Error::Config(format!("no layer named {id} in the registry")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::learnable_count).sum()
    }

    pub fn clear_grads(&mut self) {
        for layer in &mut self.layers {
            for (_, t) in layer.learnables_mut() {
                t.clear_grad();
            }
        }
    }

    /// Copies gradients recorded by a finished session into the grad slots.
    /// Layers the session never touched keep an empty slot.
    pub fn load_grads(&mut self, grads: Vec<ParamGrad>) -> Result<()> {
        for pg in grads {
            let layer = self
                .get_mut(&pg.layer)
                .ok_or_else(|| Error::Config(format!("gradient for unknown layer {}", pg.layer)))?;
            if let Some((_, t)) = layer.learnables_mut().into_iter().find(|(s, _)| *s == pg.slot) {
                t.set_grad(pg.grad)?;
            }
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics into running stats.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (id, st) in stats {
            let bn = self
                .get_mut(id)
                .and_then(|l| l.bn.as_mut())
                .ok_or_else(|| Error::Config(format!("batch statistics for {id}, which has no batch norm")))?;
            for (r, b) in bn.running_mean.iter_mut().zip(&st.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in bn.running_var.iter_mut().zip(&st.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }
}

/// Graph handles of one bound layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub scale: Option<Var>,
    pub shift: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub layer: String,
    pub slot: Slot,
    pub grad: Vec<f64>,
}

/// One forward (and optional backward) pass over a parameter registry.
///
/// Parameters are bound onto the graph lazily, the first time a block asks
/// for them. In training mode, batch-norm statistics are collected and can be
/// folded into the running averages once the session ends.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    training: bool,
    eps: f64,
    bound: HashMap<String, BoundLayer>,
    order: Vec<String>,
    stats: Vec<(String, BatchStats)>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, training: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            training,
            eps: BN_EPS,
            bound: HashMap::new(),
            order: Vec::new(),
            stats: Vec::new(),
        }
    }

    /// Continues recording on an existing graph.
    pub fn with_graph(store: &'p ParamStore, training: bool, graph: Graph) -> Self {
        Session {
            graph,
            ..Session::new(store, training)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn bind(&mut self, id: &str) -> Result<BoundLayer> {
        if let Some(b) = self.bound.get(id) {
            return Ok(*b);
        }
        let layer = self.store.layer(id)?;
        let g = &mut self.graph;
        let bound = BoundLayer {
            weight: g.leaf(layer.weight.clone()),
            bias: layer.bias.as_ref().map(|b| g.leaf(b.clone())),
            scale: layer.bn.as_ref().map(|bn| g.leaf(bn.scale.clone())),
            shift: layer.bn.as_ref().map(|bn| g.leaf(bn.shift.clone())),
        };
        self.bound.insert(id.to_owned(), bound);
        self.order.push(id.to_owned());
        Ok(bound)
    }

    /// Uses caller-supplied graph values for layer `id` instead of leaves
    /// copied from the store. Slots must match the stored layer.
    pub fn bind_external(&mut self, id: &str, bound: BoundLayer) -> Result<()> {
        let layer = self.store.layer(id)?;
        let has_bn = layer.bn.is_some();
        if self.bound.contains_key(id)
            || bound.bias.is_some() != layer.bias.is_some()
            || bound.scale.is_some() != has_bn
            || bound.shift.is_some() != has_bn
        {
            return Err(Error::Usage(format!("cannot bind external values for layer {id}")));
        }
        self.bound.insert(id.to_owned(), bound);
        self.order.push(id.to_owned());
        Ok(())
    }

    /// Convolution plus bias (if the layer has one).
    pub fn conv(&mut self, x: Var, id: &str, geom: ConvGeometry) -> Result<Var> {
        let b = self.bind(id)?;
        self.graph.conv2d(x, b.weight, b.bias, geom)
    }

    pub fn deconv(&mut self, x: Var, id: &str, stride: usize, padding: usize) -> Result<Var> {
        let b = self.bind(id)?;
        self.graph.conv_transpose2d(x, b.weight, b.bias, stride, padding)
    }

    /// The batch norm attached to layer `id`.
    pub fn bn(&mut self, x: Var, id: &str) -> Result<Var> {
        let b = self.bind(id)?;
        let (Some(scale), Some(shift)) = (b.scale, b.shift) else {
            return Err(Error::Config(format!("layer {id} has no batch norm")));
        };
        let (y, stats) = if self.training {
            self.graph.batch_norm(x, scale, shift, BatchNormMode::Train { eps: self.eps })?
        } else {
            let bn = self.store.layer(id)?.bn.as_ref().expect("bound scale implies bn");
            let mode = BatchNormMode::Eval {
                mean: &bn.running_mean,
                var: &bn.running_var,
                eps: self.eps,
            };
            self.graph.batch_norm(x, scale, shift, mode)?
        };
        if let Some(stats) = stats {
            self.stats.push((id.to_owned(), stats));
        }
        Ok(y)
    }

    /// Convolution followed by the layer's batch norm.
    pub fn conv_bn(&mut self, x: Var, id: &str, geom: ConvGeometry) -> Result<Var> {
        let y = self.conv(x, id, geom)?;
        self.bn(y, id)
    }

    pub fn conv_bn_relu(&mut self, x: Var, id: &str, geom: ConvGeometry) -> Result<Var> {
        let y = self.conv_bn(x, id, geom)?;
        self.graph.relu(y)
    }

    /// Ids of the layers bound so far, in binding order.
    pub fn bound_layers(&self) -> &[String] {
        &self.order
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    /// Gradients of every bound learnable after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<ParamGrad> {
        let mut out = Vec::new();
        for id in &self.order {
            let b = self.bound[id];
            let slots = [
                (Slot::Weight, Some(b.weight)),
                (Slot::Bias, b.bias),
                (Slot::BnScale, b.scale),
                (Slot::BnShift, b.shift),
            ];
            for (slot, var) in slots {
                if let Some(g) = var.and_then(|v| self.graph.grad(v)) {
                    out.push(ParamGrad {
                        layer: id.clone(),
                        slot,
                        grad: g.to_vec(),
                    });
                }
            }
        }
        out
    }
}
