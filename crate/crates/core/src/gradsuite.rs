//! Finite-difference gradient suite over every differentiable op, every
//! block, and a micro-width end-to-end model.
//!
//! Each check reduces its output to a scalar with a fixed random projection
//! and compares analytic and central-difference gradients for all inputs,
//! block parameters included.

use rand::Rng;

use crate::blocks::{abg_forward, Abm, Afn, Bottleneck, Dbn, PointwiseBridge};
use crate::error::Result;
use crate::model::{Layout, Model, ModelConfig};
use crate::params::{BoundLayer, LayerDecl, ParamStore, Session};
use crate::seed::rng_for;
use crate::tensor::{finite_diff_check_many, BatchNormMode, ConvGeometry, Coordinates, Graph, Shape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Tolerance and central-difference step of one kind of check.
#[derive(Clone, Copy)]
struct Tier {
    tolerance: f64,
    eps: f64,
}

const OPS: Tier = Tier {
    tolerance: OP_TOLERANCE,
    eps: 1e-6,
};

/// Perturbations in early layers are amplified by every batch norm on the
/// tiny deep feature maps; a smaller step keeps them away from ReLU kinks.
const MODEL: Tier = Tier {
    tolerance: MODEL_TOLERANCE,
    eps: 1e-7,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn randn(shape: Shape, seed: u64, tag: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_for(seed, tag))
}

/// `sum(y * r)` for a fixed random `r` of the same shape.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.shape(y), seed, "gradsuite.projection"));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(name: &str, inputs: &[Tensor], coords: Coordinates, tier: Tier, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let max_rel_err = finite_diff_check_many(f, inputs, tier.eps, coords)?;
    log::debug!("gradcheck {name}: {max_rel_err:.3e}");
    Ok(CheckOutcome {
        name: name.to_owned(),
        max_rel_err,
        tolerance: tier.tolerance,
    })
}

fn op<F>(name: &str, inputs: Vec<Tensor>, seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(name, &inputs, Coordinates::All, OPS, |g, v| {
        let y = f(g, v)?;
        project(g, y, seed)
    })
}

/// One check per differentiable tensor op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let x = |s: Shape, tag: &str| randn(s, seed, tag);
    let s = Shape::new(2, 4, 5, 6);
    let cs = Shape::new(1, 4, 1, 1);
    let mut out = vec![
        op("conv2d", vec![x(Shape::new(2, 3, 6, 5), "x"), x(Shape::new(4, 3, 3, 3), "w"), x(Shape::new(1, 4, 1, 1), "b")], seed, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1))
        })?,
        op("conv2d_dilated", vec![x(Shape::new(2, 2, 6, 6), "x"), x(Shape::new(3, 2, 3, 3), "w")], seed, |g, v| {
            g.conv2d(v[0], v[1], None, ConvGeometry::dilated(2, 2))
        })?,
        op("conv2d_grouped", vec![x(Shape::new(2, 4, 5, 5), "x"), x(Shape::new(4, 1, 3, 3), "w")], seed, |g, v| {
            g.conv2d(v[0], v[1], None, ConvGeometry::dilated(3, 3).with_groups(4))
        })?,
        op("conv_transpose2d", vec![x(Shape::new(2, 3, 3, 4), "x"), x(Shape::new(3, 2, 3, 3), "w"), x(Shape::new(1, 2, 1, 1), "b")], seed, |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
        })?,
        op("conv_transpose2d_s4", vec![x(Shape::new(1, 2, 2, 2), "x"), x(Shape::new(2, 3, 4, 4), "w")], seed, |g, v| {
            g.conv_transpose2d(v[0], v[1], None, 4, 0)
        })?,
        op("batch_norm_train", vec![x(s, "x"), x(cs, "scale"), x(cs, "shift")], seed, |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?.0)
        })?,
    ];
    let (mean, var) = (vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 1.0, 2.0, 0.25]);
    out.push(op("batch_norm_eval", vec![x(s, "x"), x(cs, "scale"), x(cs, "shift")], seed, |g, v| {
        let mode = BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
        Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
    })?);
    // keep relu inputs away from the kink
    let mut rx = x(s, "relu");
    for v in rx.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    out.push(op("relu", vec![rx], seed, |g, v| g.relu(v[0]))?);
    out.push(op("sigmoid", vec![x(s, "x")], seed, |g, v| g.sigmoid(v[0]))?);
    out.push(op("add", vec![x(s, "a"), x(s, "b")], seed, |g, v| g.add(v[0], v[1]))?);
    out.push(op("mul", vec![x(s, "a"), x(s, "b")], seed, |g, v| g.mul(v[0], v[1]))?);
    out.push(op("concat_channels", vec![x(s, "a"), x(s.with_channels(2), "b")], seed, |g, v| {
        g.concat_channels(&[v[0], v[1]])
    })?);
    out.push(op("slice_channels", vec![x(s, "x")], seed, |g, v| g.slice_channels(v[0], 1, 2))?);
    out.push(op("resize_bilinear_up", vec![x(Shape::new(2, 2, 3, 4), "x")], seed, |g, v| {
        g.resize_bilinear(v[0], 6, 6)
    })?);
    out.push(op("resize_bilinear_down", vec![x(s, "x")], seed, |g, v| g.resize_bilinear(v[0], 2, 3))?);
    out.push(op("sum", vec![x(s, "x")], seed, |g, v| g.sum(v[0]))?);
    let mut lr = rng_for(seed, "gradsuite.labels");
    let labels: Vec<u8> = (0..2 * 5 * 6)
        .map(|_| if lr.random_bool(0.1) { 255 } else { lr.random_range(0..4) })
        .collect();
    out.push(check(
        "weighted_cross_entropy",
        &[x(s, "logits")],
        Coordinates::All,
        OPS,
        |g, v| g.weighted_cross_entropy(v[0], &labels, &[0.5, 1.0, 2.0, 1.5], Some(255)),
    )?);
    Ok(out)
}

/// Parameters of a store with batch norm and biases moved off their
/// identity initialization, so every slot has a nontrivial gradient.
fn perturbed_store(decls: &[LayerDecl], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::from_decls(decls, seed)?;
    let mut rng = rng_for(seed, "gradsuite.perturb");
    for layer in store.iter_mut() {
        if let Some(b) = &mut layer.bias {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        if let Some(bn) = &mut layer.bn {
            bn.scale.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.shift.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            bn.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
    Ok(store)
}

/// Differentiates a session-level forward with respect to its activations
/// and every parameter of `store`.
#[allow(clippy::too_many_arguments)]
fn check_session<F>(
    name: &str,
    store: &ParamStore,
    activations: Vec<Tensor>,
    training: bool,
    coords: Coordinates,
    tier: Tier,
    reduce: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    forward: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let na = activations.len();
    let mut inputs = activations;
    let mut slots = Vec::new();
    for layer in store.iter() {
        slots.push((layer.id.clone(), layer.bias.is_some(), layer.bn.is_some()));
        inputs.extend(layer.learnables().into_iter().map(|(_, t)| t.clone()));
    }
    check(name, &inputs, coords, tier, |g, v| {
        let graph = std::mem::take(g);
        let mut s = Session::with_graph(store, training, graph);
        let mut k = na;
        let mut next = || {
            k += 1;
            v[k - 1]
        };
        for (id, bias, bn) in &slots {
            let bound = BoundLayer {
                weight: next(),
                bias: bias.then(&mut next),
                scale: bn.then(&mut next),
                shift: bn.then(&mut next),
            };
            s.bind_external(id, bound)?;
        }
        let y = forward(&mut s, &v[..na]);
        *g = s.into_graph();
        reduce(g, y?)
    })
}

fn block<F>(name: &str, decls: Vec<LayerDecl>, activations: Vec<Tensor>, training: bool, seed: u64, forward: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let store = perturbed_store(&decls, seed)?;
    let reduce = |g: &mut Graph, y: Var| project(g, y, seed);
    check_session(name, &store, activations, training, Coordinates::All, OPS, &reduce, forward)
}

/// One check per block, parameters included.
pub fn block_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let x = |s: Shape, tag: &str| randn(s, seed, tag);
    let mut out = vec![op("abg", vec![x(Shape::new(2, 3, 4, 5), "x")], seed, |g, v| abg_forward(g, v[0]))?];

    let abm = Abm::new("abm", 4, 3);
    out.push(block(
        "abm",
        abm.decls(),
        vec![x(Shape::new(2, 3, 6, 6), "trunk"), x(Shape::new(2, 4, 3, 3), "gate")],
        true,
        seed,
        |s, v| abm.forward(s, v[0], v[1]),
    )?);

    let same = Bottleneck::new("b", 4, 2, 4, 1)?;
    out.push(block("bottleneck", same.decls(), vec![x(Shape::new(2, 4, 5, 5), "x")], true, seed, |s, v| {
        Ok(same.forward(s, v[0])?.out)
    })?);
    let down = Bottleneck::new("b", 3, 2, 4, 2)?;
    out.push(block("bottleneck_stride2", down.decls(), vec![x(Shape::new(2, 3, 6, 6), "x")], true, seed, |s, v| {
        Ok(down.forward(s, v[0])?.out)
    })?);
    out.push(block("bottleneck_eval", down.decls(), vec![x(Shape::new(2, 3, 6, 6), "x")], false, seed, |s, v| {
        Ok(down.forward(s, v[0])?.out)
    })?);

    let dbn = Dbn::new("dbn", 3, 2);
    out.push(block("dbn", dbn.decls(), vec![x(Shape::new(2, 3, 6, 6), "x")], true, seed, |s, v| dbn.forward(s, v[0]))?);
    let near = Dbn {
        dilations: vec![1, 2, 3],
        ..Dbn::new("dbn", 3, 2)
    };
    out.push(block("dbn_small_dilations", near.decls(), vec![x(Shape::new(2, 3, 6, 6), "x")], true, seed, |s, v| {
        near.forward(s, v[0])
    })?);

    let bridge = PointwiseBridge::new("bridge", 3, 2);
    out.push(block("pointwise_bridge", bridge.decls(), vec![x(Shape::new(2, 3, 4, 4), "x")], true, seed, |s, v| {
        bridge.forward(s, v[0])
    })?);

    let afn = Afn::new("afn", 3, 4, 2);
    out.push(block(
        "afn",
        afn.decls(),
        vec![x(Shape::new(2, 3, 6, 6), "dec"), x(Shape::new(2, 4, 3, 3), "skip")],
        true,
        seed,
        |s, v| afn.forward(s, v[0], v[1]),
    )?);
    Ok(out)
}

/// Smallest full network: every toggle on, 1/32 width, 3 classes.
pub fn micro_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        width_mult: 1.0 / 32.0,
        input_hw: (32, 32),
        seed,
        ..ModelConfig::default()
    }
}

/// Finite differences straddling a ReLU kink disagree with the one-sided
/// analytic gradient, so the image is redrawn until every ReLU input clears
/// this margin.
const KINK_MARGIN: f64 = 1e-4;
const IMAGE_DRAWS: usize = 64;

fn kink_free_image(model: &Model, store: &ParamStore, shape: Shape, seed: u64) -> Result<Tensor> {
    let mut best = (0.0, None);
    for draw in 0..IMAGE_DRAWS {
        let image = randn(shape, seed, &format!("gradsuite.image{draw}"));
        let mut s = Session::new(store, true);
        let x = s.graph.constant(image.clone());
        model.forward_session(&mut s, x)?;
        let margin = s.graph.relu_margin().unwrap_or(f64::INFINITY);
        if margin >= KINK_MARGIN {
            return Ok(image);
        }
        if margin >= best.0 {
            best = (margin, Some(image));
        }
    }
    log::warn!("no image within {IMAGE_DRAWS} draws keeps ReLU inputs {KINK_MARGIN} from the kink");
    Ok(best.1.expect("at least one draw"))
}

/// End-to-end check of the micro model under the weighted cross-entropy,
/// sampling `per_input` coordinates of the image and of every parameter.
pub fn model_check(seed: u64, per_input: usize) -> Result<CheckOutcome> {
    let config = micro_config(seed);
    let layout = Layout::new(&config)?;
    let model = Model::build(&config)?;
    let store = perturbed_store(&layout.decls(), seed)?;
    let (h, w) = config.input_hw;
    let image = kink_free_image(&model, &store, Shape::new(2, 3, h, w), seed)?;
    let mut lr = rng_for(seed, "gradsuite.model_labels");
    let labels: Vec<u8> = (0..2 * h * w).map(|_| lr.random_range(0..3)).collect();
    let weights = [0.7, 1.0, 1.6];
    let reduce = |g: &mut Graph, y: Var| g.weighted_cross_entropy(y, &labels, &weights, None);
    check_session(
        "model_micro",
        &store,
        vec![image],
        true,
        Coordinates::Sample { per_input, seed },
        MODEL,
        &reduce,
        |s, v| model.forward_session(s, v[0]),
    )
}

/// Ops, blocks and the micro model.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = op_checks(seed)?;
    out.extend(block_checks(seed)?);
    out.push(model_check(seed, 2)?);
    Ok(out)
}
