use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sernet_core::blocks::{abg_forward, Abm, Afn, Bottleneck, Dbn, PointwiseBridge};
use sernet_core::gradsuite::{block_checks, OP_TOLERANCE};
use sernet_core::params::{LayerDecl, ParamStore, Session};
use sernet_core::tensor::{BatchNormMode, ConvGeometry, Graph, Shape, Tensor, Var};

fn randn(shape: Shape, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Store with random biases and batch-norm affine parameters.
fn store(decls: &[LayerDecl], seed: u64) -> ParamStore {
    let mut s = ParamStore::from_decls(decls, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for l in s.iter_mut() {
        if let Some(b) = &mut l.bias {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        if let Some(bn) = &mut l.bn {
            bn.scale.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.shift.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    s
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Plain graph handles for a stored layer, bypassing the session.
struct Raw {
    w: Var,
    b: Option<Var>,
    scale: Option<Var>,
    shift: Option<Var>,
}

fn raw(g: &mut Graph, s: &ParamStore, id: &str) -> Raw {
    let l = s.get(id).unwrap();
    Raw {
        w: g.constant(l.weight.clone()),
        b: l.bias.as_ref().map(|b| g.constant(b.clone())),
        scale: l.bn.as_ref().map(|bn| g.constant(bn.scale.clone())),
        shift: l.bn.as_ref().map(|bn| g.constant(bn.shift.clone())),
    }
}

fn raw_conv_bn(g: &mut Graph, s: &ParamStore, id: &str, x: Var, geom: ConvGeometry) -> Var {
    let r = raw(g, s, id);
    let y = g.conv2d(x, r.w, r.b, geom).unwrap();
    match (r.scale, r.shift) {
        (Some(sc), Some(sh)) => g.batch_norm(y, sc, sh, BatchNormMode::Train { eps: 1e-5 }).unwrap().0,
        _ => y,
    }
}

#[test]
fn abg_equals_sigmoid_times_input_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let shape = Shape::new(rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let x = Tensor::randn(shape, 4.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = abg_forward(&mut g, xv).unwrap();
        let s = g.sigmoid(xv).unwrap();
        let m = g.mul(s, xv).unwrap();
        assert_eq!(g.shape(y), shape, "case {i}");
        assert_eq!(g.value(y).data(), g.value(m).data(), "case {i}");
    }
}

#[test]
fn abg_hand_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 2.0, -2.0]).unwrap());
    let y = abg_forward(&mut g, x).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 2.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    assert!((d[1] - 1.761594).abs() < 1e-6);
    assert!((d[2] + 0.238406).abs() < 1e-6);
}

#[test]
fn abm_matches_composition_and_keeps_trunk_shape() {
    let abm = Abm::new("abm", 4, 3);
    let s = store(&abm.decls(), 2);
    let trunk = randn(Shape::new(2, 3, 6, 6), 3);
    let gate = randn(Shape::new(2, 4, 3, 3), 4);

    let mut sess = Session::new(&s, true);
    let t = sess.graph.constant(trunk.clone());
    let gsrc = sess.graph.constant(gate.clone());
    let y = abm.forward(&mut sess, t, gsrc).unwrap();
    assert_eq!(sess.graph.shape(y), trunk.shape());

    let mut g = Graph::new();
    let t = g.constant(trunk);
    let gsrc = g.constant(gate);
    let sig = g.sigmoid(gsrc).unwrap();
    let gated = g.mul(sig, gsrc).unwrap();
    let mapped = raw_conv_bn(&mut g, &s, "abm.adapter", gated, ConvGeometry::default());
    let up = g.resize_bilinear(mapped, 6, 6).unwrap();
    let want = g.add(t, up).unwrap();
    assert_eq!(sess.graph.value(y).data(), g.value(want).data());
}

#[test]
fn bottleneck_matches_composition() {
    for (cin, out, stride) in [(4, 4, 1), (3, 5, 2)] {
        let b = Bottleneck::new("b", cin, 2, out, stride).unwrap();
        assert_eq!(b.has_projection(), stride != 1 || cin != out);
        let s = store(&b.decls(), 5);
        let x = randn(Shape::new(2, cin, 6, 6), 6);

        let mut sess = Session::new(&s, true);
        let xv = sess.graph.constant(x.clone());
        let o = b.forward(&mut sess, xv).unwrap();

        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = raw_conv_bn(&mut g, &s, "b.conv1", xv, ConvGeometry::default());
        let a = g.relu(a).unwrap();
        let c = raw_conv_bn(&mut g, &s, "b.conv2", a, ConvGeometry::new(stride, 1));
        let c = g.relu(c).unwrap();
        let gate = raw_conv_bn(&mut g, &s, "b.conv3", c, ConvGeometry::default());
        let short = if b.has_projection() {
            raw_conv_bn(&mut g, &s, "b.proj", xv, ConvGeometry::new(stride, 0))
        } else {
            xv
        };
        let sum = g.add(gate, short).unwrap();
        let want = g.relu(sum).unwrap();
        assert_eq!(sess.graph.value(o.out).data(), g.value(want).data());
        assert_eq!(sess.graph.value(o.gate).data(), g.value(gate).data());
        assert_eq!(sess.graph.shape(o.out), Shape::new(2, out, 6 / stride, 6 / stride));
    }
}

#[test]
fn dbn_matches_three_dilated_convs_add_and_projection() {
    let dbn = Dbn::new("dbn", 3, 2);
    assert_eq!(dbn.dilations, vec![12, 16, 18]);
    let s = store(&dbn.decls(), 7);
    let x = randn(Shape::new(2, 3, 26, 27), 8);

    let mut sess = Session::new(&s, true);
    let xv = sess.graph.constant(x.clone());
    let y = dbn.forward(&mut sess, xv).unwrap();
    assert_eq!(sess.graph.shape(y), Shape::new(2, 2, 26, 27));

    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut acc = None;
    for (i, d) in [12, 16, 18].into_iter().enumerate() {
        let b = raw_conv_bn(&mut g, &s, &format!("dbn.branch{i}"), xv, ConvGeometry::dilated(d, d).with_groups(3));
        let b = g.relu(b).unwrap();
        acc = Some(match acc {
            None => b,
            Some(a) => g.add(a, b).unwrap(),
        });
    }
    let want = raw_conv_bn(&mut g, &s, "dbn.proj", acc.unwrap(), ConvGeometry::default());
    assert_close(sess.graph.value(y).data(), g.value(want).data(), 1e-12);
}

#[test]
fn dbn_keeps_spatial_size_even_below_full_support() {
    let dbn = Dbn::new("dbn", 2, 3);
    let s = store(&dbn.decls(), 9);
    for (h, w) in [(25, 25), (31, 40), (4, 6), (1, 1)] {
        let mut sess = Session::new(&s, true);
        let x = sess.graph.constant(randn(Shape::new(2, 2, h, w), 10));
        let y = dbn.forward(&mut sess, x).unwrap();
        assert_eq!(sess.graph.shape(y), Shape::new(2, 3, h, w));
    }
}

#[test]
fn dbn_branches_and_projection_count() {
    let dbn = Dbn::new("dbn", 8, 4);
    let total: usize = dbn.decls().iter().map(LayerDecl::learnable_count).sum();
    // three depthwise 3x3 with BN, then 8 -> 4 pointwise with bias
    assert_eq!(total, 3 * (8 * 9 + 2 * 8) + (8 * 4 + 4));
}

#[test]
fn afn_zero_skip_reduces_to_conv_chain() {
    let afn = Afn::new("afn", 3, 4, 2);
    let mut s = store(&afn.decls(), 11);
    // a zero skip only stays zero through the projection if its BN shift is 0
    let proj = s.get_mut("afn.proj").unwrap().bn.as_mut().unwrap();
    proj.shift.data_mut().fill(0.0);
    let dec = randn(Shape::new(2, 3, 6, 6), 12);
    let skip = Tensor::zeros(Shape::new(2, 4, 6, 6));

    let mut sess = Session::new(&s, false);
    let d = sess.graph.constant(dec.clone());
    let e = sess.graph.constant(skip);
    let y = afn.forward(&mut sess, d, e).unwrap();

    let mut chain = Session::new(&s, false);
    let mut h = chain.graph.constant(dec);
    for i in 0..2 {
        h = chain.conv_bn_relu(h, &afn.fuse_id(i), ConvGeometry::new(1, 1)).unwrap();
    }
    assert_close(sess.graph.value(y).data(), chain.graph.value(h).data(), 1e-12);
}

#[test]
fn afn_saturated_gate_adds_the_projected_skip() {
    let afn = Afn::new("afn", 3, 4, 0);
    let mut s = store(&afn.decls(), 13);
    s.get_mut("afn.gate").unwrap().bias.as_mut().unwrap().data_mut().fill(60.0);
    let dec = randn(Shape::new(1, 3, 4, 4), 14);
    let skip = Tensor::uniform(Shape::new(1, 4, 2, 2), -0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(15));

    let mut sess = Session::new(&s, true);
    let d = sess.graph.constant(dec);
    let e = sess.graph.constant(skip);
    let projected = afn.project_skip(&mut sess, d, e).unwrap();
    let y = afn.forward(&mut sess, d, e).unwrap();
    let plain = sess.graph.add(d, projected).unwrap();
    assert_close(sess.graph.value(y).data(), sess.graph.value(plain).data(), 1e-12);
}

#[test]
fn afn_matches_composition() {
    let afn = Afn::new("afn", 3, 4, 2);
    let s = store(&afn.decls(), 16);
    let dec = randn(Shape::new(2, 3, 6, 6), 17);
    let skip = randn(Shape::new(2, 4, 3, 3), 18);

    let mut sess = Session::new(&s, true);
    let d = sess.graph.constant(dec.clone());
    let e = sess.graph.constant(skip.clone());
    let y = afn.forward(&mut sess, d, e).unwrap();
    assert_eq!(sess.graph.shape(y), dec.shape());

    let mut g = Graph::new();
    let d = g.constant(dec);
    let e = g.constant(skip);
    let p = raw_conv_bn(&mut g, &s, "afn.proj", e, ConvGeometry::default());
    let p = g.resize_bilinear(p, 6, 6).unwrap();
    let gl = raw_conv_bn(&mut g, &s, "afn.gate", p, ConvGeometry::default());
    let gs = g.sigmoid(gl).unwrap();
    let gated = g.mul(gs, p).unwrap();
    let mut h = g.add(d, gated).unwrap();
    for i in 0..2 {
        h = raw_conv_bn(&mut g, &s, &format!("afn.fuse{i}"), h, ConvGeometry::new(1, 1));
        h = g.relu(h).unwrap();
    }
    assert_close(sess.graph.value(y).data(), g.value(h).data(), 1e-12);
}

#[test]
fn channel_mismatch_is_reported() {
    let afn = Afn::new("afn", 3, 4, 1);
    let s = store(&afn.decls(), 19);
    let mut sess = Session::new(&s, true);
    let d = sess.graph.constant(randn(Shape::new(1, 3, 4, 4), 1));
    let e = sess.graph.constant(randn(Shape::new(1, 5, 4, 4), 2));
    assert!(afn.forward(&mut sess, d, e).is_err());
}

#[test]
fn pointwise_bridge_shares_the_dbn_interface() {
    let bridge = PointwiseBridge::new("bridge", 6, 4);
    let s = store(&bridge.decls(), 20);
    let mut sess = Session::new(&s, true);
    let x = sess.graph.constant(randn(Shape::new(2, 6, 3, 5), 21));
    let y = bridge.forward(&mut sess, x).unwrap();
    assert_eq!(sess.graph.shape(y), Shape::new(2, 4, 3, 5));
}

#[test]
fn every_block_passes_finite_difference_checks() {
    for c in block_checks(3).unwrap() {
        assert!(c.max_rel_err <= OP_TOLERANCE, "{} relative error {:e}", c.name, c.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn abg_preserves_sign_and_shrinks(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = v.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, n), v.clone()).unwrap());
        let y = abg_forward(&mut g, x).unwrap();
        for (a, b) in v.iter().zip(g.value(y).data()) {
            prop_assert!(a.signum() == b.signum() || *b == 0.0);
            prop_assert!(b.abs() <= a.abs());
        }
    }

    #[test]
    fn block_output_shapes(n in 1usize..3, cin in 1usize..5, cout in 1usize..5, h in 2usize..9, w in 2usize..9, stride2 in any::<bool>(), seed in any::<u64>()) {
        let stride = if stride2 { 2 } else { 1 };
        let b = Bottleneck::new("b", cin, 2, cout, stride).unwrap();
        let afn = Afn::new("afn", cout, cin, 1);
        let abm = Abm::new("abm", cin, cout);
        let mut decls = b.decls();
        decls.extend(afn.decls());
        decls.extend(abm.decls());
        let s = store(&decls, seed);
        let mut sess = Session::new(&s, true);
        let x = sess.graph.constant(randn(Shape::new(n, cin, h, w), seed));
        let o = b.forward(&mut sess, x).unwrap();
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        prop_assert_eq!(sess.graph.shape(o.out), Shape::new(n, cout, oh, ow));
        let f = afn.forward(&mut sess, o.out, x).unwrap();
        prop_assert_eq!(sess.graph.shape(f), Shape::new(n, cout, oh, ow));
        let m = abm.forward(&mut sess, o.out, x).unwrap();
        prop_assert_eq!(sess.graph.shape(m), Shape::new(n, cout, oh, ow));
    }
}
