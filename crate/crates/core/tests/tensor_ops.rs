use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sernet_core::tensor::{
    finite_diff_check, finite_diff_check_many, BatchNormMode, ConvGeometry, Coordinates, Graph, Shape,
    Tensor,
};
use sernet_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: Shape, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// Direct seven-loop convolution, no patch matrices.
fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
    let ow = (xs.w + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
    let cg_in = xs.c / g.groups;
    let cg_out = ws.n / g.groups;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            let grp = o / cg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cg_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, grp * cg_in + ci, iy as usize, ix as usize) * w.at(o, ci, ky, kx);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Transposed convolution by explicit scatter of every input pixel.
fn deconv_oracle(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h - 1) * stride + k - 2 * padding;
    let ow = (xs.w - 1) * stride + k - 2 * padding;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, oh, ow));
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    for co in 0..ws.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - padding as isize;
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let (oy, ox) = (oy as usize, ox as usize);
                                let v = out.at(n, co, oy, ox) + x.at(n, ci, iy, ix) * w.at(ci, co, ky, kx);
                                out.set(n, co, oy, ox, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear sampling written as a sum of tent-weighted input pixels.
fn bilinear_oracle(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let src = |o: usize, inp: usize, out: usize| {
        let v = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
        v.max(0.0).min((inp - 1) as f64)
    };
    let mut out = Tensor::zeros(s.with_spatial(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let (sy, sx) = (src(oy, s.h, out_h), src(ox, s.w, out_w));
                    let mut acc = 0.0;
                    for iy in 0..s.h {
                        for ix in 0..s.w {
                            let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                            let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                            acc += wy * wx * x.at(n, c, iy, ix);
                        }
                    }
                    out.set(n, c, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_output_sizes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
    let w = g.constant(Tensor::zeros(Shape::new(4, 3, 3, 3)));
    let same = g.conv2d(x, w, None, ConvGeometry::new(1, 1)).unwrap();
    assert_eq!(g.shape(same), Shape::new(1, 4, 8, 8));
    let dil = g.conv2d(x, w, None, ConvGeometry::dilated(12, 12)).unwrap();
    assert_eq!(g.shape(dil), Shape::new(1, 4, 8, 8));
}

#[test]
fn conv2d_all_ones_window_sums_to_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 1, 5, 5)));
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let y = g.conv2d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 3, 3));
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_rejects_bad_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(2, 2, 3, 3)));
    assert!(matches!(g.conv2d(x, w, None, ConvGeometry::default()), Err(Error::Shape { .. })));
    let w = g.constant(Tensor::zeros(Shape::new(2, 3, 3, 3)));
    let err = g.conv2d(x, w, None, ConvGeometry::dilated(3, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let grouped = ConvGeometry::default().with_groups(2);
    assert!(matches!(g.conv2d(x, w, None, grouped), Err(Error::Shape { .. })));
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(1);
    let cases = [
        (Shape::new(2, 4, 7, 6), Shape::new(6, 2, 3, 3), ConvGeometry { stride: 2, padding: 1, dilation: 1, groups: 2 }),
        (Shape::new(1, 3, 9, 9), Shape::new(3, 1, 3, 3), ConvGeometry { stride: 1, padding: 2, dilation: 2, groups: 3 }),
        (Shape::new(1, 2, 5, 5), Shape::new(4, 2, 1, 1), ConvGeometry::default()),
        (Shape::new(1, 3, 8, 8), Shape::new(2, 3, 7, 7), ConvGeometry::new(2, 3)),
    ];
    for (xs, ws, geom) in cases {
        let x = Tensor::randn(xs, 1.0, &mut r);
        let w = Tensor::randn(ws, 1.0, &mut r);
        let b = Tensor::randn(Shape::new(1, ws.n, 1, 1), 1.0, &mut r);
        let want = conv_oracle(&x, &w, Some(&b), geom);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
        assert_eq!(g.shape(y), want.shape());
        assert_close(g.value(y).data(), want.data(), 1e-12);
    }
}

#[test]
fn separable_conv_equals_factored_full_conv() {
    // depthwise (groups = C) followed by 1x1 equals one dense conv whose
    // kernel is the outer product of the pointwise and depthwise weights.
    let mut r = rng(2);
    let (c, co) = (3, 4);
    let x = Tensor::randn(Shape::new(2, c, 6, 6), 1.0, &mut r);
    let dw = Tensor::randn(Shape::new(c, 1, 3, 3), 1.0, &mut r);
    let pw = Tensor::randn(Shape::new(co, c, 1, 1), 1.0, &mut r);
    let geom = ConvGeometry::dilated(2, 2).with_groups(c);
    let mut full = Tensor::zeros(Shape::new(co, c, 3, 3));
    for o in 0..co {
        for ci in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    full.set(o, ci, ky, kx, pw.at(o, ci, 0, 0) * dw.at(ci, 0, ky, kx));
                }
            }
        }
    }
    let mut g = Graph::new();
    let (xv, dv, pv, fv) = (g.constant(x.clone()), g.constant(dw.clone()), g.constant(pw.clone()), g.constant(full));
    let d = g.conv2d(xv, dv, None, geom).unwrap();
    let sep = g.conv2d(d, pv, None, ConvGeometry::default()).unwrap();
    let dense = g.conv2d(xv, fv, None, ConvGeometry::dilated(2, 2)).unwrap();
    assert_close(g.value(sep).data(), g.value(dense).data(), 1e-12);

    let err = finite_diff_check_many(
        |g, v| {
            let d = g.conv2d(v[0], v[1], None, geom)?;
            let s = g.conv2d(d, v[2], None, ConvGeometry::default())?;
            let s = g.sigmoid(s)?;
            g.sum(s)
        },
        &[x, dw, pw],
        1e-5,
        Coordinates::All,
    )
    .unwrap();
    assert!(err <= 1e-4, "separable gradient error {err}");
}

#[test]
fn conv_transpose2d_sizes_and_tiling() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 16, 16)));
    let w4 = g.constant(Tensor::zeros(Shape::new(2, 3, 4, 4)));
    let up = g.conv_transpose2d(x, w4, None, 4, 0).unwrap();
    assert_eq!(g.shape(up), Shape::new(1, 3, 64, 64));
    let w3 = g.constant(Tensor::zeros(Shape::new(2, 3, 3, 3)));
    let same = g.conv_transpose2d(x, w3, None, 1, 1).unwrap();
    assert_eq!(g.shape(same), Shape::new(1, 3, 16, 16));

    let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
    let want = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &want);

    let w = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(g.conv_transpose2d(x, w, None, 1, 2), Err(Error::Config(_))));
}

#[test]
fn conv_transpose2d_matches_scatter_oracle() {
    let mut r = rng(3);
    for (xs, ws, s, p) in [
        (Shape::new(2, 3, 3, 4), Shape::new(3, 2, 3, 3), 2, 1),
        (Shape::new(1, 2, 2, 2), Shape::new(2, 3, 4, 4), 4, 0),
        (Shape::new(1, 2, 5, 5), Shape::new(2, 2, 3, 3), 1, 1),
    ] {
        let x = Tensor::randn(xs, 1.0, &mut r);
        let w = Tensor::randn(ws, 1.0, &mut r);
        let want = deconv_oracle(&x, &w, s, p);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv_transpose2d(xv, wv, None, s, p).unwrap();
        assert_close(g.value(y).data(), want.data(), 1e-12);
    }
}

#[test]
fn batch_norm_training_normalizes() {
    let mut r = rng(4);
    let x = Tensor::uniform(Shape::new(3, 2, 4, 5), -20.0, 30.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let sc = g.constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let sh = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let (y, stats) = g.batch_norm(xv, sc, sh, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    assert!(stats.is_some());
    let yv = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..4).flat_map(move |h| (0..5).map(move |w| (n, h, w))))
            .map(|(n, h, w)| yv.at(n, c, h, w))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-9, "mean {m}");
        assert!((v - 1.0).abs() <= 1e-6, "var {v}");
    }
}

#[test]
fn batch_norm_eval_identity_and_hand_case() {
    let mut r = rng(5);
    let x = Tensor::randn(Shape::new(2, 3, 2, 2), 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sc = g.constant(Tensor::ones(Shape::new(1, 3, 1, 1)));
    let sh = g.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
    let (mean, var) = ([0.0; 3], [1.0; 3]);
    let mode = BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
    let (y, stats) = g.batch_norm(xv, sc, sh, mode).unwrap();
    assert!(stats.is_none());
    assert_close(g.value(y).data(), x.data(), 1e-5 * 4.0);

    let xv = g.constant(t(Shape::new(2, 1, 1, 1), &[0.0, 2.0]));
    let sc = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let sh = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let (y, stats) = g.batch_norm(xv, sc, sh, BatchNormMode::Train { eps: 0.0 }).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    // reported statistics are the ones used to normalize
    let stats = stats.unwrap();
    assert_eq!((stats.mean, stats.var), (vec![1.0], vec![1.0]));

    let bad = g.constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
    assert!(g.batch_norm(xv, bad, sh, BatchNormMode::Train { eps: 1e-5 }).is_err());
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let x = g.constant(t(Shape::new(1, 1, 1, 3), &[0.0, -3.0, 3.0]));
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);

    let mut rr = rng(6);
    let a = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rr);
    let av = g.constant(a.clone());
    let z = g.constant(Tensor::zeros(a.shape()));
    let sum = g.add(av, z).unwrap();
    assert_eq!(g.value(sum).data(), a.data());

    let other = g.constant(Tensor::zeros(Shape::new(2, 3, 4, 5)));
    assert!(matches!(g.add(av, other), Err(Error::Shape { .. })));
    assert!(matches!(g.mul(av, other), Err(Error::Shape { .. })));
}

#[test]
fn concat_and_slice_round_trip() {
    let mut r = rng(7);
    let a = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut r);
    let b = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let cat = g.concat_channels(&[av, bv]).unwrap();
    assert_eq!(g.shape(cat), Shape::new(1, 5, 4, 4));
    let a2 = g.slice_channels(cat, 0, 2).unwrap();
    let b2 = g.slice_channels(cat, 2, 3).unwrap();
    assert_eq!(g.value(a2).data(), a.data());
    assert_eq!(g.value(b2).data(), b.data());
    let single = g.concat_channels(&[av]).unwrap();
    assert_eq!(g.value(single).data(), a.data());

    let wrong = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 3)));
    assert!(matches!(g.concat_channels(&[av, wrong]), Err(Error::Shape { .. })));
}

#[test]
fn resize_identity_constant_and_oracle() {
    let mut r = rng(8);
    let a = Tensor::randn(Shape::new(2, 2, 5, 3), 1.0, &mut r);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let same = g.resize_bilinear(av, 5, 3).unwrap();
    assert_eq!(g.value(same).data(), a.data());

    let c = g.constant(Tensor::full(Shape::new(1, 1, 3, 4), 2.5));
    for (h, w) in [(1, 1), (7, 2), (9, 13)] {
        let y = g.resize_bilinear(c, h, w).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 2.5).abs() <= 1e-12));
    }

    let x = t(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 2.0, 3.0]);
    let xv = g.constant(x.clone());
    let up = g.resize_bilinear(xv, 4, 4).unwrap();
    // source coordinates per axis are [0, 0.25, 0.75, 1]; value = 2*sy + sx
    let axis = [0.0, 0.25, 0.75, 1.0];
    let mut hand = Vec::new();
    for sy in axis {
        for sx in axis {
            hand.push(2.0 * sy + sx);
        }
    }
    assert_close(g.value(up).data(), &hand, 1e-12);
    assert_close(g.value(up).data(), bilinear_oracle(&x, 4, 4).data(), 1e-12);

    for (h, w) in [(3, 7), (1, 2), (11, 5)] {
        let y = g.resize_bilinear(av, h, w).unwrap();
        assert_close(g.value(y).data(), bilinear_oracle(&a, h, w).data(), 1e-12);
    }
}

#[test]
fn backward_polynomial_rules() {
    let mut r = rng(9);
    let x = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, &mut r).with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(xv).unwrap(), want.as_slice());

    assert!(matches!(g.backward(s), Err(Error::Usage(_))));
}

#[test]
fn backward_needs_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn finite_diff_check_examples() {
    let mut r = rng(10);
    let x = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut r);
    let err = finite_diff_check(|g, v| g.sum(v), &x, 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");

    let x = Tensor::uniform(Shape::new(1, 2, 4, 4), -3.0, 3.0, &mut r);
    let err = finite_diff_check(
        |g, v| {
            let s = g.sigmoid(v)?;
            g.sum(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");

    let x = Tensor::randn(Shape::new(1, 2, 5, 5), 1.0, &mut r);
    let w = Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut r);
    let err = finite_diff_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, None, ConvGeometry::new(1, 1))?;
            g.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    assert!(matches!(finite_diff_check(|g, v| g.sum(v), &x, 1e-3), Err(Error::Usage(_))));
    assert!(matches!(finite_diff_check(|g, v| g.relu(v), &x, 1e-5), Err(Error::Usage(_))));
}

#[test]
fn first_non_finite_names_the_op() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), f64::MAX));
    let y = g.add(x, x).unwrap();
    let _ = g.relu(y).unwrap();
    assert_eq!(g.first_non_finite(), Some((1, "add")));
}

// ---- properties -------------------------------------------------------------

/// Weighted sum with fixed pseudo-random coefficients, so gradients flowing
/// back are not all equal.
fn probe_loss(g: &mut Graph, y: sernet_core::tensor::Var, seed: u64) -> sernet_core::Result<sernet_core::tensor::Var> {
    let shape = g.shape(y);
    let coeff = g.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)));
    let p = g.mul(y, coeff)?;
    g.sum(p)
}

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..=4, 1usize..=4, 1usize..=6, 1usize..=6).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_gradients_and_shape(
        n in 1usize..=2, cg in 1usize..=2, groups in 1usize..=2, co_g in 1usize..=2,
        h in 3usize..=6, w in 3usize..=6, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2, dilation in 1usize..=2, seed in any::<u64>(),
    ) {
        let padding = dilation * (k - 1) / 2;
        let geom = ConvGeometry { stride, padding, dilation, groups };
        let c = cg * groups;
        let mut r = rng(seed);
        let x = Tensor::randn(Shape::new(n, c, h, w), 1.0, &mut r);
        let wt = Tensor::randn(Shape::new(co_g * groups, cg, k, k), 0.5, &mut r);
        let b = Tensor::randn(Shape::new(1, co_g * groups, 1, 1), 0.5, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv2d(xv, wv, None, geom).unwrap();
        let oh = (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        let ow = (w + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        prop_assert_eq!(g.shape(y), Shape::new(n, co_g * groups, oh, ow));
        let err = finite_diff_check_many(
            |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?; probe_loss(g, y, seed) },
            &[x, wt, b], 1e-5, Coordinates::All,
        ).unwrap();
        prop_assert!(err <= 1e-4, "conv2d error {}", err);
    }

    #[test]
    fn conv_transpose2d_gradients_and_shape(
        n in 1usize..=2, ci in 1usize..=3, co in 1usize..=3, h in 1usize..=4, w in 1usize..=4,
        k in 1usize..=4, stride in 1usize..=4, seed in any::<u64>(),
    ) {
        let padding = if k >= 3 { 1 } else { 0 };
        prop_assume!((h - 1) * stride + k > 2 * padding);
        let mut r = rng(seed);
        let x = Tensor::randn(Shape::new(n, ci, h, w), 1.0, &mut r);
        let wt = Tensor::randn(Shape::new(ci, co, k, k), 0.5, &mut r);
        let b = Tensor::randn(Shape::new(1, co, 1, 1), 0.5, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv_transpose2d(xv, wv, None, stride, padding).unwrap();
        prop_assert_eq!(g.shape(y), Shape::new(n, co, (h - 1) * stride + k - 2 * padding, (w - 1) * stride + k - 2 * padding));
        let err = finite_diff_check_many(
            |g, v| { let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, padding)?; probe_loss(g, y, seed) },
            &[x, wt, b], 1e-5, Coordinates::All,
        ).unwrap();
        prop_assert!(err <= 1e-4, "conv_transpose2d error {}", err);
    }

    #[test]
    fn batch_norm_gradients(shape in small_shape(), train in any::<bool>(), seed in any::<u64>()) {
        prop_assume!(!train || shape.n * shape.plane() > 1);
        let mut r = rng(seed);
        let x = Tensor::randn(shape, 2.0, &mut r);
        let cs = Shape::new(1, shape.c, 1, 1);
        let sc = Tensor::uniform(cs, 0.5, 1.5, &mut r);
        let sh = Tensor::randn(cs, 0.5, &mut r);
        let mean: Vec<f64> = (0..shape.c).map(|i| i as f64 * 0.1).collect();
        let var: Vec<f64> = (0..shape.c).map(|i| 1.0 + i as f64 * 0.5).collect();
        let err = finite_diff_check_many(
            |g, v| {
                let mode = if train { BatchNormMode::Train { eps: 1e-5 } } else { BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 } };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
                prop_assert_eq_shape(g, y, shape);
                probe_loss(g, y, seed)
            },
            &[x, sc, sh], 1e-5, Coordinates::All,
        ).unwrap();
        prop_assert!(err <= 1e-4, "batch_norm error {}", err);
    }

    #[test]
    fn pointwise_gradients_and_ranges(shape in small_shape(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::uniform(shape, -3.0, 3.0, &mut r);
        let b = Tensor::uniform(shape, -3.0, 3.0, &mut r);
        let mut g = Graph::new();
        let wide = g.constant(Tensor::uniform(shape, -30.0, 30.0, &mut r));
        let s = g.sigmoid(wide).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let rl = g.relu(wide).unwrap();
        prop_assert!(g.value(rl).data().iter().all(|&v| v >= 0.0));
        for kind in 0..4 {
            let err = finite_diff_check_many(
                |g, v| {
                    let y = match kind {
                        0 => g.sigmoid(v[0])?,
                        1 => g.relu(v[0])?,
                        2 => g.add(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    prop_assert_eq_shape(g, y, shape);
                    probe_loss(g, y, seed)
                },
                &[a.clone(), b.clone()], 1e-5, Coordinates::All,
            ).unwrap();
            prop_assert!(err <= 1e-4, "pointwise kind {} error {}", kind, err);
        }
    }

    #[test]
    fn concat_slice_resize_gradients(shape in small_shape(), extra_c in 1usize..=3, oh in 1usize..=8, ow in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(shape, 1.0, &mut r);
        let b = Tensor::randn(shape.with_channels(extra_c), 1.0, &mut r);
        let err = finite_diff_check_many(
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]])?;
                prop_assert_eq_shape(g, cat, shape.with_channels(shape.c + extra_c));
                let part = g.slice_channels(cat, 1, shape.c + extra_c - 1)?;
                let y = g.resize_bilinear(part, oh, ow)?;
                prop_assert_eq_shape(g, y, Shape::new(shape.n, shape.c + extra_c - 1, oh, ow));
                probe_loss(g, y, seed)
            },
            &[a, b], 1e-5, Coordinates::All,
        ).unwrap();
        prop_assert!(err <= 1e-4, "concat/slice/resize error {}", err);
    }

    #[test]
    fn cross_entropy_gradients(shape in small_shape(), classes in 2usize..=4, seed in any::<u64>()) {
        let shape = shape.with_channels(classes);
        let mut r = rng(seed);
        let z = Tensor::randn(shape, 2.0, &mut r);
        let labels: Vec<u8> = (0..shape.n * shape.plane())
            .map(|_| if rand::Rng::random_bool(&mut r, 0.1) { 255 } else { rand::Rng::random_range(&mut r, 0..classes as u8) })
            .collect();
        let weights: Vec<f64> = (0..classes).map(|c| 0.5 + c as f64).collect();
        let err = finite_diff_check_many(
            |g, v| g.weighted_cross_entropy(v[0], &labels, &weights, Some(255)),
            &[z], 1e-5, Coordinates::All,
        ).unwrap();
        prop_assert!(err <= 1e-4, "cross-entropy error {}", err);
    }
}

fn prop_assert_eq_shape(g: &Graph, v: sernet_core::tensor::Var, want: Shape) {
    assert_eq!(g.shape(v), want);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(42);
        let x = Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut r);
        let w = Tensor::randn(Shape::new(4, 2, 3, 3), 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv2d(xv, wv, None, ConvGeometry::dilated(2, 2).with_groups(2)).unwrap();
        let y = g.resize_bilinear(y, 9, 5).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
