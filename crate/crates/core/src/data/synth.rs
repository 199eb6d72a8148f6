//! Synthetic scenes of colored geometric regions.
//!
//! Class 0 is a smooth background gradient. Every other class owns one shape
//! kind and one base color, so a scene is learnable from both appearance and
//! geometry. Shapes are painted in random order, preferably without
//! overlapping, but may occlude each other in crowded scenes; the generator
//! retries until every class is visible and falls back to stamping small
//! squares for any class still missing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Shape, Tensor};

const NOISE_STD: f64 = 0.05;
const ATTEMPTS: usize = 32;
const PLACEMENT_TRIES: usize = 16;

const COLORS: [[u8; 3]; 12] = [
    [110, 110, 120],
    [220, 40, 40],
    [40, 170, 60],
    [50, 80, 220],
    [235, 200, 30],
    [200, 60, 200],
    [30, 200, 200],
    [240, 130, 20],
    [140, 80, 30],
    [250, 250, 250],
    [20, 20, 20],
    [150, 220, 120],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Rect,
    Disc,
    Bar,
    Triangle,
    Ring,
    Diamond,
}

const KINDS: [Kind; 6] = [
    Kind::Rect,
    Kind::Disc,
    Kind::Bar,
    Kind::Triangle,
    Kind::Ring,
    Kind::Diamond,
];

/// Base color of a class; colors beyond the fixed table come from a hash.
pub fn class_color(class: usize) -> [u8; 3] {
    COLORS.get(class).copied().unwrap_or_else(|| {
        let h = derive_seed(class as u64, "synth.color").to_le_bytes();
        [h[0], h[1], h[2]]
    })
}

struct ShapeDraw {
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    /// Rotation flag for bars and orientation for triangles.
    flip: bool,
}

impl ShapeDraw {
    fn random(kind: Kind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ShapeDraw {
        let side = h.min(w) as f64;
        let (mut ry, mut rx) = match kind {
            Kind::Bar => (side * rng.random_range(0.1..0.14), side * rng.random_range(0.32..0.45)),
            Kind::Disc | Kind::Ring => {
                let r = side * rng.random_range(0.2..0.3);
                (r, r)
            }
            _ => (side * rng.random_range(0.2..0.32), side * rng.random_range(0.2..0.32)),
        };
        ry = ry.max(1.5);
        rx = rx.max(1.5);
        let flip = rng.random_bool(0.5);
        if kind == Kind::Bar && flip {
            std::mem::swap(&mut ry, &mut rx);
        }
        let cy = rng.random_range(ry.min(h as f64 / 2.0)..=(h as f64 - ry).max(h as f64 / 2.0));
        let cx = rng.random_range(rx.min(w as f64 / 2.0)..=(w as f64 - rx).max(w as f64 / 2.0));
        ShapeDraw {
            kind,
            cy,
            cx,
            ry,
            rx,
            flip,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            Kind::Rect | Kind::Bar => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Kind::Disc => dy * dy + dx * dx <= 1.0,
            Kind::Ring => (0.25..=1.0).contains(&(dy * dy + dx * dx)),
            Kind::Diamond => dy.abs() + dx.abs() <= 1.0,
            Kind::Triangle => {
                let t = if self.flip { -dy } else { dy };
                (-1.0..=1.0).contains(&t) && dx.abs() <= (t + 1.0) / 2.0
            }
        }
    }
}

fn overlaps(a: &ShapeDraw, b: &ShapeDraw) -> bool {
    (a.cy - b.cy).abs() < a.ry + b.ry + 1.0 && (a.cx - b.cx).abs() < a.rx + b.rx + 1.0
}

/// Paints one shape per foreground class. Placements are redrawn a few times
/// to avoid overlapping bounding boxes; crowded scenes fall back to occlusion.
fn compose(h: usize, w: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels = vec![0u8; h * w];
    let mut order: Vec<usize> = (1..num_classes).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut placed: Vec<ShapeDraw> = Vec::new();
    for class in order {
        let kind = KINDS[(class - 1) % KINDS.len()];
        let mut shape = ShapeDraw::random(kind, h, w, rng);
        for _ in 0..PLACEMENT_TRIES {
            if !placed.iter().any(|p| overlaps(p, &shape)) {
                break;
            }
            shape = ShapeDraw::random(kind, h, w, rng);
        }
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    labels[y * w + x] = class as u8;
                }
            }
        }
        placed.push(shape);
    }
    labels
}

fn missing_classes(labels: &[u8], num_classes: usize, min_pixels: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    (0..num_classes).filter(|&c| counts[c] < min_pixels).collect()
}

/// One synthetic sample of size `h`×`w` with labels in `0..num_classes`.
pub fn synth_scene(seed: u64, h: usize, w: usize, num_classes: usize) -> Result<SegSample> {
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic scenes need 2..=255 classes, got {num_classes}")));
    }
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("synthetic scenes need H, W >= 32, got {h}x{w}")));
    }
    let mut rng = rng_for(seed, "synth.scene");
    let min_pixels = (h * w / 200).max(4);
    let mut labels = compose(h, w, num_classes, &mut rng);
    for _ in 1..ATTEMPTS {
        if missing_classes(&labels, num_classes, min_pixels).is_empty() {
            break;
        }
        labels = compose(h, w, num_classes, &mut rng);
    }
    let missing = missing_classes(&labels, num_classes, min_pixels);
    let stamp = (h.min(w) / 8).max(3);
    for (i, class) in missing.into_iter().enumerate() {
        let y0 = (i * stamp) % (h - stamp);
        let x0 = (i * stamp * 3) % (w - stamp);
        for y in y0..y0 + stamp {
            labels[y * w + x0..y * w + x0 + stamp].fill(class as u8);
        }
    }

    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    let tilt = rng.random_range(-0.2..0.2);
    let (gy, gx) = {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        (a.sin(), a.cos())
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = labels[i] as usize;
            let base = class_color(class);
            let shade = if class == 0 {
                let t = (y as f64 / h as f64 - 0.5) * gy + (x as f64 / w as f64 - 0.5) * gx;
                tilt * t * 2.0
            } else {
                0.0
            };
            for c in 0..3 {
                let v = base[c] as f64 / 255.0 + shade + noise.sample(&mut rng);
                image[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 3, h, w), image)?;
    SegSample::new(format!("synth_{seed:016x}"), image, LabelMap::new(1, h, w, labels)?)
}

/// `count` scenes with ids `synth_0000`, `synth_0001`, ...; scene `i` uses
/// the sub-seed derived from tag `synth.{i}`.
pub fn synth_dataset(seed: u64, count: usize, h: usize, w: usize, num_classes: usize) -> Result<Vec<SegSample>> {
    (0..count)
        .map(|i| {
            let mut s = synth_scene(derive_seed(seed, &format!("synth.{i}")), h, w, num_classes)?;
            s.id = format!("synth_{i:04}");
            Ok(s)
        })
        .collect()
}
