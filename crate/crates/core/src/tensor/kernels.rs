//! Raw loops behind the graph operations. Everything here works on plain
//! slices; shape validation happens in the graph layer.
//!
//! Summation order in every kernel is fixed, so results are bit-identical
//! between runs.

/// Sliding-window geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate touched by output position `o` and kernel tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Expands `src` (channels × in_h × in_w) into a (rows × cols) patch matrix.
pub(crate) fn im2col(src: &[f64], win: &Window, cols: &mut [f64]) {
    let ncols = win.cols();
    debug_assert_eq!(cols.len(), win.rows() * ncols);
    let plane = win.in_h * win.in_w;
    for c in 0..win.channels {
        let chan = &src[c * plane..(c + 1) * plane];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = (c * win.k + ky) * win.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    match win.source(oy, ky, win.in_h) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            for (ox, d) in line.iter_mut().enumerate() {
                                *d = match win.source(ox, kx, win.in_w) {
                                    Some(ix) => chan[iy * win.in_w + ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back onto `dst`.
pub(crate) fn col2im(cols: &[f64], win: &Window, dst: &mut [f64]) {
    let ncols = win.cols();
    let plane = win.in_h * win.in_w;
    for c in 0..win.channels {
        let chan = &mut dst[c * plane..(c + 1) * plane];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = (c * win.k + ky) * win.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let Some(iy) = win.source(oy, ky, win.in_h) else {
                        continue;
                    };
                    for ox in 0..win.out_w {
                        if let Some(ix) = win.source(ox, kx, win.in_w) {
                            chan[iy * win.in_w + ix] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == 0.0 {
                continue;
            }
            let brow = &b[j * p..(j + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · d[m×p]`
pub(crate) fn gemm_tn_acc(a: &[f64], d: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &d[i * p..(i + 1) * p];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == 0.0 {
                continue;
            }
            let orow = &mut out[j * p..(j + 1) * p];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += aij * dv;
            }
        }
    }
}

/// `out[m×k] += d[m×p] · b[k×p]ᵀ`
pub(crate) fn gemm_nt_acc(d: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &d[i * p..(i + 1) * p];
        for j in 0..k {
            let brow = &b[j * p..(j + 1) * p];
            let dot: f64 = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + j] += dot;
        }
    }
}

/// Precomputed source indices and weights for one axis of an
/// align-corners-false bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisPlan {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(if lo == hi { 0.0 } else { src - lo as f64 });
        }
        plan
    }
}

pub(crate) fn resize_plane(src: &[f64], in_w: usize, ys: &AxisPlan, xs: &AxisPlan, dst: &mut [f64]) {
    let out_w = xs.lo.len();
    for (oy, ((&y0, &y1), &fy)) in ys.lo.iter().zip(&ys.hi).zip(&ys.frac).enumerate() {
        let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
        let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
        for ox in 0..out_w {
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

pub(crate) fn resize_plane_backward(
    grad_out: &[f64],
    in_w: usize,
    ys: &AxisPlan,
    xs: &AxisPlan,
    grad_in: &mut [f64],
) {
    let out_w = xs.lo.len();
    for (oy, ((&y0, &y1), &fy)) in ys.lo.iter().zip(&ys.hi).zip(&ys.frac).enumerate() {
        for ox in 0..out_w {
            let g = grad_out[oy * out_w + ox];
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            grad_in[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
            grad_in[y0 * in_w + x1] += g * (1.0 - fy) * fx;
            grad_in[y1 * in_w + x0] += g * fy * (1.0 - fx);
            grad_in[y1 * in_w + x1] += g * fy * fx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let win = Window {
            channels: 2,
            in_h: 5,
            in_w: 4,
            k: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..win.rows() * win.cols()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, p) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut out = vec![0.0; m * p];
        gemm_acc(&a, &b, &mut out, m, k, p);
        for i in 0..m {
            for j in 0..p {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * p + j]).sum();
                assert_eq!(out[i * p + j], want);
            }
        }
        let mut atd = vec![0.0; k * p];
        gemm_tn_acc(&a, &out, &mut atd, m, k, p);
        for t in 0..k {
            for j in 0..p {
                let want: f64 = (0..m).map(|i| a[i * k + t] * out[i * p + j]).sum();
                assert!((atd[t * p + j] - want).abs() < 1e-9);
            }
        }
        let mut dbt = vec![0.0; m * k];
        gemm_nt_acc(&out, &b, &mut dbt, m, k, p);
        for i in 0..m {
            for t in 0..k {
                let want: f64 = (0..p).map(|j| out[i * p + j] * b[t * p + j]).sum();
                assert!((dbt[i * k + t] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_resize_plan_has_no_blend() {
        let plan = AxisPlan::new(6, 6);
        assert_eq!(plan.lo, (0..6).collect::<Vec<_>>());
        assert!(plan.frac.iter().all(|&f| f == 0.0));
    }
}
