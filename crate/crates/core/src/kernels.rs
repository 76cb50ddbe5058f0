//! Raw numeric kernels behind the heavier graph ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// Geometry of a stride-1 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let ox_lo = g.pad.saturating_sub(kj);
                let ox_hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h || ox_lo >= ox_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = iy - g.pad;
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    let ix0 = ox_lo + kj - g.pad;
                    line[ox_lo..ox_hi].copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let ox_lo = g.pad.saturating_sub(kj);
                let ox_hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let ix0 = ox_lo + kj - g.pad;
                    let out = &mut dst[iy * g.w + ix0..iy * g.w + ix0 + (ox_hi - ox_lo)];
                    for (o, &v) in out.iter_mut().zip(&src[oy * g.ow + ox_lo..oy * g.ow + ox_hi]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.f * plane];
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.n {
        im2col(&x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w], g, &mut cols);
        let dst = &mut out[b * g.f * plane..(b + 1) * g.f * plane];
        // SAFETY: weight is f×patch, cols is patch×plane, dst is f×plane, all row-major.
        unsafe {
            T::gemm(
                g.f,
                patch,
                plane,
                T::one(),
                weight.as_ptr(),
                patch as isize,
                1,
                cols.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    out
}

/// Gradients of a cross-correlation w.r.t. its input (when requested) and weight.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let img = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * img]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.f * patch]);
    let mut cols = vec![T::zero(); patch * plane];
    let mut dcols = vec![T::zero(); patch * plane];
    for b in 0..g.n {
        let dyb = &dy[b * g.f * plane..(b + 1) * g.f * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * img..(b + 1) * img], g, &mut cols);
            // SAFETY: dyb is f×plane; cols read transposed as plane×patch; dw is f×patch.
            unsafe {
                T::gemm(
                    g.f,
                    plane,
                    patch,
                    T::one(),
                    dyb.as_ptr(),
                    plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    plane as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // SAFETY: weight read transposed as patch×f; dyb is f×plane; dcols patch×plane.
            unsafe {
                T::gemm(
                    patch,
                    g.f,
                    plane,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    patch as isize,
                    dyb.as_ptr(),
                    plane as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            col2im_add(&dcols, g, &mut dx[b * img..(b + 1) * img]);
        }
    }
    (dx, dw)
}

/// 2×2 stride-2 max pooling with floor semantics. Returns the pooled values and,
/// for each output, the flat input offset that won (first row-major maximum).
pub(crate) fn max_pool2x2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let top = &x[r0..r0 + w];
            let bottom = &x[r0 + w..r0 + 2 * w];
            let o = (p * oh + oy) * ow;
            for (ox, (dst, idx)) in out[o..o + ow].iter_mut().zip(&mut arg[o..o + ow]).enumerate() {
                let c = 2 * ox;
                let cands = [top[c], top[c + 1], bottom[c], bottom[c + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cands[k] > cands[best] {
                        best = k;
                    }
                }
                *dst = cands[best];
                *idx = r0 + (best / 2) * w + c + best % 2;
            }
        }
    }
    (out, arg)
}

/// Sum with eight independent accumulators so the loop can pipeline.
pub(crate) fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + c[k];
        }
    }
    let mut s = rest.iter().fold(T::zero(), |a, &v| a + v);
    for a in acc {
        s = s + a;
    }
    s
}

pub(crate) fn lane_dot<T: Real>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let cx = xs.chunks_exact(8);
    let cy = ys.chunks_exact(8);
    let mut s = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .fold(T::zero(), |a, (&x, &y)| a + x * y);
    for (a, b) in cx.zip(cy) {
        for k in 0..8 {
            acc[k] = acc[k] + a[k] * b[k];
        }
    }
    for a in acc {
        s = s + a;
    }
    s
}

fn lane_sq_dev<T: Real>(xs: &[T], m: T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            let d = c[k] - m;
            acc[k] = acc[k] + d * d;
        }
    }
    let mut s = rest.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
    for a in acc {
        s = s + a;
    }
    s
}

/// Per-channel batch statistics of an `[n, c, plane]` buffer: (mean, biased variance).
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| &x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        let m = planes().map(lane_sum).fold(T::zero(), |a, v| a + v) / count;
        let q = planes().map(|p| lane_sq_dev(p, m)).fold(T::zero(), |a, v| a + v);
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
        for b in 0..g.n {
            for f in 0..g.f {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = oy as isize + ki as isize - g.pad as isize;
                                    let ix = ox as isize + kj as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((b * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((b * g.f + f) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn padded_conv_matches_loops() {
        let g = ConvGeom {
            n: 2,
            c: 3,
            h: 5,
            w: 6,
            f: 2,
            kh: 3,
            kw: 3,
            pad: 1,
            oh: 5,
            ow: 6,
        };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w)
            .map(|i| ((i * 37) % 11) as f64 - 5.0)
            .collect();
        let wt: Vec<f64> = (0..g.f * g.c * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let fast = conv2d_forward(&x, &wt, &g);
        let slow = naive_conv(&x, &wt, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_ties_go_to_first_element() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (v, arg) = max_pool2x2(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
