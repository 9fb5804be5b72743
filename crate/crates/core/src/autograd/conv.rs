//! Stride-1 zero-padded 2-D convolution lowered to matrix products.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on im2col scratch size in elements; large images are
/// processed in bands of output rows.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn rows_per_band(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.ow).max(1)).clamp(1, self.oh.max(1))
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.rows_per_band();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r0| (r0, (r0 + step).min(oh)))
    }

    /// Output columns `[lo, hi)` whose input column `ox + kx - pad` is inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, col: &mut [T]) {
    let len = (r1 - r0) * g.ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * len..(row + 1) * len];
                let (lo, hi) = g.valid_cols(kx);
                for oy in r0..r1 {
                    let seg = &mut dst[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h || lo == hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    seg[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [T]) {
    let len = (r1 - r0) * g.ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * len..(row + 1) * len];
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                for oy in r0..r1 {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let seg = &src_row[(oy - r0) * g.ow + lo..(oy - r0) * g.ow + hi];
                    let dst = &mut plane[(iy - g.pad) * g.w + lo + kx - g.pad..];
                    for (d, &s) in dst.iter_mut().zip(seg) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = vec![T::zero(); g.n * g.cout * ohw];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * g.rows_per_band() * g.ow]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let out_n = &mut out[n * g.cout * ohw..(n + 1) * g.cout * ohw];
        if g.pointwise() {
            T::gemm(
                g.cout,
                ckk,
                ohw,
                T::one(),
                w,
                (ckk as isize, 1),
                xn,
                (ohw as isize, 1),
                T::zero(),
                out_n,
                (ohw as isize, 1),
            );
            continue;
        }
        for (r0, r1) in g.bands() {
            let len = (r1 - r0) * g.ow;
            im2col(xn, g, r0, r1, &mut col[..ckk * len]);
            T::gemm(
                g.cout,
                ckk,
                len,
                T::one(),
                w,
                (ckk as isize, 1),
                &col[..ckk * len],
                (len as isize, 1),
                T::zero(),
                &mut out_n[r0 * g.ow..],
                (ohw as isize, 1),
            );
        }
    }
    if let Some(b) = bias {
        // planes cycle through output channels
        for (i, plane) in out.chunks_mut(ohw).enumerate() {
            let bv = b[i % g.cout];
            for v in plane {
                *v += bv;
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; each is computed only when requested.
fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_len = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.cout * ckk]);
    let band = if g.pointwise() { 0 } else { ckk * g.rows_per_band() * g.ow };
    let mut col = vec![T::zero(); band];
    let mut dcol = vec![T::zero(); if want_dx { band } else { 0 }];

    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * g.cout * ohw..(n + 1) * g.cout * ohw];
        if g.pointwise() {
            if let Some(dw) = dw.as_mut() {
                T::gemm(
                    g.cout,
                    ohw,
                    ckk,
                    T::one(),
                    dyn_,
                    (ohw as isize, 1),
                    xn,
                    (1, ohw as isize),
                    T::one(),
                    dw,
                    (ckk as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ckk,
                    g.cout,
                    ohw,
                    T::one(),
                    w,
                    (1, ckk as isize),
                    dyn_,
                    (ohw as isize, 1),
                    T::zero(),
                    &mut dx[n * in_len..(n + 1) * in_len],
                    (ohw as isize, 1),
                );
            }
            continue;
        }
        for (r0, r1) in g.bands() {
            let len = (r1 - r0) * g.ow;
            let dy_band = &dyn_[r0 * g.ow..];
            if let Some(dw) = dw.as_mut() {
                im2col(xn, g, r0, r1, &mut col[..ckk * len]);
                T::gemm(
                    g.cout,
                    len,
                    ckk,
                    T::one(),
                    dy_band,
                    (ohw as isize, 1),
                    &col[..ckk * len],
                    (1, len as isize),
                    T::one(),
                    dw,
                    (ckk as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ckk,
                    g.cout,
                    len,
                    T::one(),
                    w,
                    (1, ckk as isize),
                    dy_band,
                    (ohw as isize, 1),
                    T::zero(),
                    &mut dcol[..ckk * len],
                    (len as isize, 1),
                );
                col2im_add(&dcol[..ckk * len], g, r0, r1, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    (dx, dw)
}

impl<T: Scalar> Graph<T> {
    /// `x: [n, cin, h, w]`, `kernel: [cout, cin, kh, kw]`, optional
    /// `bias: [cout]`; stride 1 with `pad` zero pixels on every side.
    pub fn conv2d(&mut self, x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>, pad: usize) -> Result<Var<T>> {
        let (n, cin, h, w) = x.value().dims4()?;
        let (cout, kcin, kh, kw) = kernel.value().dims4()?;
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{w} input (pad {pad}) smaller than {kh}x{kw} kernel"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("conv2d: bias shape {:?}", b.shape())));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        let out = conv_forward(
            x.value().data(),
            kernel.value().data(),
            bias.map(|b| b.value().data()),
            &geom,
        );
        let out = Arc::new(Tensor::from_parts(vec![n, cout, geom.oh, geom.ow], out));
        let (xv, wv) = (x.shared(), kernel.shared());
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.record(out, &parents, move |g, needs| {
            let (dx, dw) = conv_backward(xv.data(), wv.data(), g.data(), &geom, needs[0], needs[1]);
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            ];
            if needs.len() > 2 {
                let mut db = vec![T::zero(); geom.cout];
                for (i, plane) in g.data().chunks(geom.ohw()).enumerate() {
                    db[i % geom.cout] += plane.iter().copied().sum();
                }
                grads.push(needs[2].then(|| Tensor::from_parts(vec![geom.cout], db)));
            }
            grads
        }))
    }
}
