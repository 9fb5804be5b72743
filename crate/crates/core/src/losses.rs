//! Training objective: mask-guided content loss, two-source SSIM loss and
//! the four-scale global feature loss, combined with fixed weights.
//!
//! Graph functions take `[n, 1, h, w]` batches in the symmetric range; the
//! eager wrappers take single images.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{reflect_index, Graph, Var};
use crate::dataio::NormalizedImage;
use crate::error::{Error, Result};
use crate::gfem::{GfemPass, GfemWeights, GlobalFeaturePyramid};
use crate::saliency::SaliencyMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which terms enter the objective. A disabled term is not evaluated and
/// contributes exactly nothing to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub content: bool,
    pub ssim: bool,
    pub global: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            content: true,
            ssim: true,
            global: true,
        }
    }
}

impl LossFlags {
    pub fn any(&self) -> bool {
        self.content || self.ssim || self.global
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub ssim: f64,
    pub global: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum computed in the same order as the graph objective.
    pub fn new(content: f64, ssim: f64, global: f64, w: &LossWeights) -> Self {
        Self {
            content,
            ssim,
            global,
            total: w.alpha * content + w.beta * ssim + w.gamma * global,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.ssim.is_finite() && self.global.is_finite() && self.total.is_finite()
    }
}

fn nchw1(x: &Var<impl Scalar>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, 1, h, w] => Ok((*n, *h, *w)),
        s => Err(Error::Shape(format!("expected [n, 1, h, w], got {s:?}"))),
    }
}

fn same_shape<T: Scalar>(vars: &[&Var<T>]) -> Result<(usize, usize, usize)> {
    let dims = nchw1(vars[0])?;
    for v in &vars[1..] {
        if v.shape() != vars[0].shape() {
            return Err(Error::Shape(format!("shape {:?} vs {:?}", v.shape(), vars[0].shape())));
        }
    }
    Ok(dims)
}

/// Sobel gradient magnitude with kernels scaled by 1/8 and reflected
/// borders; same shape as the input.
pub fn sobel_magnitude<T: Scalar>(g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let (n, h, w) = nchw1(x)?;
    let (ph, pw) = (h + 2, w + 2);
    let mut index = Vec::with_capacity(n * ph * pw);
    for b in 0..n {
        for y in 0..ph {
            let sy = reflect_index(y as isize - 1, h);
            for xx in 0..pw {
                index.push((b * h + sy) * w + reflect_index(xx as isize - 1, w));
            }
        }
    }
    let padded = g.gather(x, Arc::new(index), &[n, 1, ph, pw])?;
    #[rustfmt::skip]
    let k: [f64; 18] = [
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    let kernel = Var::constant(Tensor::new(&[2, 1, 3, 3], k.iter().map(|&v| T::of(v / 8.0)).collect())?);
    let resp = g.conv2d(&padded, &kernel, None, 0)?;
    let plane = h * w;
    let pick = |c: usize| {
        Arc::new(
            (0..n)
                .flat_map(|b| (0..plane).map(move |i| (b * 2 + c) * plane + i))
                .collect::<Vec<_>>(),
        )
    };
    let gx = g.gather(&resp, pick(0), &[n, 1, h, w])?;
    let gy = g.gather(&resp, pick(1), &[n, 1, h, w])?;
    g.hypot(&gx, &gy)
}

/// Per-sample Frobenius norm divided by √(h·w): `[n, 1, h, w] -> [n]`.
fn normalized_frobenius<T: Scalar>(g: &mut Graph<T>, x: &Var<T>, hw: usize) -> Result<Var<T>> {
    let sq = g.square(x);
    let s = g.sum_per_sample(&sq)?;
    let r = g.sqrt(&s);
    Ok(g.scale(&r, T::of(1.0 / (hw as f64).sqrt())))
}

/// `‖m∘(f − ir)‖ + ‖(1 − m)∘(∇f − ∇vis)‖`, each normalized by √(h·w) and
/// averaged over the batch.
pub fn content_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    fused: &Var<T>,
    ir: &Var<T>,
    vis: &Var<T>,
    mask: &Var<T>,
) -> Result<Var<T>> {
    let (_, h, w) = same_shape(&[fused, ir, vis, mask])?;
    if let Some(&bad) = mask.value().data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::NonBinaryMask(bad.to_f64_lossy()));
    }
    let diff = g.sub(fused, ir)?;
    let inside = g.mul(mask, &diff)?;
    let inv = Var::constant(mask.value().map(|m| T::one() - m));
    let gf = sobel_magnitude(g, fused)?;
    let gv = sobel_magnitude(g, vis)?;
    let gdiff = g.sub(&gf, &gv)?;
    let outside = g.mul(&inv, &gdiff)?;
    let a = normalized_frobenius(g, &inside, h * w)?;
    let b = normalized_frobenius(g, &outside, h * w)?;
    let per_sample = g.add(&a, &b)?;
    Ok(g.mean(&per_sample))
}

/// Normalized Gaussian window of side `size`.
fn gaussian_window<T: Scalar>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g1.iter().sum::<f64>().powi(2);
    Tensor::from_fn(&[1, 1, size, size], |i| T::of(g1[i / size] * g1[i % size] / total))
}

/// Window side used on an `h × w` image: the reference 11, or the smaller
/// image side.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    SSIM_WINDOW.min(h).min(w)
}

/// Mean local SSIM over valid window positions, with inputs mapped from
/// `[-1, 1]` to `[0, 1]`; averaged over the batch.
pub fn ssim_graph<T: Scalar>(g: &mut Graph<T>, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    let (_, h, w) = same_shape(&[x, y])?;
    let half = T::of(0.5);
    let x = g.affine(x, half, half);
    let y = g.affine(y, half, half);
    let win = Var::constant(gaussian_window::<T>(ssim_window_size(h, w), SSIM_SIGMA));
    let filt = |g: &mut Graph<T>, v: &Var<T>| g.conv2d(v, &win, None, 0);
    let mx = filt(g, &x)?;
    let my = filt(g, &y)?;
    let xx = g.mul(&x, &x)?;
    let yy = g.mul(&y, &y)?;
    let xy = g.mul(&x, &y)?;
    let exx = filt(g, &xx)?;
    let eyy = filt(g, &yy)?;
    let exy = filt(g, &xy)?;
    let mxx = g.mul(&mx, &mx)?;
    let myy = g.mul(&my, &my)?;
    let mxy = g.mul(&mx, &my)?;
    let sxx = g.sub(&exx, &mxx)?;
    let syy = g.sub(&eyy, &myy)?;
    let sxy = g.sub(&exy, &mxy)?;
    let two = T::of(2.0);
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let n1 = g.affine(&mxy, two, c1);
    let n2 = g.affine(&sxy, two, c2);
    let num = g.mul(&n1, &n2)?;
    let d1 = g.add(&mxx, &myy)?;
    let d1 = g.affine(&d1, T::one(), c1);
    let d2 = g.add(&sxx, &syy)?;
    let d2 = g.affine(&d2, T::one(), c2);
    let den = g.mul(&d1, &d2)?;
    let map = g.div(&num, &den)?;
    Ok(g.mean(&map))
}

/// `(1 − ssim(f, ir)) + (1 − ssim(f, vis))`.
pub fn ssim_loss_graph<T: Scalar>(g: &mut Graph<T>, fused: &Var<T>, ir: &Var<T>, vis: &Var<T>) -> Result<Var<T>> {
    let a = ssim_graph(g, fused, ir)?;
    let b = ssim_graph(g, fused, vis)?;
    let s = g.add(&a, &b)?;
    Ok(g.affine(&s, -T::one(), T::of(2.0)))
}

/// `Σ_s mean |GF_s − max(GA_s, GB_s)|`; only `gf` carries gradients.
pub fn global_loss_graph<T: Scalar>(g: &mut Graph<T>, gf: &[Var<T>], ga: &[Tensor<T>], gb: &[Tensor<T>]) -> Result<Var<T>> {
    if gf.is_empty() || gf.len() != ga.len() || gf.len() != gb.len() {
        return Err(Error::Shape(format!(
            "pyramids have {}, {} and {} stages",
            gf.len(),
            ga.len(),
            gb.len()
        )));
    }
    let mut total: Option<Var<T>> = None;
    for ((f, a), b) in gf.iter().zip(ga).zip(gb) {
        let target = Var::constant(a.zip_map(b, T::max)?);
        let d = g.sub(f, &target)?;
        let d = g.abs(&d);
        let m = g.mean(&d);
        total = Some(match total {
            None => m,
            Some(t) => g.add(&t, &m)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Graph objective plus the logged breakdown.
pub struct Objective<T> {
    /// `None` when every term is disabled.
    pub total: Option<Var<T>>,
    pub breakdown: LossBreakdown,
}

/// Builds the weighted objective on a batch. `mask` is binary, `gfem` is
/// required only when the global term is enabled.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    fused: &Var<T>,
    ir: &Var<T>,
    vis: &Var<T>,
    mask: &Var<T>,
    gfem: Option<&GfemWeights<T>>,
    weights: &LossWeights,
    flags: &LossFlags,
) -> Result<Objective<T>> {
    let mut terms: Vec<Var<T>> = Vec::new();
    let (mut c, mut s, mut gl) = (0.0, 0.0, 0.0);
    if flags.content {
        let v = content_loss_graph(g, fused, ir, vis, mask)?;
        c = v.value().item().to_f64_lossy();
        terms.push(g.scale(&v, T::of(weights.alpha)));
    }
    if flags.ssim {
        let v = ssim_loss_graph(g, fused, ir, vis)?;
        s = v.value().item().to_f64_lossy();
        terms.push(g.scale(&v, T::of(weights.beta)));
    }
    if flags.global {
        let gw = gfem.ok_or_else(|| Error::Config("global loss enabled without extractor weights".into()))?;
        let mut pass = GfemPass::new(g, gw);
        let gf = pass.forward(g, fused)?;
        let ga: Vec<Tensor<T>> = pass.forward(g, ir)?.iter().map(|v| v.value().clone()).collect();
        let gb: Vec<Tensor<T>> = pass.forward(g, vis)?.iter().map(|v| v.value().clone()).collect();
        let v = global_loss_graph(g, &gf, &ga, &gb)?;
        gl = v.value().item().to_f64_lossy();
        terms.push(g.scale(&v, T::of(weights.gamma)));
    }
    let mut total: Option<Var<T>> = None;
    for t in terms {
        total = Some(match total {
            None => t,
            Some(acc) => g.add(&acc, &t)?,
        });
    }
    Ok(Objective {
        total,
        breakdown: LossBreakdown::new(c, s, gl, weights),
    })
}

fn image_pair_vars<T: Scalar>(a: &NormalizedImage<T>, b: &NormalizedImage<T>) -> Result<(Var<T>, Var<T>)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("image sizes {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((
        Var::constant(a.to_symmetric().to_tensor()),
        Var::constant(b.to_symmetric().to_tensor()),
    ))
}

/// Sobel magnitude of one image.
pub fn gradient_magnitude<T: Scalar>(image: &NormalizedImage<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let m = sobel_magnitude(&mut g, &Var::constant(image.to_tensor()))?;
    m.value().clone().reshape(&[image.height(), image.width()])
}

pub fn content_loss<T: Scalar>(
    fused: &NormalizedImage<T>,
    ir: &NormalizedImage<T>,
    vis: &NormalizedImage<T>,
    mask: &SaliencyMask,
) -> Result<f64> {
    let (f, i) = image_pair_vars(fused, ir)?;
    let (_, v) = image_pair_vars(fused, vis)?;
    if mask.dims() != fused.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.dims(), fused.dims())));
    }
    let m = Var::constant(mask.to_tensor::<T>().reshape(&[1, 1, fused.height(), fused.width()])?);
    let mut g = Graph::new();
    Ok(content_loss_graph(&mut g, &f, &i, &v, &m)?.value().item().to_f64_lossy())
}

pub fn ssim<T: Scalar>(x: &NormalizedImage<T>, y: &NormalizedImage<T>) -> Result<f64> {
    let (a, b) = image_pair_vars(x, y)?;
    let mut g = Graph::new();
    Ok(ssim_graph(&mut g, &a, &b)?.value().item().to_f64_lossy())
}

pub fn ssim_loss<T: Scalar>(fused: &NormalizedImage<T>, ir: &NormalizedImage<T>, vis: &NormalizedImage<T>) -> Result<f64> {
    Ok((1.0 - ssim(fused, ir)?) + (1.0 - ssim(fused, vis)?))
}

pub fn global_loss<T: Scalar>(
    gf: &GlobalFeaturePyramid<T>,
    ga: &GlobalFeaturePyramid<T>,
    gb: &GlobalFeaturePyramid<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let f: Vec<Var<T>> = gf.stages.iter().cloned().map(Var::constant).collect();
    Ok(global_loss_graph(&mut g, &f, &ga.stages, &gb.stages)?
        .value()
        .item()
        .to_f64_lossy())
}

/// Full weighted breakdown on one image triple.
pub fn total_loss<T: Scalar>(
    fused: &NormalizedImage<T>,
    ir: &NormalizedImage<T>,
    vis: &NormalizedImage<T>,
    mask: &SaliencyMask,
    gfem: &GfemWeights<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (f, i) = image_pair_vars(fused, ir)?;
    let (_, v) = image_pair_vars(fused, vis)?;
    if mask.dims() != fused.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.dims(), fused.dims())));
    }
    let m = Var::constant(mask.to_tensor::<T>().reshape(&[1, 1, fused.height(), fused.width()])?);
    let mut g = Graph::new();
    let obj = objective(&mut g, &f, &i, &v, &m, Some(gfem), weights, &LossFlags::default())?;
    Ok(obj.breakdown)
}
