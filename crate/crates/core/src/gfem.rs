//! Hierarchical windowed-attention feature extractor. Produces four token
//! maps whose grid halves and width doubles from one stage to the next.
//! Weights are frozen; gradients still flow to the input image.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{reflect_index, Graph, Var, ZERO_FILL};
use crate::dataio::NormalizedImage;
use crate::error::{Error, Result};
use crate::params::{normal, trunc_normal, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
const LN_EPS: f64 = 1e-5;
/// Additive logit for token pairs from different regions of a wrapped window.
const MASK_LOGIT: f64 = -100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfemConfig {
    pub patch_size: usize,
    pub input_channels: usize,
    pub embed_dim: usize,
    pub stage_depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub rng_seed: u64,
    pub frozen: bool,
}

impl Default for GfemConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            input_channels: 3,
            embed_dim: 96,
            stage_depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 4,
            mlp_ratio: 4,
            rng_seed: 0,
            frozen: true,
        }
    }
}

impl GfemConfig {
    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths != [2, 2, 6, 2] {
            return Err(Error::Config(format!("gfem stage depths must be [2, 2, 6, 2], got {:?}", self.stage_depths)));
        }
        if self.patch_size != 4 || self.input_channels != 3 {
            return Err(Error::Config("gfem patch partition is fixed at 4×4×3".into()));
        }
        if self.window_size < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("gfem window_size ≥ 2 and mlp_ratio ≥ 1 required".into()));
        }
        for (s, &h) in self.num_heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return Err(Error::Config(format!(
                    "gfem stage {} width {} not divisible by {h} heads",
                    s + 1,
                    self.stage_dim(s)
                )));
            }
        }
        Ok(())
    }

    /// Token width of stage `s` (zero-based).
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.input_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfemWeights<T> {
    pub config: GfemConfig,
    /// Every name starts with `gfem.`.
    pub params: ParamStore<T>,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("gfem.stage{}.block{}", stage + 1, block + 1)
}

fn merge_prefix(stage: usize) -> String {
    format!("gfem.stage{}.merge", stage + 1)
}

pub fn init_gfem<T: Scalar>(config: &GfemConfig) -> Result<GfemWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut p = ParamStore::new();
    let std = 0.02;
    let pd = config.patch_dim();
    let e = config.embed_dim;
    p.insert("gfem.patch_embed.weight", normal(&[e, pd], (1.0 / pd as f64).sqrt(), &mut rng));
    p.insert("gfem.patch_embed.bias", Tensor::zeros(&[e]));
    p.insert("gfem.patch_embed.norm.gamma", Tensor::ones(&[e]));
    p.insert("gfem.patch_embed.norm.beta", Tensor::zeros(&[e]));
    let rel = (2 * config.window_size - 1).pow(2);
    for s in 0..NUM_STAGES {
        let c = config.stage_dim(s);
        let hidden = c * config.mlp_ratio;
        for b in 0..config.stage_depths[s] {
            let pre = block_prefix(s, b);
            for norm in ["norm1", "norm2"] {
                p.insert(format!("{pre}.{norm}.gamma"), Tensor::ones(&[c]));
                p.insert(format!("{pre}.{norm}.beta"), Tensor::zeros(&[c]));
            }
            p.insert(format!("{pre}.attn.qkv.weight"), trunc_normal(&[3 * c, c], std, &mut rng));
            p.insert(format!("{pre}.attn.qkv.bias"), Tensor::zeros(&[3 * c]));
            p.insert(format!("{pre}.attn.proj.weight"), trunc_normal(&[c, c], std, &mut rng));
            p.insert(format!("{pre}.attn.proj.bias"), Tensor::zeros(&[c]));
            p.insert(
                format!("{pre}.attn.rel_bias"),
                trunc_normal(&[rel, config.num_heads[s]], std, &mut rng),
            );
            p.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&[hidden, c], std, &mut rng));
            p.insert(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            p.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&[c, hidden], std, &mut rng));
            p.insert(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[c]));
        }
        if s + 1 < NUM_STAGES {
            let pre = merge_prefix(s);
            p.insert(format!("{pre}.norm.gamma"), Tensor::ones(&[4 * c]));
            p.insert(format!("{pre}.norm.beta"), Tensor::zeros(&[4 * c]));
            p.insert(format!("{pre}.reduction.weight"), trunc_normal(&[2 * c, 4 * c], std, &mut rng));
        }
    }
    Ok(GfemWeights {
        config: config.clone(),
        params: p,
    })
}

impl<T: Scalar> GfemWeights<T> {
    pub fn cast<U: Scalar>(&self) -> GfemWeights<U> {
        GfemWeights {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Window extent and shift actually used on an `h × w` grid: a grid no
/// larger than one window gets a single unshifted window.
pub fn window_layout(h: usize, w: usize, window_size: usize, shifted: bool) -> (usize, usize) {
    let m = h.min(w);
    if m <= window_size {
        (m, 0)
    } else {
        (window_size, if shifted { window_size / 2 } else { 0 })
    }
}

/// Four stage outputs, each `[n, h_s, w_s, c_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeaturePyramid<T> {
    pub stages: Vec<Tensor<T>>,
}

/// Graph-level evaluation of the extractor.
pub struct GfemPass<'w, T> {
    weights: &'w GfemWeights<T>,
    bound: Bound<T>,
}

impl<'w, T: Scalar> GfemPass<'w, T> {
    /// Frozen weights are bound as constants, so no gradient reaches them.
    pub fn new(g: &mut Graph<T>, weights: &'w GfemWeights<T>) -> Self {
        Self {
            weights,
            bound: weights.params.bind(g, !weights.config.frozen),
        }
    }

    pub fn bound(&self) -> &Bound<T> {
        &self.bound
    }

    fn p(&self, name: &str) -> Result<&Var<T>> {
        self.bound.get(name)
    }

    /// `[n, 1, h, w]` image to a `[n, h/4, w/4, embed_dim]` token grid after
    /// reflect padding to a multiple of the patch size.
    pub fn patch_embed(&mut self, g: &mut Graph<T>, image: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = match image.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("gfem input must be [n, 1, h, w], got {s:?}"))),
        };
        if c != 1 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("gfem input must be single-channel, got {:?}", image.shape())));
        }
        let cfg = &self.weights.config;
        let m = cfg.patch_size;
        let (gh, gw) = (h.div_ceil(m), w.div_ceil(m));
        let pd = cfg.patch_dim();
        let mut index = Vec::with_capacity(n * gh * gw * pd);
        for b in 0..n {
            for py in 0..gh {
                for px in 0..gw {
                    // (channel, dy, dx) order; the channels are replicas.
                    for _ in 0..cfg.input_channels {
                        for dy in 0..m {
                            let y = reflect_index((py * m + dy) as isize, h);
                            for dx in 0..m {
                                let x = reflect_index((px * m + dx) as isize, w);
                                index.push((b * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
        let patches = g.gather(image, Arc::new(index), &[n, gh, gw, pd])?;
        let y = g.linear(
            &patches,
            self.p("gfem.patch_embed.weight")?,
            Some(self.p("gfem.patch_embed.bias")?),
        )?;
        g.layer_norm(
            &y,
            self.p("gfem.patch_embed.norm.gamma")?,
            self.p("gfem.patch_embed.norm.beta")?,
            T::of(LN_EPS),
        )
    }

    /// Residual windowed attention followed by a residual MLP on a
    /// `[n, h, w, c]` grid. Also returns the attention probabilities,
    /// `[n · windows · heads, t, t]`.
    pub fn attention_block_with_probs(
        &mut self,
        g: &mut Graph<T>,
        x: &Var<T>,
        stage: usize,
        block: usize,
        shifted: bool,
    ) -> Result<(Var<T>, Var<T>)> {
        let (n, h, w, c) = match x.shape() {
            [n, h, w, c] => (*n, *h, *w, *c),
            s => return Err(Error::Shape(format!("token grid must be [n, h, w, c], got {s:?}"))),
        };
        let cfg = &self.weights.config;
        if stage >= NUM_STAGES || block >= cfg.stage_depths[stage] || c != cfg.stage_dim(stage) {
            return Err(Error::Shape(format!(
                "block ({stage}, {block}) cannot take width {c}"
            )));
        }
        let heads = cfg.num_heads[stage];
        let full_ws = cfg.window_size;
        let pre = block_prefix(stage, block);
        let eps = T::of(LN_EPS);

        let normed = g.layer_norm(x, self.p(&format!("{pre}.norm1.gamma"))?, self.p(&format!("{pre}.norm1.beta"))?, eps)?;
        let (ws, shift) = window_layout(h, w, full_ws, shifted);
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let (nwy, nwx) = (hp / ws, wp / ws);
        let nw = nwy * nwx;
        let t = ws * ws;
        let bw = n * nw;

        // Partition into windows of the cyclically shifted, zero-padded grid.
        let mut index = Vec::with_capacity(bw * t * c);
        for b in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..ws {
                        for tx in 0..ws {
                            let sy = (wy * ws + ty + shift) % hp;
                            let sx = (wx * ws + tx + shift) % wp;
                            for ch in 0..c {
                                index.push(if sy < h && sx < w {
                                    ((b * h + sy) * w + sx) * c + ch
                                } else {
                                    ZERO_FILL
                                });
                            }
                        }
                    }
                }
            }
        }
        let windows = g.gather(&normed, Arc::new(index), &[bw, t, c])?;

        let qkv = g.linear(
            &windows,
            self.p(&format!("{pre}.attn.qkv.weight"))?,
            Some(self.p(&format!("{pre}.attn.qkv.bias"))?),
        )?;
        let hd = c / heads;
        let split = |part: usize| {
            let mut idx = Vec::with_capacity(bw * heads * t * hd);
            for b in 0..bw {
                for hh in 0..heads {
                    for tt in 0..t {
                        for d in 0..hd {
                            idx.push((b * t + tt) * 3 * c + part * c + hh * hd + d);
                        }
                    }
                }
            }
            Arc::new(idx)
        };
        let q = g.gather(&qkv, split(0), &[bw * heads, t, hd])?;
        let k = g.gather(&qkv, split(1), &[bw * heads, t, hd])?;
        let v = g.gather(&qkv, split(2), &[bw * heads, t, hd])?;
        let q = g.scale(&q, T::of(1.0 / (hd as f64).sqrt()));
        let logits = g.bmm(&q, &k, true)?;

        // Relative position bias [heads, t, t], indexed from the full table.
        let table = self.p(&format!("{pre}.attn.rel_bias"))?;
        let span = 2 * full_ws - 1;
        let mut bidx = Vec::with_capacity(heads * t * t);
        for hh in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let dy = (i / ws) as isize - (j / ws) as isize + full_ws as isize - 1;
                    let dx = (i % ws) as isize - (j % ws) as isize + full_ws as isize - 1;
                    bidx.push((dy as usize * span + dx as usize) * heads + hh);
                }
            }
        }
        let bias = g.gather(table, Arc::new(bidx), &[heads, t, t])?;
        let mut logits = g.add_tiled(&logits, &bias)?;
        if shift > 0 {
            let mask = shift_mask::<T>(hp, wp, ws, shift, heads);
            logits = g.add_tiled(&logits, &Var::constant(mask))?;
        }
        let probs = g.softmax(&logits)?;
        let attn = g.bmm(&probs, &v, false)?;

        let mut midx = Vec::with_capacity(bw * t * c);
        for b in 0..bw {
            for tt in 0..t {
                for hh in 0..heads {
                    for d in 0..hd {
                        midx.push(((b * heads + hh) * t + tt) * hd + d);
                    }
                }
            }
        }
        let merged = g.gather(&attn, Arc::new(midx), &[bw, t, c])?;
        let proj = g.linear(
            &merged,
            self.p(&format!("{pre}.attn.proj.weight"))?,
            Some(self.p(&format!("{pre}.attn.proj.bias"))?),
        )?;

        // Undo the partition and shift, dropping padding.
        let mut ridx = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for y in 0..h {
                let py = (y + hp - shift) % hp;
                for xx in 0..w {
                    let px = (xx + wp - shift) % wp;
                    let win = b * nw + (py / ws) * nwx + px / ws;
                    let tok = (py % ws) * ws + px % ws;
                    for ch in 0..c {
                        ridx.push((win * t + tok) * c + ch);
                    }
                }
            }
        }
        let restored = g.gather(&proj, Arc::new(ridx), &[n, h, w, c])?;
        let x1 = g.add(x, &restored)?;

        let n2 = g.layer_norm(&x1, self.p(&format!("{pre}.norm2.gamma"))?, self.p(&format!("{pre}.norm2.beta"))?, eps)?;
        let hdn = g.linear(
            &n2,
            self.p(&format!("{pre}.mlp.fc1.weight"))?,
            Some(self.p(&format!("{pre}.mlp.fc1.bias"))?),
        )?;
        let hdn = g.gelu(&hdn);
        let out = g.linear(
            &hdn,
            self.p(&format!("{pre}.mlp.fc2.weight"))?,
            Some(self.p(&format!("{pre}.mlp.fc2.bias"))?),
        )?;
        Ok((g.add(&x1, &out)?, probs))
    }

    pub fn attention_block(&mut self, g: &mut Graph<T>, x: &Var<T>, stage: usize, block: usize, shifted: bool) -> Result<Var<T>> {
        self.attention_block_with_probs(g, x, stage, block, shifted).map(|(y, _)| y)
    }

    /// 2×2 neighbourhood concatenation, normalization and projection to
    /// twice the width; odd grids are zero-padded.
    pub fn patch_merging(&mut self, g: &mut Graph<T>, x: &Var<T>, stage: usize) -> Result<Var<T>> {
        let (n, h, w, c) = match x.shape() {
            [n, h, w, c] => (*n, *h, *w, *c),
            s => return Err(Error::Shape(format!("token grid must be [n, h, w, c], got {s:?}"))),
        };
        if stage + 1 >= NUM_STAGES || c != self.weights.config.stage_dim(stage) {
            return Err(Error::Shape(format!("no merge after stage {} for width {c}", stage + 1)));
        }
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut index = Vec::with_capacity(n * oh * ow * 4 * c);
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        for ch in 0..c {
                            index.push(if sy < h && sx < w {
                                ((b * h + sy) * w + sx) * c + ch
                            } else {
                                ZERO_FILL
                            });
                        }
                    }
                }
            }
        }
        let cat = g.gather(x, Arc::new(index), &[n, oh, ow, 4 * c])?;
        let pre = merge_prefix(stage);
        let normed = g.layer_norm(
            &cat,
            self.p(&format!("{pre}.norm.gamma"))?,
            self.p(&format!("{pre}.norm.beta"))?,
            T::of(LN_EPS),
        )?;
        g.linear(&normed, self.p(&format!("{pre}.reduction.weight"))?, None)
    }

    /// Four stage outputs; stage s is taken after its blocks, before merging.
    pub fn forward(&mut self, g: &mut Graph<T>, image: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut x = self.patch_embed(g, image)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            if s > 0 {
                x = self.patch_merging(g, &x, s - 1)?;
            }
            for b in 0..self.weights.config.stage_depths[s] {
                x = self.attention_block(g, &x, s, b, b % 2 == 1)?;
            }
            stages.push(x.clone());
        }
        Ok(stages)
    }
}

/// `[windows, heads, t, t]` additive mask: pairs from different regions of
/// the shifted grid get [`MASK_LOGIT`].
fn shift_mask<T: Scalar>(hp: usize, wp: usize, ws: usize, shift: usize, heads: usize) -> Tensor<T> {
    let region = |i: usize, n: usize| {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (hp / ws, wp / ws);
    let t = ws * ws;
    let mut data = Vec::with_capacity(nwy * nwx * heads * t * t);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..t)
                .map(|k| region(wy * ws + k / ws, hp) * 3 + region(wx * ws + k % ws, wp))
                .collect();
            for _ in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        data.push(if labels[i] == labels[j] { T::zero() } else { T::of(MASK_LOGIT) });
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nwy * nwx, heads, t, t], data)
}

/// Token grid from one image, evaluated eagerly.
pub fn patch_embed<T: Scalar>(weights: &GfemWeights<T>, image: &NormalizedImage<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = GfemPass::new(&mut g, weights);
    let x = Var::constant(image.to_symmetric().to_tensor());
    Ok(pass.patch_embed(&mut g, &x)?.value().clone())
}

/// One block on a `[n, h, w, c]` grid, evaluated eagerly.
pub fn attention_block<T: Scalar>(
    weights: &GfemWeights<T>,
    tokens: &Tensor<T>,
    stage: usize,
    block: usize,
    shifted: bool,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = GfemPass::new(&mut g, weights);
    let y = pass.attention_block(&mut g, &Var::constant(tokens.clone()), stage, block, shifted)?;
    Ok(y.value().clone())
}

pub fn patch_merging<T: Scalar>(weights: &GfemWeights<T>, tokens: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = GfemPass::new(&mut g, weights);
    Ok(pass.patch_merging(&mut g, &Var::constant(tokens.clone()), stage)?.value().clone())
}

pub fn gfem_forward<T: Scalar>(weights: &GfemWeights<T>, image: &NormalizedImage<T>) -> Result<GlobalFeaturePyramid<T>> {
    let mut g = Graph::new();
    let mut pass = GfemPass::new(&mut g, weights);
    let stages = pass.forward(&mut g, &Var::constant(image.to_symmetric().to_tensor()))?;
    Ok(GlobalFeaturePyramid {
        stages: stages.iter().map(|s| s.value().clone()).collect(),
    })
}
