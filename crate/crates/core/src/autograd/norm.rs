//! Batch and layer normalization.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training batch (variance is biased).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn channel_layout<T: Scalar>(x: &Var<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        s => Err(Error::Shape(format!("batch_norm needs [n, c, ...], got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Normalizes channel axis 1 of `x`, then applies `gamma`/`beta`.
    pub fn batch_norm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        let (n, c, inner) = channel_layout(x)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: affine params {:?}/{:?} for {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        let count = n * inner;
        let xs = x.value().data();
        let at = move |b: usize, ch: usize| (b * c + ch) * inner;

        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count == 0 {
                    return Err(Error::Shape("batch_norm on empty batch".into()));
                }
                let m = T::of(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xs[at(b, ch)..at(b, ch) + inner].iter().copied().sum::<T>();
                    }
                    mean[ch] = s / m;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xv in &xs[at(b, ch)..at(b, ch) + inner] {
                            let d = xv - mean[ch];
                            v += d * d;
                        }
                    }
                    var[ch] = v / m;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm: running stats length".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let train = stats.is_some();
        let istd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let (gs, bs) = (gamma.value().data(), beta.value().data());
        for b in 0..n {
            for ch in 0..c {
                let r = at(b, ch)..at(b, ch) + inner;
                for ((h, o), &xv) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xs[r]) {
                    *h = (xv - mean[ch]) * istd[ch];
                    *o = gs[ch] * *h + bs[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Arc::new(Tensor::from_parts(shape.clone(), out));
        let gv = gamma.shared();
        let var_out = self.record(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let r = at(b, ch)..at(b, ch) + inner;
                    for (&gv, &h) in gd[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ch] += gv * h;
                        dbeta[ch] += gv;
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                let m = T::of(count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let scale = gv.data()[ch] * istd[ch];
                        let r = at(b, ch)..at(b, ch) + inner;
                        for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                            *d = if train {
                                scale * (gv - (dbeta[ch] + h * dgamma[ch]) / m)
                            } else {
                                scale * gv
                            };
                        }
                    }
                }
                Tensor::from_parts(shape, dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        });
        Ok((var_out, stats))
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: affine params {:?} for width {d}",
                gamma.shape()
            )));
        }
        let dt = T::of(d as f64);
        let xs = x.value().data();
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut istd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        let (gs, bs) = (gamma.value().data(), beta.value().data());
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            istd[r] = T::one() / (var + eps).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * istd[r];
                xhat[r * d + j] = h;
                out[r * d + j] = gs[j] * h + bs[j];
            }
        }
        let shape = x.shape().to_vec();
        let out = Arc::new(Tensor::from_parts(shape.clone(), out));
        let gv = gamma.shared();
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gs = gv.data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = needs[0].then(|| vec![T::zero(); gd.len()]);
            for r in 0..rows {
                let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..d {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    let dh = gr[j] * gs[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    for j in 0..d {
                        let dh = gr[j] * gs[j];
                        dx[r * d + j] = istd[r] * (dh - (sum_dh + hr[j] * sum_dh_h) / dt);
                    }
                }
            }
            vec![
                dx.map(|v| Tensor::from_parts(shape, v)),
                needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
            ]
        }))
    }
}
