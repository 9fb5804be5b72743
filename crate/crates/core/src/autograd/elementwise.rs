//! Pointwise ops, reductions and reshapes.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn erf<T: Scalar>(x: T) -> T {
    T::of(libm::erf(x.to_f64_lossy()))
}

impl<T: Scalar> Graph<T> {
    /// Pointwise op with derivative `df(x, y)` expressed through the input
    /// and the output.
    fn unary<F, D>(&mut self, x: &Var<T>, f: F, df: D) -> Var<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = Arc::new(x.value().map(f));
        let xv = x.shared();
        let yv = out.clone();
        self.record(out, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "add")?;
        let out = Arc::new(a.value().zip_map(b.value(), |x, y| x + y)?);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "sub")?;
        let out = Arc::new(a.value().zip_map(b.value(), |x, y| x - y)?);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "mul")?;
        let out = Arc::new(a.value().zip_map(b.value(), |x, y| x * y)?);
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, b| g * b).expect("shape")),
                needs[1].then(|| g.zip_map(&av, |g, a| g * a).expect("shape")),
            ]
        }))
    }

    pub fn div(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "div")?;
        let out = Arc::new(a.value().zip_map(b.value(), |x, y| x / y)?);
        let (bv, yv) = (b.shared(), out.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = g.zip_map(&bv, |g, b| g / b).expect("shape");
            let gb = needs[1].then(|| ga.zip_map(&yv, |ga, y| -ga * y).expect("shape"));
            vec![needs[0].then_some(ga), gb]
        }))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: &Var<T>, scale: T, shift: T) -> Var<T> {
        self.unary(x, |v| scale * v + shift, move |_, _| scale)
    }

    pub fn scale(&mut self, x: &Var<T>, s: T) -> Var<T> {
        self.affine(x, s, T::zero())
    }

    pub fn square(&mut self, x: &Var<T>) -> Var<T> {
        let two = T::of(2.0);
        self.unary(x, |v| v * v, move |x, _| two * x)
    }

    /// Square root of a non-negative input; the derivative at zero is taken
    /// as zero.
    pub fn sqrt(&mut self, x: &Var<T>) -> Var<T> {
        let half = T::of(0.5);
        self.unary(
            x,
            |v| v.max(T::zero()).sqrt(),
            move |_, y| if y > T::zero() { half / y } else { T::zero() },
        )
    }

    /// Absolute value with zero subgradient at the origin.
    pub fn abs(&mut self, x: &Var<T>) -> Var<T> {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: &Var<T>) -> Var<T> {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Exact (erf based) GELU.
    pub fn gelu(&mut self, x: &Var<T>) -> Var<T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            x,
            move |v| half * v * (T::one() + erf(v * inv_sqrt2)),
            move |x, _| {
                half * (T::one() + erf(x * inv_sqrt2)) + x * (-half * x * x).exp() * inv_sqrt_2pi
            },
        )
    }

    /// `sqrt(a^2 + b^2)` with zero gradient where both inputs vanish.
    pub fn hypot(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape(a, b, "hypot")?;
        let out = Arc::new(a.value().zip_map(b.value(), |x, y| (x * x + y * y).sqrt())?);
        let (av, bv, yv) = (a.shared(), b.shared(), out.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let part = |src: &Tensor<T>| {
                let data = g
                    .data()
                    .iter()
                    .zip(src.data().iter().zip(yv.data()))
                    .map(|(&g, (&s, &y))| if y > T::zero() { g * s / y } else { T::zero() })
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            vec![needs[0].then(|| part(&av)), needs[1].then(|| part(&bv))]
        }))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let out = Arc::new(Tensor::scalar(x.value().sum()));
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, x: &Var<T>) -> Var<T> {
        let n = T::of(x.value().len() as f64);
        let s = self.sum(x);
        self.scale(&s, T::one() / n)
    }

    /// Sums everything but the leading axis: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("sum_per_sample on rank-0".into()))?;
        let inner = x.value().len() / n.max(1);
        let data = x
            .value()
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Arc::new(Tensor::from_parts(vec![n], data));
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(inner))
                .collect();
            vec![Some(Tensor::from_parts(shape, data))]
        }))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = Arc::new(x.value().clone().reshape(shape)?);
        let original = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(Tensor::from_parts(original, g.data().to_vec()))]
        }))
    }

    /// `a + tile(b)` where `b` is repeated to cover `a` in flat order.
    pub fn add_tiled(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (la, lb) = (a.value().len(), b.value().len());
        if lb == 0 || la % lb != 0 {
            return Err(Error::Shape(format!(
                "add_tiled: {:?} is not a tiling of {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let mut out = a.value().clone();
        for chunk in out.data_mut().chunks_mut(lb) {
            for (o, &v) in chunk.iter_mut().zip(b.value().data()) {
                *o += v;
            }
        }
        let b_shape = b.shape().to_vec();
        Ok(self.record(Arc::new(out), &[a, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = Tensor::zeros(&b_shape);
                for chunk in g.data().chunks(lb) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                acc
            });
            vec![needs[0].then(|| g.clone()), gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;

    fn input(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin() * 1.3)
    }

    #[test]
    fn pointwise_gradients_match_finite_differences() {
        let x = input(&[3, 4], 0.7);
        for which in 0..6 {
            check_gradients(&[x.clone()], 1e-6, 1e-6, |g, v| {
                let y = match which {
                    0 => g.tanh(&v[0]),
                    1 => g.gelu(&v[0]),
                    2 => g.square(&v[0]),
                    3 => g.affine(&v[0], 2.5, -1.0),
                    4 => g.relu(&v[0]),
                    _ => {
                        let s = g.square(&v[0]);
                        let s = g.affine(&s, 1.0, 0.1);
                        g.sqrt(&s)
                    }
                };
                let w = Var::constant(Tensor::from_fn(y.shape(), |i| 0.3 + 0.1 * i as f64));
                let p = g.mul(&y, &w)?;
                Ok(g.sum(&p))
            });
        }
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let a = input(&[2, 5], 0.3);
        let b = input(&[2, 5], 0.9).map(|v| v + 3.0);
        for which in 0..5 {
            check_gradients(&[a.clone(), b.clone()], 1e-6, 1e-6, |g, v| {
                let y = match which {
                    0 => g.add(&v[0], &v[1])?,
                    1 => g.sub(&v[0], &v[1])?,
                    2 => g.mul(&v[0], &v[1])?,
                    3 => g.div(&v[0], &v[1])?,
                    _ => g.hypot(&v[0], &v[1])?,
                };
                let y2 = g.square(&y);
                Ok(g.mean(&y2))
            });
        }
    }

    #[test]
    fn reductions_and_tiling_gradients() {
        let a = input(&[2, 3, 4], 0.4);
        let b = input(&[3, 4], 1.1);
        check_gradients(&[a, b], 1e-6, 1e-6, |g, v| {
            let t = g.add_tiled(&v[0], &v[1])?;
            let t = g.square(&t);
            let s = g.sum_per_sample(&t)?;
            let s = g.sqrt(&s);
            let r = g.reshape(&s, &[1, 2])?;
            Ok(g.sum(&r))
        });
    }

    #[test]
    fn sqrt_and_abs_have_zero_subgradient_at_origin() {
        let mut g = Graph::new();
        let x = g.param_owned(Tensor::<f64>::zeros(&[3]));
        let r = g.sqrt(&x);
        let a = g.abs(&x);
        let s = g.add(&r, &a).unwrap();
        let l = g.sum(&s);
        let grads = g.backward(&l).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::<f32>::new();
        let a = Var::constant(Tensor::ones(&[4]));
        let b = g.tanh(&a);
        assert!(!b.is_tracked());
        assert!(g.is_empty());
    }
}
