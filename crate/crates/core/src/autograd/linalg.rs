//! Dense layers, batched matrix products and softmax.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Applies `y = x W^T + b` over the last axis: `x: [.., in]`,
    /// `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (&din, lead) = x
            .shape()
            .split_last()
            .ok_or_else(|| Error::Shape("linear on rank-0".into()))?;
        let (dout, win) = match weight.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight shape {s:?}"))),
        };
        if win != din {
            return Err(Error::Shape(format!(
                "linear: input width {din}, weight expects {win}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::Shape(format!("linear bias shape {:?}", b.shape())));
            }
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            x.value().data(),
            (din as isize, 1),
            weight.value().data(),
            (1, din as isize),
            T::zero(),
            &mut out,
            (dout as isize, 1),
        );
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(b.value().data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(dout);
        let out = Arc::new(Tensor::from_parts(shape, out));
        let (xv, wv) = (x.shared(), weight.shared());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(out, &parents, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(
                    rows,
                    dout,
                    din,
                    T::one(),
                    gd,
                    (dout as isize, 1),
                    wv.data(),
                    (din as isize, 1),
                    T::zero(),
                    &mut dx,
                    (din as isize, 1),
                );
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(
                    dout,
                    rows,
                    din,
                    T::one(),
                    gd,
                    (1, dout as isize),
                    xv.data(),
                    (din as isize, 1),
                    T::zero(),
                    &mut dw,
                    (din as isize, 1),
                );
                Tensor::from_parts(vec![dout, din], dw)
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::from_parts(vec![dout], db)
                }));
            }
            grads
        }))
    }

    /// Batched product `a: [b, m, k]` times `b: [b, k, n]`, or times the
    /// transpose of `b: [b, n, k]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
        let (batch, m, k) = match a.shape() {
            [bt, m, k] => (*bt, *m, *k),
            s => return Err(Error::Shape(format!("bmm lhs shape {s:?}"))),
        };
        let (n, bk) = match (b.shape(), transpose_b) {
            ([bt, n, kk], true) if *bt == batch => (*n, *kk),
            ([bt, kk, n], false) if *bt == batch => (*n, *kk),
            (s, _) => return Err(Error::Shape(format!("bmm rhs shape {s:?} for lhs {:?}", a.shape()))),
        };
        if bk != k {
            return Err(Error::Shape(format!("bmm inner extents {k} vs {bk}")));
        }
        // strides of the (k x n) view of one rhs matrix
        let b_view = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (a.value().data(), b.value().data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..],
                (k as isize, 1),
                &bd[i * k * n..],
                b_view,
                T::zero(),
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let out = Arc::new(Tensor::from_parts(vec![batch, m, n], out));
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                // dA = dC * B^T, with B viewed as (k x n)
                let bt_view = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &gd[i * m * n..],
                        (n as isize, 1),
                        &bv.data()[i * k * n..],
                        bt_view,
                        T::zero(),
                        &mut da[i * m * k..],
                        (k as isize, 1),
                    );
                }
                Tensor::from_parts(av.shape().to_vec(), da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let (ai, gi) = (&av.data()[i * m * k..], &gd[i * m * n..]);
                    if transpose_b {
                        // dB[n, k] = dC^T A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gi,
                            (1, n as isize),
                            ai,
                            (k as isize, 1),
                            T::zero(),
                            &mut db[i * k * n..],
                            (k as isize, 1),
                        );
                    } else {
                        // dB[k, n] = A^T dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            ai,
                            (1, k as isize),
                            gi,
                            (n as isize, 1),
                            T::zero(),
                            &mut db[i * k * n..],
                            (n as isize, 1),
                        );
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), db)
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax on rank-0".into()))?;
        let mut out = x.value().data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Arc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let yv = out.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in dx
                .chunks_mut(d)
                .zip(g.data().chunks(d))
                .zip(yv.data().chunks(d))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = y * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;

    fn t(shape: &[usize], s: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 0.5) * s).sin())
    }

    fn probe(g: &mut Graph<f64>, y: &Var<f64>) -> Result<Var<f64>> {
        let w = Var::constant(Tensor::from_fn(y.shape(), |i| (i as f64 * 0.77).cos()));
        let p = g.mul(y, &w)?;
        Ok(g.sum(&p))
    }

    #[test]
    fn linear_forward_and_gradients() {
        let mut g = Graph::new();
        let x = Var::constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = Var::constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let b = Var::constant(Tensor::new(&[3], vec![0.5, 0.5, 0.5]).unwrap());
        let y = g.linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[1.5, 2.5, 3.5]);

        check_gradients(&[t(&[2, 3, 4], 0.3), t(&[5, 4], 0.7), t(&[5], 1.1)], 1e-6, 1e-6, |g, v| {
            let y = g.linear(&v[0], &v[1], Some(&v[2]))?;
            probe(g, &y)
        });
    }

    #[test]
    fn bmm_gradients_plain_and_transposed() {
        for &tb in &[false, true] {
            let b_shape: &[usize] = if tb { &[2, 4, 3] } else { &[2, 3, 4] };
            check_gradients(&[t(&[2, 5, 3], 0.4), t(b_shape, 0.9)], 1e-6, 1e-6, |g, v| {
                let y = g.bmm(&v[0], &v[1], tb)?;
                probe(g, &y)
            });
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradients() {
        let mut g = Graph::new();
        let x = Var::constant(t(&[4, 6], 3.1).map(|v| v * 20.0));
        let y = g.softmax(&x).unwrap();
        for row in y.value().data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        check_gradients(&[t(&[3, 5], 0.6)], 1e-6, 1e-6, |g, v| {
            let y = g.softmax(&v[0])?;
            probe(g, &y)
        });
    }
}
