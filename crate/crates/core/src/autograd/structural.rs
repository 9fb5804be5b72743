//! Index-driven data movement: gathers (permutations, padding, window
//! partitioning) and concatenation.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marks an output slot of [`Graph::gather`] that is filled with zero.
pub const ZERO_FILL: usize = usize::MAX;

/// Mirror-reflects `i` into `0..n` without repeating the edge sample;
/// collapses to 0 when `n == 1`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

impl<T: Scalar> Graph<T> {
    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_FILL`. The
    /// backward pass scatter-adds, so repeated indices are allowed.
    pub fn gather(&mut self, x: &Var<T>, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
        let len: usize = out_shape.iter().product();
        if len != index.len() {
            return Err(Error::Shape(format!(
                "gather: index of length {} for output {out_shape:?}",
                index.len()
            )));
        }
        let src = x.value().data();
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO_FILL && i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of bounds for {:?}",
                x.shape()
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO_FILL { T::zero() } else { src[i] })
            .collect();
        let out = Arc::new(Tensor::from_parts(out_shape.to_vec(), data));
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                if i != ZERO_FILL {
                    d[i] += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();

        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let block = e * inner;
                data.extend_from_slice(&p.value().data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Arc::new(Tensor::from_parts(shape, data));
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(self.record(out, parts, move |g, needs| {
            let mut grads: Vec<Vec<T>> = extents
                .iter()
                .zip(needs)
                .map(|(&e, &n)| if n { Vec::with_capacity(outer * e * inner) } else { Vec::new() })
                .collect();
            let src = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &e) in extents.iter().enumerate() {
                    let block = e * inner;
                    if needs[k] {
                        grads[k].extend_from_slice(&src[pos..pos + block]);
                    }
                    pos += block;
                }
            }
            grads
                .into_iter()
                .zip(shapes)
                .zip(needs)
                .map(|((d, s), &n)| n.then(|| Tensor::from_parts(s, d)))
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(5, 2), 1);
        assert_eq!(reflect_index(-2, 1), 0);
    }

    #[test]
    fn gather_supports_padding_and_repeats() {
        let mut g = Graph::<f64>::new();
        let x = Var::constant(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let y = g
            .gather(&x, Arc::new(vec![2, ZERO_FILL, 0, 2]), &[2, 2])
            .unwrap();
        assert_eq!(y.value().data(), &[3.0, 0.0, 1.0, 3.0]);
        assert!(g.gather(&x, Arc::new(vec![5]), &[1]).is_err());
    }

    #[test]
    fn gather_backward_scatter_adds() {
        let x = Tensor::from_fn(&[4], |i| (i as f64).cos());
        check_gradients(&[x], 1e-6, 1e-7, |g, v| {
            let y = g.gather(&v[0], Arc::new(vec![1, 1, 3, ZERO_FILL, 0]), &[5])?;
            let w = Var::constant(Tensor::from_fn(&[5], |i| i as f64 + 0.5));
            let p = g.mul(&y, &w)?;
            Ok(g.sum(&p))
        });
    }

    #[test]
    fn concat_middle_axis_layout_and_gradient() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64);
        let mut g = Graph::new();
        let c = g
            .concat(&[&Var::constant(a.clone()), &Var::constant(b.clone())], 1)
            .unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(&c.value().data()[..6], &[0.0, 1.0, 2.0, 100.0, 101.0, 102.0]);
        assert_eq!(&c.value().data()[9..12], &[3.0, 4.0, 5.0]);

        check_gradients(&[a, b], 1e-6, 1e-7, |g, v| {
            let c = g.concat(&[&v[0], &v[1]], 1)?;
            let w = Var::constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin()));
            let p = g.mul(&c, &w)?;
            Ok(g.sum(&p))
        });
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut g = Graph::<f32>::new();
        let a = Var::constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = Var::constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(g.concat(&[&a, &b], 1).is_err());
    }
}
