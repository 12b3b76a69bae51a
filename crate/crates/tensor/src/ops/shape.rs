use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, out).expect("permute shape")
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        self.record("reshape", &[x], out, move |args| {
            Ok(vec![Some(args.grad.clone().reshape(in_shape.clone())?)])
        })
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{:?} is not a permutation of {} axes", axes, rank),
            ));
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_data(self.value(x), axes);
        self.record("permute", &[x], out, move |args| {
            Ok(vec![Some(permute_data(args.grad, &inverse))])
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        split_axis("concat", &first, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        self.record("concat", xs, out, move |args| {
            let g = args.grad.data();
            let mut grads = Vec::with_capacity(lens.len());
            let mut start = 0;
            for (i, &len) in lens.iter().enumerate() {
                if args.needs[i] {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(args.inputs[i].shape(), gi)?));
                } else {
                    grads.push(None);
                }
                start += len;
            }
            Ok(grads)
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis("slice", &shape, axis)?;
        if start + len > full {
            return Err(TensorError::invalid(
                "slice",
                format!("range {}..{} exceeds axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.record("slice", &[x], out, move |args| {
            let mut gx = Tensor::zeros(shape.clone());
            let g = args.grad.data();
            let gd = gx.data_mut();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gd[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Rotates the trailing square axes by `k` quarter turns (see
    /// [`Tensor::rot90`]).
    pub fn rot90(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = self.value(x).rot90(k)?;
        self.record("rot90", &[x], out, move |args| {
            Ok(vec![Some(args.grad.rot90((4 - k % 4) % 4)?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec([2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec([2, 1], vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::from_vec([2, 2], vec![3., 4., 5., 6.]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn permute_rejects_repeated_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([2, 2]));
        assert!(g.permute(x, &[0, 0]).is_err());
    }
}
