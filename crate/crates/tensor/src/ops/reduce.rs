use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::shape::split_axis;
use crate::scalar::Float;
use crate::tensor::Tensor;

impl<T: Float> Graph<T> {
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record("sum_all", &[x], out, |args| {
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))])
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).numel().max(1)).expect("count");
        let out = Tensor::scalar(self.value(x).sum() / n);
        self.record("mean_all", &[x], out, move |args| {
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item() / n))])
        })
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&mut self, op: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(op, &shape, axis)?;
        let scale = if mean {
            T::one() / T::from_usize(len.max(1)).expect("len")
        } else {
            T::one()
        };
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_vec(out_shape, out)?;
        self.record(op, &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                }
            }
            Ok(vec![Some(Tensor::from_vec(shape.clone(), gx)?)])
        })
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("cumsum", &shape, axis)?;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for l in 1..len {
                for i in 0..inner {
                    let prev = d[(o * len + l - 1) * inner + i];
                    d[(o * len + l) * inner + i] += prev;
                }
            }
        }
        self.record("cumsum", &[x], out, move |args| {
            // reverse cumulative sum
            let mut gx = args.grad.clone();
            let d = gx.data_mut();
            for o in 0..outer {
                for l in (0..len.saturating_sub(1)).rev() {
                    for i in 0..inner {
                        let next = d[(o * len + l + 1) * inner + i];
                        d[(o * len + l) * inner + i] += next;
                    }
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let mut out = self.value(x).clone();
        softmax_in_place(out.data_mut(), outer, len, inner);
        self.record("softmax", &[x], out, move |args| {
            let (g, y) = (args.grad.data(), args.output.data());
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(shape.clone(), gx)?)])
        })
    }
}

pub(crate) fn softmax_in_place<T: Float>(d: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| d[at(l)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for l in 0..len {
                let e = (d[at(l)] - m).exp();
                d[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                d[at(l)] /= z;
            }
        }
    }
}
