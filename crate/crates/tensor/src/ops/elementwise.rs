use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::{check_same_shape, Tensor};

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", &[a, b], out, |args| {
            Ok(vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.clone()),
            ])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", &[a, b], out, |args| {
            Ok(vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.map(|g| -g)),
            ])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", &[a, b], out, |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            Ok(vec![
                args.needs[0].then(|| zip_map(args.grad, b, |g, y| g * y)),
                args.needs[1].then(|| zip_map(args.grad, a, |g, x| g * x)),
            ])
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.record("scale", &[a], out, move |args| Ok(vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        self.record("add_scalar", &[a], out, |args| Ok(vec![Some(args.grad.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.record("relu", &[a], out, |args| {
            Ok(vec![Some(zip_map(args.grad, args.output, |g, y| {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }))])
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record("sigmoid", &[a], out, |args| {
            Ok(vec![Some(zip_map(args.grad, args.output, |g, y| g * y * (T::one() - y)))])
        })
    }

    /// Adds a per-channel bias `b[C]` to `x[N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.len() < 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: xs,
                rhs: bs,
            });
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let v = bias[i % c];
            chunk.iter_mut().for_each(|o| *o += v);
        }
        self.record("bias_add", &[x, b], out, move |args| {
            let gb = args.needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for (i, chunk) in args.grad.data().chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().copied().sum::<T>();
                }
                Tensor::from_vec([c], gb).expect("bias shape")
            });
            Ok(vec![args.needs[0].then(|| args.grad.clone()), gb])
        })
    }

    /// Outer-broadcast multiply: `a[N, D, S...]` and `b[N, C, S...]` give
    /// `out[N, D, S..., C] = a[N, D, S...] * b[N, C, S...]`.
    ///
    /// This is the only broadcasting op in the engine.
    pub fn outer_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "outer_mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d, c) = (sa[0], sa[1], sb[1]);
        let s: usize = sa[2..].iter().product();
        let mut shape = sa.clone();
        shape.push(c);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * d * s * c];
        for ni in 0..n {
            for di in 0..d {
                for si in 0..s {
                    let alpha = av[(ni * d + di) * s + si];
                    let base = ((ni * d + di) * s + si) * c;
                    for ci in 0..c {
                        out[base + ci] = alpha * bv[(ni * c + ci) * s + si];
                    }
                }
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        self.record("outer_mul", &[a, b], out, move |args| {
            let (av, bv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let ga = args.needs[0].then(|| {
                let mut ga = vec![T::zero(); n * d * s];
                for ni in 0..n {
                    for di in 0..d {
                        for si in 0..s {
                            let base = ((ni * d + di) * s + si) * c;
                            let mut acc = T::zero();
                            for ci in 0..c {
                                acc += g[base + ci] * bv[(ni * c + ci) * s + si];
                            }
                            ga[(ni * d + di) * s + si] = acc;
                        }
                    }
                }
                Tensor::from_vec(args.inputs[0].shape(), ga).expect("shape")
            });
            let gb = args.needs[1].then(|| {
                let mut gb = vec![T::zero(); n * c * s];
                for ni in 0..n {
                    for di in 0..d {
                        for si in 0..s {
                            let alpha = av[(ni * d + di) * s + si];
                            let base = ((ni * d + di) * s + si) * c;
                            for ci in 0..c {
                                gb[(ni * c + ci) * s + si] += g[base + ci] * alpha;
                            }
                        }
                    }
                }
                Tensor::from_vec(args.inputs[1].shape(), gb).expect("shape")
            });
            Ok(vec![ga, gb])
        })
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
