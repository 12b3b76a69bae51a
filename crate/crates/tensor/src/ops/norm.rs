use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate, ready to blend into running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

fn check_affine<T: Float>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    let xs = g.shape(x).to_vec();
    if xs.len() < 2 || g.shape(gamma) != [xs[1]] || g.shape(beta) != [xs[1]] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: xs,
            rhs: g.shape(gamma).to_vec(),
        });
    }
    let inner: usize = xs[2..].iter().product();
    Ok((xs[0], xs[1], inner, xs))
}

impl<T: Float> Graph<T> {
    /// Normalises `x[N, C, ...]` with the statistics of this batch, then
    /// applies `gamma * x̂ + beta` per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner, shape) = check_affine(self, x, gamma, beta)?;
        let count = n * inner;
        if count < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("training statistics need at least 2 values per channel, got {:?}", shape),
            ));
        }
        let eps = T::of(eps);
        let cnt = T::from_usize(count).expect("count");
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let s: T = xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner].iter().copied().sum();
                mean[ci] += s;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for ni in 0..n {
            for ci in 0..c {
                let m = mean[ci];
                let s: T = xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum();
                var[ci] += s;
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let unbiased = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
        let stats = BatchStats {
            mean: Tensor::from_vec([c], mean)?,
            var: Tensor::from_vec([c], var.iter().map(|&v| v * unbiased).collect())?,
        };
        let out = Tensor::from_vec(shape, out)?;
        let v = self.record("batch_norm_train", &[x, gamma, beta], out, move |args| {
            let g = args.grad.data();
            let gamma = args.inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                        sum_g[ci] += g[i];
                        sum_gx[ci] += g[i] * xhat[i];
                    }
                }
            }
            let gx = args.needs[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let (mg, mgx) = (sum_g[ci] / cnt, sum_gx[ci] / cnt);
                        let k = gamma[ci] * inv_std[ci];
                        for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                            gx[i] = k * (g[i] - mg - xhat[i] * mgx);
                        }
                    }
                }
                Tensor::from_vec(args.inputs[0].shape(), gx).expect("shape")
            });
            Ok(vec![
                gx,
                args.needs[1].then(|| Tensor::from_vec([c], sum_gx.clone()).expect("shape")),
                args.needs[2].then(|| Tensor::from_vec([c], sum_g.clone()).expect("shape")),
            ])
        })?;
        Ok((v, stats))
    }

    /// Inference-mode normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, inner, shape) = check_affine(self, x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: shape,
                rhs: running_mean.shape().to_vec(),
            });
        }
        let eps = T::of(eps);
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                    out[i] = gv[ci] * (xv[i] - mean[ci]) * inv_std[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        self.record("batch_norm_eval", &[x, gamma, beta], out, move |args| {
            let (g, xv, gamma) = (args.grad.data(), args.inputs[0].data(), args.inputs[1].data());
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                        let h = (xv[i] - mean[ci]) * inv_std[ci];
                        gx[i] = g[i] * gamma[ci] * inv_std[ci];
                        gg[ci] += g[i] * h;
                        gb[ci] += g[i];
                    }
                }
            }
            Ok(vec![
                args.needs[0].then(|| Tensor::from_vec(args.inputs[0].shape(), gx).expect("shape")),
                args.needs[1].then(|| Tensor::from_vec([c], gg).expect("shape")),
                args.needs[2].then(|| Tensor::from_vec([c], gb).expect("shape")),
            ])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalised_batch_has_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
        assert!((v.iter().map(|a| a * a).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert_eq!(stats.mean.data(), &[2.5]);
        assert!((stats.var.data()[0] - 5.0 / 3.0).abs() < 1e-12);
    }
}
