use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::elementwise::{sigmoid, softplus};
use crate::scalar::Float;
use crate::tensor::{check_same_shape, Tensor};

impl<T: Float> Graph<T> {
    /// Mean of `pw·t·softplus(-x) + (1-t)·softplus(x)` over all elements.
    ///
    /// `positive_weight` rescales only the positive-target terms.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, positive_weight: f64) -> Result<Var> {
        check_same_shape("bce_with_logits", self.value(logits), target)?;
        if let Some(&bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(TensorError::NonBinaryTarget {
                op: "bce_with_logits",
                value: bad.as_f64(),
            });
        }
        let pw = T::of(positive_weight);
        let n = T::from_usize(target.numel().max(1)).expect("count");
        let xv = self.value(logits).data();
        let total: T = xv
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| pw * t * softplus(-x) + (T::one() - t) * softplus(x))
            .sum();
        let target = target.clone();
        self.record("bce_with_logits", &[logits], Tensor::scalar(total / n), move |args| {
            let scale = args.grad.item() / n;
            let gx = args
                .inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(&x, &t)| scale * (-(pw * t) * sigmoid(-x) + (T::one() - t) * sigmoid(x)))
                .collect();
            Ok(vec![Some(Tensor::from_vec(args.inputs[0].shape(), gx)?)])
        })
    }

    /// Mean over rows of `-log softmax(logits[b, :])[labels[b]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("logits {:?} vs {} labels", s, labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid("cross_entropy", format!("label {} out of range {}", bad, k)));
        }
        let xv = self.value(logits).data();
        let mut probs = xv.to_vec();
        crate::ops::reduce::softmax_in_place(&mut probs, b, k, 1);
        let mut total = T::zero();
        for (bi, &l) in labels.iter().enumerate() {
            let row = &xv[bi * k..(bi + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[l];
        }
        let nb = T::from_usize(b.max(1)).expect("count");
        let labels = labels.to_vec();
        self.record("cross_entropy", &[logits], Tensor::scalar(total / nb), move |args| {
            let scale = args.grad.item() / nb;
            let mut gx = probs.clone();
            for (bi, &l) in labels.iter().enumerate() {
                gx[bi * k + l] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= scale);
            Ok(vec![Some(Tensor::from_vec([b, k], gx)?)])
        })
    }
}
