//! Layer helpers that bind a [`ParamStore`] to a [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::norm::BatchStats;
use crate::params::ParamStore;
use crate::scalar::Float;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers `name.w` (`[cout, cin, k, k]`, He-normal) and optionally `name.b`.
pub fn init_conv<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn([cout, cin, k, k], std, rng), true)?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros([cout]), true)?;
    }
    Ok(())
}

/// Registers affine parameters and running statistics for a batch norm.
pub fn init_bn<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::ones([channels]), true)?;
    store.insert(format!("{name}.beta"), Tensor::zeros([channels]), true)?;
    store.insert(format!("{name}.running_mean"), Tensor::zeros([channels]), false)?;
    store.insert(format!("{name}.running_var"), Tensor::ones([channels]), false)?;
    Ok(())
}

/// One forward pass: a graph plus the parameters it reads.
pub struct Ctx<'p, T: Float = f32> {
    pub graph: Graph<T>,
    store: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    training: bool,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Float> Ctx<'p, T> {
    pub fn new(store: &'p ParamStore<T>, training: bool) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            training,
            bn_stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// The graph leaf for a stored parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let v = if entry.trainable {
            self.graph.variable(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Convolution with `name.w`, plus `name.b` when the store has one.
    pub fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let y = self.graph.conv2d(x, w, stride, pad)?;
        let bias = format!("{name}.b");
        if self.store.contains(&bias) {
            let b = self.param(&bias)?;
            self.graph.bias_add(y, b)
        } else {
            Ok(y)
        }
    }

    /// Batch statistics while training, running statistics otherwise.
    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.training {
            let (y, stats) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.bn_stats.push((name.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.store.value(&format!("{name}.running_mean"))?;
            let var = self.store.value(&format!("{name}.running_var"))?;
            self.graph.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
        }
    }

    pub fn conv_bn_relu(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(x, name, stride, pad)?;
        let y = self.batch_norm(y, &format!("{name}.bn"))?;
        self.graph.relu(y)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every trainable parameter this pass touched, in first-use
    /// order. Parameters that received no gradient get zeros.
    pub fn grads(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for name in &self.order {
            let entry = self.store.get(name).expect("bound parameter exists");
            if !entry.trainable {
                continue;
            }
            let v = self.bound[name];
            let g = self
                .graph
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            out.push((name.clone(), g));
        }
        out
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Blends batch statistics into the stored running averages.
pub fn apply_bn_stats<T: Float>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
    let m = T::of(momentum);
    for (name, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let run = store.value_mut(&format!("{name}.{suffix}"))?;
            for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}
