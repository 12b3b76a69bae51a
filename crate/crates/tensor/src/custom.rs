//! User-defined ops with hand-written backward passes.
//!
//! A custom op is recorded on the tape exactly like a built-in: it gets a
//! node, its backward runs in reverse order, and the gradients it returns
//! are shape-checked against the inputs before they are accumulated.

use std::any::Any;
use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Opaque state a forward pass hands to its backward pass.
pub type Saved = Box<dyn Any + Send + Sync>;

type ForwardFn<T> = dyn Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Saved)> + Send + Sync;
type CustomBackwardFn<T> = dyn Fn(&Tensor<T>, &Saved, &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync;

pub struct CustomOp<T: Float> {
    name: String,
    forward: Box<ForwardFn<T>>,
    backward: Box<CustomBackwardFn<T>>,
}

impl<T: Float> CustomOp<T> {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Builds an op handle from a forward and a backward function.
///
/// `backward(grad_out, saved, inputs)` must return one entry per input;
/// `None` means "no gradient".
pub fn register_custom_op<T, F, B>(name: impl Into<String>, forward: F, backward: B) -> Arc<CustomOp<T>>
where
    T: Float,
    F: Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Saved)> + Send + Sync + 'static,
    B: Fn(&Tensor<T>, &Saved, &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync + 'static,
{
    Arc::new(CustomOp {
        name: name.into(),
        forward: Box::new(forward),
        backward: Box::new(backward),
    })
}

impl<T: Float> Graph<T> {
    pub fn apply_custom(&mut self, op: &Arc<CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let (out, saved) = (op.forward)(&values)?;
        let op = Arc::clone(op);
        let name = op.name.clone();
        self.record(&name, inputs, out, move |args| {
            let mut grads = (op.backward)(args.grad, &saved, args.inputs)?;
            for (g, &need) in grads.iter_mut().zip(args.needs) {
                if !need {
                    *g = None;
                }
            }
            Ok(grads)
        })
    }
}
