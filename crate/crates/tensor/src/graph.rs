//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node indices are already a
//! topological order; backward walks them from the end.

use crate::error::{Result, TensorError};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the upstream gradient, the forward inputs
/// and output, and which inputs actually want a gradient.
pub struct BackwardArgs<'a, T: Float> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

struct Node<T: Float> {
    op: String,
    value: Tensor<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf("constant", value, false)
    }

    /// A leaf whose gradient is kept after [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf("variable", value, true)
    }

    fn leaf(&mut self, op: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: op.to_string(),
            value,
            inputs: Vec::new(),
            requires_grad,
            grad: None,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf variable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Appends an op node. The backward closure is dropped when no input
    /// requires a gradient.
    pub(crate) fn record<F>(&mut self, op: &str, inputs: &[Var], value: Tensor<T>, backward: F) -> Result<Var>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync + 'static,
    {
        self.record_boxed(op, inputs, value, Box::new(backward))
    }

    pub(crate) fn record_boxed(
        &mut self,
        op: &str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: op.to_string(),
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            grad: None,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates gradients from a scalar `loss` to every variable leaf.
    ///
    /// A graph can be differentiated once; intermediate gradients are freed
    /// as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[i].backward.take() else {
                continue;
            };
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let input_grads = {
                let node = &self.nodes[i];
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let args = BackwardArgs {
                    grad: &grad,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                };
                backward(&args)?
            };
            let node_inputs = self.nodes[i].inputs.clone();
            if input_grads.len() != node_inputs.len() {
                return Err(TensorError::invalid(
                    "backward",
                    format!(
                        "op `{}` returned {} gradients for {} inputs",
                        self.nodes[i].op,
                        input_grads.len(),
                        node_inputs.len()
                    ),
                ));
            }
            for (input, g) in node_inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[input.0];
                if !target.requires_grad {
                    continue;
                }
                if g.shape() != target.value.shape() {
                    return Err(TensorError::GradientShape {
                        op: self.nodes[i].op.clone(),
                        expected: self.nodes[input.0].value.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                match &mut target.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap());
        let y = g.sum_all(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([3]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec([2], vec![3.0, -1.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones([2]));
        let b = g.variable(Tensor::ones([2]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert!(g.grad(b).is_some());
    }
}
