//! Recorded forward pass with reverse-mode gradients.
//!
//! A [`DiffGraph`] is an append-only list of nodes. Leaves are either
//! registered parameters (which receive gradients) or constants. Every other
//! node is produced by an [`Op`], which knows how to recompute its value from
//! its inputs and how to pull an output gradient back to them. Because nodes
//! are only ever appended, the node order is a topological order and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node in a [`DiffGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive.
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product: one entry per input, `None` meaning the
    /// input receives no gradient from this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Kind {
    Param,
    Constant,
    Derived {
        op: Box<dyn Op>,
        inputs: Vec<Var>,
        needs_grad: bool,
    },
}

struct Node {
    value: Tensor,
    kind: Kind,
}

/// Ordered record of the operations applied during one forward pass.
#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Kind::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Kind::Constant)
    }

    fn push_node(&mut self, value: Tensor, kind: Kind) -> Var {
        self.nodes.push(Node { value, kind });
        Var(self.nodes.len() - 1)
    }

    /// Runs `op` on the given inputs and records it.
    pub fn apply(&mut self, op: impl Op + 'static, inputs: &[Var]) -> Result<Var> {
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward(&values)?
        };
        let needs_grad = inputs.iter().any(|v| self.needs_grad(*v));
        Ok(self.push_node(
            value,
            Kind::Derived {
                op: Box::new(op),
                inputs: inputs.to_vec(),
                needs_grad,
            },
        ))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        match &self.nodes[var.0].kind {
            Kind::Param => true,
            Kind::Constant => false,
            Kind::Derived { needs_grad, .. } => *needs_grad,
        }
    }

    pub fn is_param(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].kind, Kind::Param)
    }

    /// Names of the recorded ops, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                Kind::Derived { op, .. } => Some(op.name()),
                _ => None,
            })
            .collect()
    }

    /// Recomputes every derived node from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.kind {
                Kind::Param | Kind::Constant => node.value.clone(),
                Kind::Derived { op, inputs, .. } => {
                    let args: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                    op.forward(&args)?
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss_value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.needs_grad(loss) {
            grads[loss.0] = Some(Tensor::ones(loss_value.dims()));
        }

        for idx in (0..=loss.0).rev() {
            let Kind::Derived {
                op,
                inputs,
                needs_grad: true,
            } = &self.nodes[idx].kind
            else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let args: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            let input_grads = op.backward(&args, &self.nodes[idx].value, &grad);
            debug_assert_eq!(input_grads.len(), inputs.len(), "op {}", op.name());
            for (input, g) in inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.needs_grad(*input) {
                    continue;
                }
                debug_assert!(g.same_dims(self.value(*input)), "op {}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient of the loss node itself inspectable
            if idx == loss.0 {
                grads[idx] = Some(grad);
            }
        }

        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }
}

/// Result of [`DiffGraph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, exact zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[var.0]))
    }
}
