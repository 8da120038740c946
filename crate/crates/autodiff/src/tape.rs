use std::cell::RefCell;

use crate::{AutodiffError, Result, Tensor};

/// Backward rule of a node.
///
/// Receives the upstream gradient (same length as the node's value) and a flag
/// per input telling whether that input needs a gradient. Returns one entry
/// per input; `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: &'static str,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> NodeId {
        self.push("leaf", Vec::new(), value, true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.push("constant", Vec::new(), value, false, None)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes.borrow()[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.borrow()[id.0].inputs.clone()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.len()
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    /// Registers a node computed outside this crate.
    ///
    /// `value` must already hold the forward result; `backward` maps the
    /// upstream gradient to per-input gradients. The closure is dropped without
    /// being stored when no input requires a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[NodeId],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<NodeId> {
        for &id in inputs {
            self.check(id)?;
        }
        let requires_grad = inputs.iter().any(|&id| self.requires_grad(id));
        let backward = requires_grad.then_some(backward);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad, backward))
    }

    fn push(
        &self,
        op: &'static str,
        inputs: Vec<NodeId>,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            backward,
        });
        NodeId(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Accumulators are fresh for every call, so repeated calls on the same
    /// tape return identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| nodes[id.0].requires_grad)
                .collect();
            let contributions = backward(&upstream, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op {}", node.op);
            for ((input, contribution), need) in
                node.inputs.iter().zip(contributions).zip(&needs)
            {
                let (Some(g), true) = (contribution, *need) else {
                    continue;
                };
                debug_assert_eq!(g.len(), nodes[input.0].value.len(), "op {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad && node.backward.is_none())
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
