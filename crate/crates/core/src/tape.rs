//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every differentiable operation is a method on [`Tape`] that appends a node
//! holding its output value and, when any input is tracked, a backward rule.
//! [`Tape::backward`] replays the record in reverse exactly once; [`Tape::clear`]
//! drops all nodes and invalidates outstanding [`Var`] handles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

/// Inputs to a backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input; `None` for inputs that need no gradient.
pub(crate) trait BackwardOp: Send + Sync {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    tracked: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    consumed: bool,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish_non_exhaustive()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            grad: None,
            tracked: requires_grad,
            inputs: Vec::new(),
            op: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Drops every node; handles from before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
        self.consumed = false;
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.index(v).map(|i| self.nodes[i].tracked).unwrap_or(false)
    }

    /// Value of a live handle. Panics on a stale handle.
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v).expect("stale Var used after Tape::clear")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated by the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.index(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "handle {} from tape generation {} is not live (current generation {})",
                v.id, v.generation, self.generation
            )));
        }
        Ok(v.id)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    /// Appends an operation output. The backward rule is kept only when some
    /// input is tracked.
    pub(crate) fn record<B: BackwardOp + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let tracked = ids.iter().any(|&i| self.nodes[i].tracked);
        self.push(Node {
            value,
            grad: None,
            tracked,
            op: if tracked { Some(Box::new(op)) } else { None },
            inputs: ids,
        })
    }

    /// Validates handles and returns their values.
    pub(crate) fn values<const N: usize>(&self, vars: [Var; N]) -> Result<[&Tensor; N]> {
        for v in vars {
            self.index(v)?;
        }
        Ok(vars.map(|v| &self.nodes[v.id].value))
    }

    /// Back-propagates from a scalar `loss`, filling `grad` for every tracked
    /// node that contributes to it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran for this forward pass; clear the tape first".into(),
            ));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Some(op) = &node.op {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node.inputs.iter().map(|&j| self.nodes[j].tracked).collect(),
                };
                let contributions = op.backward(&ctx);
                debug_assert_eq!(contributions.len(), node.inputs.len());
                for (&j, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !self.nodes[j].tracked {
                        continue;
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, grad));
        }
        Ok(())
    }
}
