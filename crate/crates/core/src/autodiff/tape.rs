use std::collections::BTreeMap;

use super::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one primitive.
///
/// Returns one entry per input; `None` where the input does not need a
/// gradient (or the contribution is identically zero).
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// One recorded primitive, as exposed for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Wengert list for reverse-mode differentiation.
///
/// Every value produced through the tape becomes a node. A node carries a
/// backward closure only when at least one of its inputs requires a
/// gradient, so constant subgraphs cost nothing at backward time.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let var = self.leaf(value, true);
        self.params.push((name.into(), var));
        var
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Primitive ops that will take part in backward, in execution order.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.op.as_ref().map(|op| TapeEntry {
                    op: op.name(),
                    inputs: n.inputs.clone(),
                    output: Var(i),
                })
            })
            .collect()
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let contributions = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut leaf_grads = BTreeMap::new();
        for (i, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[i].op.is_none() && self.nodes[i].requires_grad {
                    leaf_grads.insert(i, g);
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            leaf_grads,
            params: self.params.clone(),
        })
    }
}

/// Result of a reverse sweep: gradients of the loss with respect to leaves.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves off every path to the loss get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.leaf_grads.get(&var.0) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every registered parameter, keyed by name.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, var)| (name.clone(), self.wrt(*var)))
            .collect()
    }
}
