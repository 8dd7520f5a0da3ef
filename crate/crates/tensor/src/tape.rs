use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// One recorded primitive application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub id: u64,
    pub op: &'static str,
    pub inputs: Vec<u64>,
}

/// The gradient-carrying nodes reachable from a root, in recording order.
/// Leaves appear with op `"leaf"`.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(rec) = &t.0.recorded {
                stack.extend(rec.inputs.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(Tensor::id);
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .map(|t| match &t.0.recorded {
                Some(rec) => TapeEntry {
                    id: t.id(),
                    op: rec.op.name(),
                    inputs: rec.inputs.iter().map(Tensor::id).collect(),
                },
                None => TapeEntry {
                    id: t.id(),
                    op: "leaf",
                    inputs: Vec::new(),
                },
            })
            .collect()
    }

    /// Propagates `seed` (d root / d root) in exact reverse recording order,
    /// accumulating into leaf gradients.
    fn run_backward(&self, root: &Tensor) {
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(root.id(), vec![1.0; root.numel()]);
        for node in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.recorded {
                None => node.accumulate_grad(&g),
                Some(rec) => {
                    let out = node.data();
                    let grads = rec.op.backward(&out, &g, &rec.inputs);
                    for (input, gi) in rec.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Reverse pass from a scalar. Leaf gradients accumulate additively
    /// across calls; use [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        Tape::record(self).run_backward(self);
        Ok(())
    }
}
