//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Each op appends a node holding its value, its parent indices and a
//! backward closure mapping the output gradient (plus parent and output
//! values) to one gradient per parent. A tape is built per forward pass and
//! dropped afterwards; parameters enter as named leaves so their gradients
//! can be collected by name.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// running averages by the caller.
#[derive(Clone, Debug)]
pub struct BatchStat {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    pub(crate) batch_stats: Vec<BatchStat>,
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

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter leaf; its gradient is reported by
    /// [`Gradients::params`]. Recording the same name twice returns the
    /// first leaf.
    pub fn param(&mut self, name: &str, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&(_, idx)) = self.params.iter().find(|(n, _)| n == name) {
            return Var(idx);
        }
        let v = self.leaf(value());
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Registers an existing leaf under parameter `name`, so later
    /// [`Tape::param`] calls for that name resolve to it.
    pub fn alias_param(&mut self, name: &str, v: Var) {
        if !self.params.iter().any(|(n, _)| n == name) {
            self.params.push((name.to_string(), v.0));
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn batch_stats(&self) -> &[BatchStat] {
        &self.batch_stats
    }

    pub(crate) fn push<F>(&mut self, value: Tensor, parents: Vec<Var>, backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync + 'static,
    {
        self.nodes.push(Node {
            value,
            parents: parents.into_iter().map(|v| v.0).collect(),
            backward: Some(Box::new(backward)),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = backward(&g, &parent_vals, &node.value)?;
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp)?,
                    slot @ None => *slot = Some(gp),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by name. Parameters that do not reach the
    /// loss are absent.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, idx)| {
                let g = self.grads.get(*idx)?.as_ref()?;
                Some((name.clone(), g.clone()))
            })
            .collect()
    }
}
