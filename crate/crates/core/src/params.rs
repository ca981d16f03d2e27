//! Named parameter storage shared by the networks and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BatchStat, NormMode, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub momentum: Tensor,
    pub frozen: bool,
}

/// Trainable tensors (with momentum buffers) plus non-trainable buffers such
/// as batch-norm running statistics. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let momentum = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                momentum,
                frozen: false,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (n, p) in self.params.iter_mut() {
            if n.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Moves every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Records parameter `name` on the tape.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let value = self.get(name)?;
        Ok(tape.param(name, || value.clone()))
    }

    /// Adds batch-norm parameters and running statistics for `c` channels.
    pub fn add_batch_norm(&mut self, name: &str, c: usize) {
        self.insert(&format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.insert(&format!("{name}.beta"), Tensor::zeros(&[c]));
        self.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.insert_buffer(&format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    /// Batch-norm mode for layer `name`: training statistics or the stored
    /// running averages.
    pub fn norm_mode(&self, name: &str, train: bool) -> Result<NormMode> {
        if train {
            return Ok(NormMode::Train {
                name: name.to_string(),
            });
        }
        Ok(NormMode::Eval {
            mean: self.buffer(&format!("{name}.running_mean"))?.data().to_vec(),
            var: self.buffer(&format!("{name}.running_var"))?.data().to_vec(),
        })
    }

    /// Folds the batch statistics of one optimizer step (one entry per
    /// sample and layer) into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStat]) -> Result<()> {
        let mut grouped: BTreeMap<&str, Vec<&BatchStat>> = BTreeMap::new();
        for s in stats {
            grouped.entry(s.name.as_str()).or_default().push(s);
        }
        for (name, group) in grouped {
            let k = group.len() as f64;
            let c = group[0].mean.len();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in &group {
                for i in 0..c {
                    mean[i] += s.mean[i] / k;
                    var[i] += s.var[i] / k;
                }
            }
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::Config(format!("missing buffer {key}")))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialisation, `U(-gain * sqrt(3 / fan_in), ..)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
