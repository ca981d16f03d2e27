//! SGD with momentum and weight decay, checkpoint files, the two training
//! loops and the registry of gradient checks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fovgru::FovNet;
use crate::numerics::{BatchStat, Tape, Tensor, Var};
use crate::par;
use crate::params::ParamStore;
use crate::saliency::{self, SaliencyNet};
use crate::sphere::solid_angle_weights;

pub mod gradcheck_suite;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Learning rate 0.1, batch 25, momentum 0.9, weight decay 1e-5,
    /// sequence length 3.
    pub fn full() -> Self {
        TrainConfig {
            lr: 0.1,
            batch_size: 25,
            momentum: 0.9,
            weight_decay: 1e-5,
            seq_len: 3,
            max_steps: 1000,
            seed: 0,
        }
    }

    /// The full-scale optimizer with the learning rate cut for micro networks.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 4,
            max_steps: 200,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.seq_len == 0 || self.momentum < 0.0 || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// `v <- m v + g + wd theta`, `theta <- theta - lr v` for every unfrozen
/// parameter that has a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for (name, p) in store.params_mut() {
        if p.frozen {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        p.value.expect_same_shape(g, "sgd_step")?;
        for ((theta, v), g) in p.value.data_mut().iter_mut().zip(p.momentum.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
            *theta -= cfg.lr * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

struct SampleResult {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
    stats: Vec<BatchStat>,
}

/// Generic minibatch loop. `loss_fn(tape, store, sample)` records one
/// sample's loss; batch elements run in parallel and their gradients are
/// averaged in index order, so results do not depend on the thread count.
///
/// A non-finite loss aborts before the update, leaving `store` at the last
/// good parameters.
pub fn train_loop<F>(store: &mut ParamStore, n_samples: usize, cfg: &TrainConfig, loss_fn: F) -> Result<Vec<StepLog>>
where
    F: Fn(&mut Tape, &ParamStore, usize) -> Result<Var> + Sync + Send,
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::domain("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch: Vec<usize> = (0..cfg.batch_size.min(n_samples))
            .map(|_| {
                if order.is_empty() {
                    order = (0..n_samples).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled")
            })
            .collect();
        let snapshot: &ParamStore = store;
        let results: Vec<Result<SampleResult>> = par::map_indexed(batch.len(), |i| {
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, snapshot, batch[i])?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let grads = tape.backward(loss)?.params();
            Ok(SampleResult {
                loss: value,
                grads,
                stats: tape.batch_stats().to_vec(),
            })
        });
        let k = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut stats = Vec::new();
        for r in results {
            let r = r?;
            loss += r.loss / k;
            for (name, g) in r.grads {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            stats.extend(r.stats);
        }
        for g in grads.values_mut() {
            *g = g.scale(1.0 / k);
        }
        sgd_step(store, &grads, cfg)?;
        store.update_running_stats(&stats)?;
        log.push(StepLog { step, loss, lr: cfg.lr });
    }
    Ok(log)
}

/// One saliency training example.
#[derive(Clone, Debug)]
pub struct SaliencySample {
    pub frame: Tensor,
    pub motion: Tensor,
    /// `[1, H, W]` ground-truth density in `[0, 1]`.
    pub target: Tensor,
}

pub fn saliency_loss(
    net: &SaliencyNet,
    tape: &mut Tape,
    store: &ParamStore,
    sample: &SaliencySample,
    weights: &Arc<Vec<f64>>,
) -> Result<Var> {
    let f = tape.leaf(sample.frame.clone());
    let m = tape.leaf(sample.motion.clone());
    let out = net.forward(tape, store, true, f, m)?;
    let g = tape.leaf(sample.target.clone());
    tape.weighted_mse(out.raw, g, weights)
}

pub fn train_saliency(
    net: &SaliencyNet,
    store: &mut ParamStore,
    samples: &[SaliencySample],
    cfg: &TrainConfig,
) -> Result<Vec<StepLog>> {
    let (h, w) = net.config.grid;
    let weights = Arc::new(solid_angle_weights(h, w)?.values().to_vec());
    train_loop(store, samples.len(), cfg, |tape, s, i| {
        saliency_loss(net, tape, s, &samples[i], &weights)
    })
}

/// One FoV training example: aggregated feedback heatmaps and the targets
/// for the last `targets.len()` steps.
#[derive(Clone, Debug)]
pub struct FovSample {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

/// Trains the FoV network; any saliency parameters in `store` are frozen
/// for the duration.
pub fn train_fov(net: &FovNet, store: &mut ParamStore, samples: &[FovSample], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    let (h, w) = net.config.grid;
    let weights = Arc::new(solid_angle_weights(h, w)?.values().to_vec());
    store.set_frozen(saliency::PREFIX, true);
    let result = train_loop(store, samples.len(), cfg, |tape, s, i| {
        net.sequence_loss(tape, s, &samples[i].inputs, &samples[i].targets, &weights)
    });
    store.set_frozen(saliency::PREFIX, false);
    result
}

const MAGIC: &[u8; 8] = b"SPHVCKPT";
const VERSION: u32 = 1;

/// Serialises parameters and buffers (not momentum).
///
/// Layout, little endian: magic `SPHVCKPT`, version `u32`, entry count
/// `u32`, then per entry: kind `u8` (0 parameter, 1 buffer), name length
/// `u32`, UTF-8 name, rank `u32`, dims `u64` each, values `f64` each.
/// Entries are sorted by kind then name.
pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let entries: Vec<(u8, &String, &Tensor)> = store
        .params()
        .map(|(n, p)| (0u8, n, &p.value))
        .chain(store.buffers().map(|(n, t)| (1u8, n, t)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, t) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)?;
        match kind {
            0 => store.insert(&name, t),
            1 => store.insert_buffer(&name, t),
            k => return Err(Error::Format(format!("unknown entry kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fovgru::FovConfig;
    use crate::saliency::SaliencyConfig;
    use rand_chacha::ChaCha8Rng;

    fn one_param(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(&[1], theta));
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::full(&[1], g))])
    }

    fn plain(lr: f64, m: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            momentum: m,
            weight_decay: wd,
            ..TrainConfig::full()
        }
    }

    #[test]
    fn full_preset_values() {
        let c = TrainConfig::full();
        assert_eq!((c.lr, c.batch_size, c.momentum, c.weight_decay, c.seq_len), (0.1, 25, 0.9, 1e-5, 3));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = one_param(0.7);
        sgd_step(&mut s, &grads(0.0), &plain(0.1, 0.9, 0.0)).unwrap();
        assert_eq!(s.get("x").unwrap().data()[0], 0.7);

        let mut s = one_param(1.0);
        sgd_step(&mut s, &grads(1.0), &plain(0.1, 0.0, 0.0)).unwrap();
        assert!((s.get("x").unwrap().data()[0] - 0.9).abs() < 1e-15);

        let mut s = one_param(0.0);
        for _ in 0..2 {
            sgd_step(&mut s, &grads(1.0), &plain(0.1, 0.9, 0.0)).unwrap();
        }
        assert!((s.get("x").unwrap().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_and_honours_freeze() {
        let mut s = one_param(1.0);
        assert!(matches!(sgd_step(&mut s, &grads(f64::NAN), &plain(0.1, 0.0, 0.0)), Err(Error::NonFinite(_))));
        s.set_frozen("x", true);
        sgd_step(&mut s, &grads(1.0), &plain(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(s.get("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = FovNet::new(FovConfig::desk((8, 16))).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.add_batch_norm("bn", 3);
        let bytes = checkpoint_bytes(&store);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.buffer("bn.running_var").unwrap().data(), &[1.0; 3]);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
    }

    fn quadratic_loop(lr: f64, steps: usize) -> Vec<f64> {
        let mut s = one_param(2.0);
        let cfg = TrainConfig {
            lr,
            batch_size: 1,
            max_steps: steps,
            ..TrainConfig::full()
        };
        train_loop(&mut s, 1, &cfg, |t, s, _| {
            let x = s.bind(t, "x")?;
            let y = t.mul(x, x)?;
            t.mean_of(&[y])
        })
        .unwrap()
        .iter()
        .map(|l| l.loss)
        .collect()
    }

    #[test]
    fn small_lr_decreases_monotonically() {
        let losses = quadratic_loop(0.001, 10);
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn divergence_aborts_before_update() {
        let mut s = one_param(1.0);
        let cfg = TrainConfig {
            batch_size: 1,
            max_steps: 5,
            ..TrainConfig::full()
        };
        let err = train_loop(&mut s, 1, &cfg, |t, s, _| {
            let x = s.bind(t, "x")?;
            Ok(t.affine(x, f64::NAN, 0.0))
        });
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s.get("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn fov_training_is_deterministic_and_respects_freeze() {
        let grid = (8, 16);
        let fov = FovNet::new(FovConfig::desk(grid)).unwrap();
        let sal = SaliencyNet::new(SaliencyConfig::tiny((32, 64))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<FovSample> = (0..3)
            .map(|_| FovSample {
                inputs: (0..3).map(|_| Tensor::uniform(&[1, 8, 16], 0.0, 1.0, &mut rng)).collect(),
                targets: vec![Tensor::uniform(&[1, 8, 16], 0.0, 1.0, &mut rng)],
            })
            .collect();
        let cfg = TrainConfig {
            max_steps: 4,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let run = || {
            let mut store = ParamStore::new();
            fov.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            sal.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let before = store.clone();
            train_fov(&fov, &mut store, &samples, &cfg).unwrap();
            for (n, p) in before.params().filter(|(n, _)| n.starts_with(saliency::PREFIX)) {
                assert_eq!(store.get(n).unwrap(), &p.value);
            }
            assert_ne!(store.get("fov.head2.weight").unwrap(), before.get("fov.head2.weight").unwrap());
            checkpoint_bytes(&store)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a, par::sequential(run));
    }
}
