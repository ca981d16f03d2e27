//! Limited-feedback FoV prediction: aggregation of feedback users' heatmaps,
//! a two-layer spherical ConvGRU and the two-layer inference head.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init_uniform, ParamStore};
use crate::spconv::{build_sampling_grid, Activation, SpConvLayer, SphericalGrid};
use crate::sphere::ErpMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

/// Elementwise sum (or mean) of feedback heatmaps; no users gives a zero map.
pub fn aggregate_user_fovs(heatmaps: &[ErpMap], grid: (usize, usize), mode: Aggregation) -> Result<ErpMap> {
    let mut out = ErpMap::zeros(grid.0, grid.1)?;
    for m in heatmaps {
        out.same_grid(m, "aggregate_user_fovs")?;
        for (o, v) in out.values_mut().iter_mut().zip(m.values()) {
            *o += v;
        }
    }
    if mode == Aggregation::Mean && !heatmaps.is_empty() {
        let n = heatmaps.len() as f64;
        out.values_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FovConfig {
    pub grid: (usize, usize),
    pub in_channels: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub k: usize,
}

impl FovConfig {
    /// 64 hidden channels per layer.
    pub fn full(grid: (usize, usize)) -> Self {
        FovConfig {
            grid,
            in_channels: 1,
            hidden: 64,
            head_hidden: 32,
            k: 3,
        }
    }

    pub fn desk(grid: (usize, usize)) -> Self {
        FovConfig {
            grid,
            in_channels: 1,
            hidden: 4,
            head_hidden: 4,
            k: 3,
        }
    }
}

/// One spherical ConvGRU layer. Update and reset gates share one convolution
/// whose output channels are `[update; reset]`.
#[derive(Clone, Debug)]
pub struct SpConvGruCell {
    pub name: String,
    pub c_in: usize,
    pub hidden: usize,
    grid: Arc<SphericalGrid>,
}

/// Intermediate values of one GRU step.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub hidden: Var,
}

impl SpConvGruCell {
    pub fn new(name: &str, grid: (usize, usize), c_in: usize, hidden: usize, k: usize) -> Result<Self> {
        Ok(SpConvGruCell {
            name: name.to_string(),
            c_in,
            hidden,
            grid: Arc::new(build_sampling_grid(grid, k, 1)?),
        })
    }

    fn names(&self) -> [String; 4] {
        let n = &self.name;
        [
            format!("{n}.gates.weight"),
            format!("{n}.gates.bias"),
            format!("{n}.candidate.weight"),
            format!("{n}.candidate.bias"),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let k = self.grid.k();
        let c = self.hidden + self.c_in;
        let [gw, gb, cw, cb] = self.names();
        store.insert(&gw, init_uniform(&[2 * self.hidden, c, k, k], c * k * k, 1.0, rng));
        store.insert(&gb, Tensor::zeros(&[2 * self.hidden]));
        store.insert(&cw, init_uniform(&[self.hidden, c, k, k], c * k * k, 1.0, rng));
        store.insert(&cb, Tensor::zeros(&[self.hidden]));
    }

    pub fn zero_state(&self) -> Tensor {
        let (h, w) = self.grid.out_hw();
        Tensor::zeros(&[self.hidden, h, w])
    }

    /// `I = sigmoid(W_z * [H, X])`, `R = sigmoid(W_r * [H, X])`,
    /// `H~ = tanh(W_o * [R . H, X])`, `H' = (1 - I) . H + I . H~`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<GruStep> {
        let (xc, _, _) = tape.value(x).chw()?;
        let (hc, _, _) = tape.value(h_prev).chw()?;
        if xc != self.c_in || hc != self.hidden {
            return Err(Error::shape(
                "gru_step",
                format!("x has {xc} channels, h {hc}; cell expects {} and {}", self.c_in, self.hidden),
            ));
        }
        let [gw, gb, cw, cb] = self.names();
        let plan = self.grid.plan();
        let hx = tape.concat(&[h_prev, x])?;
        let (gw, gb) = (store.bind(tape, &gw)?, store.bind(tape, &gb)?);
        let gates = tape.conv(hx, gw, Some(gb), plan)?;
        let gates = tape.sigmoid(gates);
        let update = tape.slice(gates, 0, self.hidden)?;
        let reset = tape.slice(gates, self.hidden, self.hidden)?;
        let rh = tape.mul(reset, h_prev)?;
        let rhx = tape.concat(&[rh, x])?;
        let (cw, cb) = (store.bind(tape, &cw)?, store.bind(tape, &cb)?);
        let candidate = tape.conv(rhx, cw, Some(cb), plan)?;
        let candidate = tape.tanh(candidate);
        // (1 - I) H + I H~ = H + I (H~ - H)
        let diff = tape.sub(candidate, h_prev)?;
        let gated = tape.mul(update, diff)?;
        let hidden = tape.add(h_prev, gated)?;
        Ok(GruStep {
            update,
            reset,
            candidate,
            hidden,
        })
    }
}

/// Two stacked ConvGRU layers and a two-layer spherical head.
#[derive(Clone, Debug)]
pub struct FovNet {
    pub config: FovConfig,
    pub layer1: SpConvGruCell,
    pub layer2: SpConvGruCell,
    pub head1: SpConvLayer,
    pub head2: SpConvLayer,
}

pub const PREFIX: &str = "fov.";

impl FovNet {
    pub fn new(config: FovConfig) -> Result<Self> {
        let (g, k) = (config.grid, config.k);
        Ok(FovNet {
            layer1: SpConvGruCell::new("fov.gru1", g, config.in_channels, config.hidden, k)?,
            // the second layer reads only the first layer's hidden state
            layer2: SpConvGruCell::new("fov.gru2", g, config.hidden, config.hidden, k)?,
            head1: SpConvLayer::new("fov.head1", g, config.hidden, config.head_hidden, k, 1)?
                .with_activation(Activation::Relu),
            head2: SpConvLayer::new("fov.head2", g, config.head_hidden, 1, k, 1)?.with_activation(Activation::Relu),
            config,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.layer1.init(store, rng);
        self.layer2.init(store, rng);
        self.head1.init(store, 2f64.sqrt(), rng);
        self.head2.init(store, 2f64.sqrt(), rng);
        // keep the rectified output alive at initialisation
        store.get_mut(&self.head2.bias_name())?.value = Tensor::full(&[1], 0.1);
        Ok(())
    }

    /// Runs the stack over `seq` (each `[in_channels, H, W]`) and returns the
    /// head output after every step.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::domain("FoV prediction needs at least one input frame"));
        }
        let mut h1 = tape.leaf(self.layer1.zero_state());
        let mut h2 = tape.leaf(self.layer2.zero_state());
        let mut outs = Vec::with_capacity(seq.len());
        for &x in seq {
            h1 = self.layer1.step(tape, store, x, h1)?.hidden;
            h2 = self.layer2.step(tape, store, h1, h2)?.hidden;
            let y = self.head1.forward(tape, store, false, h2)?;
            outs.push(self.head2.forward(tape, store, false, y)?);
        }
        Ok(outs)
    }

    /// Mean solid-angle weighted loss of the last `targets.len()` step
    /// outputs against `targets`.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &[Tensor],
        targets: &[Tensor],
        weights: &Arc<Vec<f64>>,
    ) -> Result<Var> {
        if targets.is_empty() || targets.len() > seq.len() {
            return Err(Error::domain(format!(
                "{} targets for a sequence of {}",
                targets.len(),
                seq.len()
            )));
        }
        let xs: Vec<Var> = seq.iter().map(|t| tape.leaf(t.clone())).collect();
        let outs = self.forward(tape, store, &xs)?;
        let tail = &outs[outs.len() - targets.len()..];
        let mut losses = Vec::with_capacity(targets.len());
        for (&o, t) in tail.iter().zip(targets) {
            let g = tape.leaf(t.clone());
            losses.push(tape.weighted_mse(o, g, weights)?);
        }
        tape.mean_of(&losses)
    }

    /// Unnormalised head output after the last step.
    pub fn predict_raw(&self, store: &ParamStore, seq: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = seq.iter().map(|t| tape.leaf(t.clone())).collect();
        let outs = self.forward(&mut tape, store, &xs)?;
        let last = *outs.last().expect("nonempty sequence");
        Ok(tape.value(last).clone())
    }

    /// `P_v`, min-max normalised to `[0, 1]`.
    pub fn predict_fov(&self, store: &ParamStore, seq: &[ErpMap]) -> Result<ErpMap> {
        let xs: Vec<Tensor> = seq.iter().map(ErpMap::to_tensor).collect();
        Ok(ErpMap::from_tensor(&self.predict_raw(store, &xs)?)?.normalized())
    }
}
