//! Spatial-temporal saliency detection on ERP frames.
//!
//! * S-SPCNN: five spherical conv layers (BN + ReLU), each followed by a 2x2
//!   max-pool, then three stages of switch unpooling + spherical conv. The
//!   output is at a quarter of the input resolution.
//! * T-SPCNN: six stride-2 spherical convs on the motion input, then two
//!   upsampling stages; the first concatenates the layer-4 features.
//! * The concatenated features are projected by a 1x1 spherical conv, passed
//!   through CBAM (channel then spatial attention), concatenated with the
//!   unattended features and decoded by a two-layer spherical head.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{PoolSwitches, ResampleTable, Tape, Tensor, Var};
use crate::params::{init_uniform, ParamStore};
use crate::spconv::{Activation, SpConvLayer};
use crate::sphere::ErpMap;

pub const PREFIX: &str = "sal.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MotionMode {
    /// Two consecutive frames stacked along channels.
    #[default]
    StackedFrames,
    /// A two-channel flow field, precomputed or approximated from frame
    /// differences.
    Flow,
}

impl MotionMode {
    pub fn channels(self, frame_channels: usize) -> usize {
        match self {
            MotionMode::StackedFrames => 2 * frame_channels,
            MotionMode::Flow => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyConfig {
    pub grid: (usize, usize),
    pub frame_channels: usize,
    pub motion: MotionMode,
    /// Contraction channels of S-SPCNN. The first two expansion stages
    /// unpool with the switches of layers 5 and 4, so they output
    /// `spatial[3]` and `spatial[2]` channels.
    pub spatial: [usize; 5],
    /// Channels of F_S (the last expansion stage).
    pub spatial_out: usize,
    /// T-SPCNN contraction channels; `temporal[3] == temporal[5]`.
    pub temporal: [usize; 6],
    /// T-SPCNN expansion channels; the second is F_T's channel count.
    pub temporal_expand: [usize; 2],
    pub cbam_channels: usize,
    pub reduction: usize,
    pub head_hidden: usize,
}

impl SaliencyConfig {
    /// 224x448 input, 256 + 128 = 384 spatial-temporal channels, 64-channel
    /// attention.
    pub fn full() -> Self {
        SaliencyConfig {
            grid: (224, 448),
            frame_channels: 3,
            motion: MotionMode::StackedFrames,
            spatial: [64, 128, 256, 512, 512],
            spatial_out: 256,
            temporal: [32, 64, 128, 128, 128, 128],
            temporal_expand: [128, 128],
            cbam_channels: 64,
            reduction: 4,
            head_hidden: 64,
        }
    }

    pub fn desk(grid: (usize, usize)) -> Self {
        SaliencyConfig {
            grid,
            frame_channels: 3,
            motion: MotionMode::StackedFrames,
            spatial: [4, 8, 8, 16, 16],
            spatial_out: 8,
            temporal: [4, 4, 8, 8, 8, 8],
            temporal_expand: [8, 8],
            cbam_channels: 8,
            reduction: 4,
            head_hidden: 8,
        }
    }

    /// Two or three channels per layer; the smallest grid the layer stack
    /// admits is 32x64.
    pub fn tiny(grid: (usize, usize)) -> Self {
        SaliencyConfig {
            grid,
            frame_channels: 1,
            motion: MotionMode::Flow,
            spatial: [2, 2, 2, 2, 2],
            spatial_out: 2,
            temporal: [2, 2, 2, 2, 2, 2],
            temporal_expand: [2, 2],
            cbam_channels: 4,
            reduction: 2,
            head_hidden: 2,
        }
    }

    pub fn motion_channels(&self) -> usize {
        self.motion.channels(self.frame_channels)
    }

    /// Spatial size of F_S, F_T and the attention maps.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.grid.0 / 4, self.grid.1 / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h == 0 || h % 32 != 0 || w % 64 != 0 || w == 0 {
            return Err(Error::domain(format!(
                "saliency input {h}x{w}: height must be a multiple of 32 and width of 64"
            )));
        }
        if self.temporal[3] != self.temporal[5] {
            return Err(Error::domain("T-SPCNN layers 4 and 6 must have equal channels"));
        }
        if self.reduction == 0 || self.cbam_channels < self.reduction {
            return Err(Error::domain("CBAM reduction exceeds its channel count"));
        }
        Ok(())
    }
}

/// Channel-then-spatial attention block.
#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    pub spatial: SpConvLayer,
}

/// Values produced by [`CbamBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CbamOutput {
    /// `[C]`
    pub channel_attention: Var,
    /// `[1, H, W]`
    pub spatial_attention: Var,
    pub out: Var,
}

impl CbamBlock {
    pub fn new(name: &str, hw: (usize, usize), channels: usize, reduction: usize) -> Result<Self> {
        Ok(CbamBlock {
            name: name.to_string(),
            channels,
            hidden: (channels / reduction).max(1),
            spatial: SpConvLayer::new(&format!("{name}.spatial"), hw, 2, 1, 7, 1)?,
        })
    }

    fn mlp_names(&self) -> [String; 4] {
        let n = &self.name;
        [
            format!("{n}.mlp0.weight"),
            format!("{n}.mlp0.bias"),
            format!("{n}.mlp1.weight"),
            format!("{n}.mlp1.bias"),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let [w0, b0, w1, b1] = self.mlp_names();
        store.insert(&w0, init_uniform(&[self.hidden, self.channels], self.channels, 2f64.sqrt(), rng));
        store.insert(&b0, Tensor::zeros(&[self.hidden]));
        store.insert(&w1, init_uniform(&[self.channels, self.hidden], self.hidden, 1.0, rng));
        store.insert(&b1, Tensor::zeros(&[self.channels]));
        self.spatial.init(store, 1.0, rng);
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        let [w0, b0, w1, b1] = self.mlp_names();
        let (w0, b0) = (store.bind(tape, &w0)?, store.bind(tape, &b0)?);
        let (w1, b1) = (store.bind(tape, &w1)?, store.bind(tape, &b1)?);
        let h = tape.linear(v, w0, b0)?;
        let h = tape.relu(h);
        tape.linear(h, w1, b1)
    }

    /// `M_c = sigmoid(MLP(avg F) + MLP(max F))`, `F' = M_c . F`,
    /// `M_s = sigmoid(f7([avg_c F'; max_c F']))`, out `= M_s . F'`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<CbamOutput> {
        let avg = tape.spatial_mean(f)?;
        let max = tape.spatial_max(f)?;
        let a = self.mlp(tape, store, avg)?;
        let m = self.mlp(tape, store, max)?;
        let sum = tape.add(a, m)?;
        let channel_attention = tape.sigmoid(sum);
        let fc = tape.scale_channels(f, channel_attention)?;
        let avg_c = tape.channel_mean(fc)?;
        let max_c = tape.channel_max(fc)?;
        let pooled = tape.concat(&[avg_c, max_c])?;
        let s = self.spatial.conv_only(tape, store, pooled)?;
        let spatial_attention = tape.sigmoid(s);
        let out = tape.scale_spatial(fc, spatial_attention)?;
        Ok(CbamOutput {
            channel_attention,
            spatial_attention,
            out,
        })
    }
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SaliencyFeatures {
    pub f_s: Var,
    pub f_t: Var,
    pub f_st: Var,
    pub projected: Var,
    pub cbam: CbamOutput,
    pub f_prime: Var,
    /// Head output at input resolution, before min-max normalisation.
    pub raw: Var,
}

#[derive(Clone, Debug)]
pub struct SaliencyNet {
    pub config: SaliencyConfig,
    pub spatial: Vec<SpConvLayer>,
    pub spatial_expand: Vec<SpConvLayer>,
    pub temporal: Vec<SpConvLayer>,
    pub temporal_expand: Vec<SpConvLayer>,
    pub projection: SpConvLayer,
    pub cbam: CbamBlock,
    pub head1: SpConvLayer,
    pub head2: SpConvLayer,
    skip_resize: Arc<ResampleTable>,
    stage2_resize: Arc<ResampleTable>,
    temporal_resize: Arc<ResampleTable>,
    output_resize: Arc<ResampleTable>,
}

fn conv_bn_relu(name: &str, hw: (usize, usize), c_in: usize, c_out: usize, stride: usize) -> Result<SpConvLayer> {
    Ok(SpConvLayer::new(name, hw, c_in, c_out, 3, stride)?
        .with_batch_norm()
        .with_activation(Activation::Relu))
}

impl SaliencyNet {
    pub fn new(config: SaliencyConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.grid;
        let s = config.spatial;
        let mut spatial = Vec::new();
        let mut c_in = config.frame_channels;
        for (i, &c) in s.iter().enumerate() {
            spatial.push(conv_bn_relu(&format!("sal.s{}", i + 1), (h >> i, w >> i), c_in, c, 1)?);
            c_in = c;
        }
        let expand_out = [s[3], s[2], config.spatial_out];
        let mut spatial_expand = Vec::new();
        for (j, &c) in expand_out.iter().enumerate() {
            // unpooling restores the size of contraction layer 5 - j
            let hw = (h >> (4 - j), w >> (4 - j));
            spatial_expand.push(conv_bn_relu(&format!("sal.se{}", j + 1), hw, c_in, c, 1)?);
            c_in = c;
        }

        let mut temporal = Vec::new();
        let mut hw = config.grid;
        let mut c_in = config.motion_channels();
        let mut sizes = Vec::new();
        for (i, &c) in config.temporal.iter().enumerate() {
            let layer = conv_bn_relu(&format!("sal.t{}", i + 1), hw, c_in, c, 2)?;
            hw = layer.out_hw();
            sizes.push(hw);
            temporal.push(layer);
            c_in = c;
        }
        let l4 = sizes[3];
        let te = config.temporal_expand;
        let stage2_hw = (l4.0 * 2, l4.1 * 2);
        let temporal_expand = vec![
            conv_bn_relu("sal.te1", l4, 2 * config.temporal[3], te[0], 1)?,
            conv_bn_relu("sal.te2", stage2_hw, te[0], te[1], 1)?,
        ];

        let fhw = config.feature_hw();
        let c_st = config.spatial_out + te[1];
        let projection = SpConvLayer::new("sal.proj", fhw, c_st, config.cbam_channels, 1, 1)?;
        let cbam = CbamBlock::new("sal.cbam", fhw, config.cbam_channels, config.reduction)?;
        let head1 = SpConvLayer::new("sal.head1", fhw, c_st + config.cbam_channels, config.head_hidden, 3, 1)?
            .with_activation(Activation::Relu);
        let head2 = SpConvLayer::new("sal.head2", fhw, config.head_hidden, 1, 3, 1)?.with_activation(Activation::Relu);
        Ok(SaliencyNet {
            skip_resize: Arc::new(ResampleTable::nearest(sizes[5], l4)),
            stage2_resize: Arc::new(ResampleTable::nearest(l4, stage2_hw)),
            temporal_resize: Arc::new(ResampleTable::nearest(stage2_hw, fhw)),
            output_resize: Arc::new(ResampleTable::bilinear(fhw, config.grid)),
            spatial,
            spatial_expand,
            temporal,
            temporal_expand,
            projection,
            cbam,
            head1,
            head2,
            config,
        })
    }

    fn conv_layers(&self) -> impl Iterator<Item = &SpConvLayer> {
        self.spatial
            .iter()
            .chain(&self.spatial_expand)
            .chain(&self.temporal)
            .chain(&self.temporal_expand)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in self.conv_layers() {
            l.init(store, 2f64.sqrt(), rng);
        }
        self.projection.init(store, 1.0, rng);
        self.cbam.init(store, rng);
        self.head1.init(store, 2f64.sqrt(), rng);
        self.head2.init(store, 2f64.sqrt(), rng);
        // keep the rectified output alive at initialisation
        store.get_mut(&self.head2.bias_name())?.value = Tensor::full(&[1], 0.1);
        Ok(())
    }

    fn check_input(&self, tape: &Tape, v: Var, channels: usize, what: &str) -> Result<()> {
        let (c, h, w) = tape.value(v).chw()?;
        if c != channels || (h, w) != self.config.grid {
            return Err(Error::domain(format!(
                "{what} is {c}x{h}x{w}, expected {channels}x{}x{}",
                self.config.grid.0, self.config.grid.1
            )));
        }
        Ok(())
    }

    pub fn s_spcnn(&self, tape: &mut Tape, store: &ParamStore, train: bool, frame: Var) -> Result<Var> {
        self.check_input(tape, frame, self.config.frame_channels, "frame")?;
        let mut x = frame;
        let mut switches: Vec<PoolSwitches> = Vec::new();
        for l in &self.spatial {
            let y = l.forward(tape, store, train, x)?;
            let (p, sw) = tape.max_pool2(y)?;
            switches.push(sw);
            x = p;
        }
        for (l, sw) in self.spatial_expand.iter().zip(switches.iter().rev()) {
            let u = tape.unpool(x, sw)?;
            x = l.forward(tape, store, train, u)?;
        }
        Ok(x)
    }

    /// Temporal features, resized to the spatial feature grid.
    pub fn t_spcnn(&self, tape: &mut Tape, store: &ParamStore, train: bool, motion: Var) -> Result<Var> {
        self.check_input(tape, motion, self.config.motion_channels(), "motion input")?;
        let mut x = motion;
        let mut layer4 = None;
        for (i, l) in self.temporal.iter().enumerate() {
            x = l.forward(tape, store, train, x)?;
            if i == 3 {
                layer4 = Some(x);
            }
        }
        let up = tape.resample(x, &self.skip_resize)?;
        let cat = tape.concat(&[up, layer4.expect("six layers")])?;
        let y = self.temporal_expand[0].forward(tape, store, train, cat)?;
        let up = tape.resample(y, &self.stage2_resize)?;
        let y = self.temporal_expand[1].forward(tape, store, train, up)?;
        tape.resample(y, &self.temporal_resize)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        train: bool,
        frame: Var,
        motion: Var,
    ) -> Result<SaliencyFeatures> {
        let f_s = self.s_spcnn(tape, store, train, frame)?;
        let f_t = self.t_spcnn(tape, store, train, motion)?;
        let f_st = tape.concat(&[f_s, f_t])?;
        let projected = self.projection.forward(tape, store, train, f_st)?;
        let cbam = self.cbam.forward(tape, store, projected)?;
        let f_prime = tape.concat(&[f_st, cbam.out])?;
        let y = self.head1.forward(tape, store, train, f_prime)?;
        let y = self.head2.forward(tape, store, train, y)?;
        let raw = tape.resample(y, &self.output_resize)?;
        Ok(SaliencyFeatures {
            f_s,
            f_t,
            f_st,
            projected,
            cbam,
            f_prime,
            raw,
        })
    }

    /// Eval-mode saliency map `P_s`, min-max normalised.
    pub fn predict(&self, store: &ParamStore, frame: &Tensor, motion: &Tensor) -> Result<ErpMap> {
        let mut tape = Tape::new();
        let f = tape.leaf(frame.clone());
        let m = tape.leaf(motion.clone());
        let out = self.forward(&mut tape, store, false, f, m)?;
        Ok(ErpMap::from_tensor(tape.value(out.raw))?.normalized())
    }
}

/// Grey level of a `[C, H, W]` frame as the channel mean.
fn grey(frame: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = frame.chw()?;
    let mut g = vec![0.0; h * w];
    for ci in 0..c {
        for (o, v) in g.iter_mut().zip(frame.channel(ci)) {
            *o += v / c as f64;
        }
    }
    Ok((h, w, g))
}

/// Normal flow `-I_t grad(I) / (|grad(I)|^2 + eps)` from two frames; rows use
/// one-sided differences at the poles, columns wrap.
pub fn normal_flow(prev: &Tensor, cur: &Tensor) -> Result<Tensor> {
    prev.expect_same_shape(cur, "normal_flow")?;
    let (h, w, a) = grey(prev)?;
    let (_, _, b) = grey(cur)?;
    let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let at = |r: usize, c: usize| mean[r * w + c];
    let mut out = vec![0.0; 2 * h * w];
    for r in 0..h {
        for c in 0..w {
            let gx = 0.5 * (at(r, (c + 1) % w) - at(r, (c + w - 1) % w));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gy = (at(r1, c) - at(r0, c)) / (r1 - r0).max(1) as f64;
            let it = b[r * w + c] - a[r * w + c];
            let s = -it / (gx * gx + gy * gy + 1e-3);
            out[r * w + c] = s * gx;
            out[h * w + r * w + c] = s * gy;
        }
    }
    Tensor::new(&[2, h, w], out)
}

/// Motion input for the temporal branch from consecutive frames.
pub fn motion_input(prev: &Tensor, cur: &Tensor, mode: MotionMode) -> Result<Tensor> {
    prev.expect_same_shape(cur, "motion_input")?;
    match mode {
        MotionMode::StackedFrames => {
            let (c, h, w) = cur.chw()?;
            let mut d = prev.data().to_vec();
            d.extend_from_slice(cur.data());
            Tensor::new(&[2 * c, h, w], d)
        }
        MotionMode::Flow => normal_flow(prev, cur),
    }
}
