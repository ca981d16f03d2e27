//! Every differentiable operation, checked on three random micro shapes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fovgru::{FovConfig, FovNet, SpConvGruCell};
use crate::numerics::{
    conv2d_plan, grad_check, grad_check_sampled, GradCheckReport, NormMode, Padding, ResampleTable, Tape, Tensor, Var,
    DEFAULT_EPSILON,
};
use crate::par;
use crate::params::ParamStore;
use crate::saliency::{CbamBlock, SaliencyConfig, SaliencyNet};
use crate::spconv::{build_sampling_grid, Activation, SpConvLayer};
use crate::sphere::solid_angle_weights;

type Check = Box<dyn Fn() -> GradCheckReport + Send + Sync>;

pub struct Case {
    pub name: String,
    run: Check,
}

impl Case {
    pub fn run(&self) -> GradCheckReport {
        (self.run)()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Random values at least 0.1 away from zero, for rectifier kinks.
fn rand_off_zero(shape: &[usize], seed: u64) -> Tensor {
    rand(shape, seed).map(|v| v.signum() * (0.1 + v.abs()))
}

fn case(name: String, f: impl Fn() -> GradCheckReport + Send + Sync + 'static) -> Case {
    Case { name, run: Box::new(f) }
}

/// Checks `op` with respect to `inputs` followed by the named parameters of
/// `store`, which are routed onto the tape as aliased leaves.
fn check_with_params<F>(name: String, inputs: Vec<Tensor>, store: ParamStore, params: Vec<String>, per_input: usize, op: F) -> Case
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> crate::Result<Var> + Send + Sync + 'static,
{
    case(name.clone(), move || {
        let n = inputs.len();
        let mut all = inputs.clone();
        all.extend(params.iter().map(|p| store.get(p).expect("registered parameter").clone()));
        grad_check_sampled(&name, &all, DEFAULT_EPSILON, per_input, |t, v| {
            for (i, p) in params.iter().enumerate() {
                t.alias_param(p, v[n + i]);
            }
            op(t, &store, &v[..n])
        })
    })
}

fn elementwise(cases: &mut Vec<Case>) {
    let shapes: [&[usize]; 3] = [&[4], &[2, 3, 4], &[3, 5, 2]];
    for (i, s) in shapes.iter().enumerate() {
        let s = s.to_vec();
        let seed = i as u64;
        let sh = s.clone();
        cases.push(case(format!("relu {s:?}"), move || {
            grad_check("relu", &[rand_off_zero(&sh, seed)], DEFAULT_EPSILON, |t, v| Ok(t.relu(v[0])))
        }));
        let sh = s.clone();
        cases.push(case(format!("sigmoid {s:?}"), move || {
            grad_check("sigmoid", &[rand(&sh, seed).scale(3.0)], DEFAULT_EPSILON, |t, v| Ok(t.sigmoid(v[0])))
        }));
        let sh = s.clone();
        cases.push(case(format!("tanh {s:?}"), move || {
            grad_check("tanh", &[rand(&sh, seed).scale(2.0)], DEFAULT_EPSILON, |t, v| Ok(t.tanh(v[0])))
        }));
        let sh = s.clone();
        cases.push(case(format!("add/sub/mul {s:?}"), move || {
            let (a, b) = (rand(&sh, seed), rand(&sh, seed + 100));
            grad_check("add/sub/mul", &[a, b], DEFAULT_EPSILON, |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                t.mul(s, d)
            })
        }));
        cases.push(case(format!("affine {s:?}"), move || {
            grad_check("affine", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| Ok(t.affine(v[0], -1.5, 0.25)))
        }));
    }
}

fn feature_ops(cases: &mut Vec<Case>) {
    let shapes = [(2, 4, 4), (3, 2, 6), (1, 6, 8)];
    for (i, &(c, h, w)) in shapes.iter().enumerate() {
        let seed = 10 + i as u64;
        let s = [c, h, w];
        cases.push(case(format!("concat/slice {s:?}"), move || {
            let (a, b) = (rand(&s, seed), rand(&[2, h, w], seed + 1));
            grad_check("concat/slice", &[a, b], DEFAULT_EPSILON, move |t, v| {
                let cat = t.concat(&[v[0], v[1]])?;
                t.slice(cat, 1, c)
            })
        }));
        cases.push(case(format!("scale_channels {s:?}"), move || {
            grad_check("scale_channels", &[rand(&s, seed), rand(&[c], seed + 1)], DEFAULT_EPSILON, |t, v| {
                t.scale_channels(v[0], v[1])
            })
        }));
        cases.push(case(format!("scale_spatial {s:?}"), move || {
            grad_check("scale_spatial", &[rand(&s, seed), rand(&[1, h, w], seed + 1)], DEFAULT_EPSILON, |t, v| {
                t.scale_spatial(v[0], v[1])
            })
        }));
        cases.push(case(format!("spatial mean/max {s:?}"), move || {
            grad_check("spatial mean/max", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| {
                let a = t.spatial_mean(v[0])?;
                let m = t.spatial_max(v[0])?;
                t.concat(&[a, m])
            })
        }));
        cases.push(case(format!("channel mean/max {s:?}"), move || {
            grad_check("channel mean/max", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| {
                let a = t.channel_mean(v[0])?;
                let m = t.channel_max(v[0])?;
                t.concat(&[a, m])
            })
        }));
        cases.push(case(format!("maxpool {s:?}"), move || {
            grad_check("maxpool", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| Ok(t.max_pool2(v[0])?.0))
        }));
        cases.push(case(format!("unpool {s:?}"), move || {
            let base = rand(&s, seed + 7);
            grad_check("unpool", &[rand(&[c, h / 2, w / 2], seed)], DEFAULT_EPSILON, move |t, v| {
                let b = t.leaf(base.clone());
                let (_, sw) = t.max_pool2(b)?;
                t.unpool(v[0], &sw)
            })
        }));
        cases.push(case(format!("upsample {s:?}"), move || {
            grad_check("upsample", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| t.upsample(v[0], 2, 3))
        }));
        for (kind, table) in [
            ("nearest", Arc::new(ResampleTable::nearest((h, w), (h + 3, 2 * w)))),
            ("bilinear", Arc::new(ResampleTable::bilinear((h, w), (2 * h, 3 * w)))),
        ] {
            cases.push(case(format!("resample {kind} {s:?}"), move || {
                grad_check("resample", &[rand(&s, seed)], DEFAULT_EPSILON, |t, v| t.resample(v[0], &table))
            }));
        }
        cases.push(case(format!("batchnorm train {s:?}"), move || {
            let inputs = [rand(&s, seed).scale(3.0), rand(&[c], seed + 1), rand(&[c], seed + 2)];
            grad_check("batchnorm train", &inputs, DEFAULT_EPSILON, |t, v| {
                t.batch_norm(v[0], v[1], v[2], NormMode::Train { name: "bn".into() }, 1e-5)
            })
        }));
        cases.push(case(format!("batchnorm eval {s:?}"), move || {
            let inputs = [rand(&s, seed), rand(&[c], seed + 1), rand(&[c], seed + 2)];
            let mean = rand(&[c], seed + 3).data().to_vec();
            let var: Vec<f64> = rand(&[c], seed + 4).data().iter().map(|v| 0.5 + v.abs()).collect();
            grad_check("batchnorm eval", &inputs, DEFAULT_EPSILON, move |t, v| {
                let mode = NormMode::Eval {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                t.batch_norm(v[0], v[1], v[2], mode, 1e-5)
            })
        }));
    }
    for (i, &(n, hid)) in [(4, 2), (8, 2), (6, 3)].iter().enumerate() {
        let seed = 20 + i as u64;
        cases.push(case(format!("mlp {n}-{hid}-{n}"), move || {
            let inputs = [
                rand(&[n], seed),
                rand(&[hid, n], seed + 1),
                rand(&[hid], seed + 2),
                rand(&[n, hid], seed + 3),
                rand(&[n], seed + 4),
            ];
            grad_check("mlp", &inputs, DEFAULT_EPSILON, |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let h = t.relu(h);
                t.linear(h, v[3], v[4])
            })
        }));
    }
}

fn convolutions(cases: &mut Vec<Case>) {
    let planar = [
        ((2, 5, 5), 3, 1, Padding::Zero),
        ((1, 6, 8), 3, 1, Padding::LongitudeWrap),
        ((3, 8, 8), 3, 2, Padding::Zero),
    ];
    for (i, &((c, h, w), k, stride, pad)) in planar.iter().enumerate() {
        let seed = 30 + i as u64;
        cases.push(case(format!("conv2d {c}x{h}x{w} k{k} s{stride} {pad:?}"), move || {
            let plan = conv2d_plan(h, w, k, stride, pad).expect("valid plan");
            let inputs = [rand(&[c, h, w], seed), rand(&[2, c, k, k], seed + 1), rand(&[2], seed + 2)];
            grad_check("conv2d", &inputs, DEFAULT_EPSILON, |t, v| t.conv(v[0], v[1], Some(v[2]), &plan))
        }));
    }
    let spherical = [((2, 8, 16), 3, 1), ((1, 6, 12), 3, 2), ((2, 4, 8), 5, 1)];
    for (i, &((c, h, w), k, stride)) in spherical.iter().enumerate() {
        let seed = 40 + i as u64;
        cases.push(case(format!("spconv {c}x{h}x{w} k{k} s{stride}"), move || {
            let grid = build_sampling_grid((h, w), k, stride).expect("valid grid");
            let plan = grid.plan().clone();
            let inputs = [rand(&[c, h, w], seed), rand(&[3, c, k, k], seed + 1), rand(&[3], seed + 2)];
            grad_check("spconv", &inputs, DEFAULT_EPSILON, |t, v| t.conv(v[0], v[1], Some(v[2]), &plan))
        }));
    }
}

fn blocks(cases: &mut Vec<Case>) {
    for (i, &(c, h, w, red)) in [(8, 8, 16, 4), (4, 4, 8, 2), (6, 8, 16, 3)].iter().enumerate() {
        let seed = 50 + i as u64;
        let block = CbamBlock::new("cbam", (h, w), c, red).expect("valid block");
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng(seed));
        let params = vec!["cbam.mlp0.weight".to_string(), "cbam.spatial.weight".to_string()];
        cases.push(check_with_params(
            format!("cbam {c}x{h}x{w} r{red}"),
            vec![rand(&[c, h, w], seed + 1)],
            store,
            params,
            usize::MAX,
            move |t, s, v| Ok(block.forward(t, s, v[0])?.out),
        ));
    }
    for (i, &(c_in, hid, h, w)) in [(1, 4, 8, 16), (2, 3, 4, 8), (1, 2, 8, 16)].iter().enumerate() {
        let seed = 60 + i as u64;
        let cell = SpConvGruCell::new("gru", (h, w), c_in, hid, 3).expect("valid cell");
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut rng(seed));
        let params = vec!["gru.gates.weight".to_string(), "gru.candidate.weight".to_string()];
        cases.push(check_with_params(
            format!("gru cell {c_in}->{hid} {h}x{w}"),
            vec![rand(&[c_in, h, w], seed + 1), rand(&[hid, h, w], seed + 2)],
            store,
            params,
            40,
            move |t, s, v| Ok(cell.step(t, s, v[0], v[1])?.hidden),
        ));
    }
    for (i, &(h, w)) in [(8, 16), (4, 8), (8, 8)].iter().enumerate() {
        let seed = 70 + i as u64;
        let net = FovNet::new(FovConfig::desk((h, w))).expect("valid net");
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng(seed)).expect("init");
        let params = vec![
            "fov.head1.weight".to_string(),
            "fov.head2.weight".to_string(),
            "fov.gru1.gates.weight".to_string(),
        ];
        cases.push(check_with_params(
            format!("fov net (gru stack + head) {h}x{w}"),
            vec![rand(&[1, h, w], seed + 1).map(f64::abs), rand(&[1, h, w], seed + 2).map(f64::abs)],
            store,
            params,
            40,
            move |t, s, v| Ok(*net.forward(t, s, v)?.last().expect("two steps")),
        ));
    }
    for (i, &(c, h, w)) in [(6, 8, 16), (4, 4, 8), (3, 8, 8)].iter().enumerate() {
        let seed = 80 + i as u64;
        let h1 = SpConvLayer::new("h1", (h, w), c, 3, 3, 1)
            .expect("layer")
            .with_activation(Activation::Relu);
        let h2 = SpConvLayer::new("h2", (h, w), 3, 1, 3, 1)
            .expect("layer")
            .with_activation(Activation::Relu);
        let mut store = ParamStore::new();
        h1.init(&mut store, 2f64.sqrt(), &mut rng(seed));
        h2.init(&mut store, 2f64.sqrt(), &mut rng(seed + 1));
        store.get_mut("h2.bias").expect("bias").value = Tensor::full(&[1], 0.5);
        cases.push(check_with_params(
            format!("saliency head {c}x{h}x{w}"),
            vec![rand(&[c, h, w], seed + 2)],
            store,
            vec!["h1.weight".to_string(), "h2.weight".to_string()],
            usize::MAX,
            move |t, s, v| {
                let y = h1.forward(t, s, false, v[0])?;
                h2.forward(t, s, false, y)
            },
        ));
    }
    for (i, &(c, h, w)) in [(1, 4, 8), (2, 4, 8), (1, 8, 16)].iter().enumerate() {
        let seed = 90 + i as u64;
        cases.push(case(format!("weighted mse {c}x{h}x{w}"), move || {
            let weights = Arc::new(solid_angle_weights(h, w).expect("grid").values().to_vec());
            grad_check("weighted mse", &[rand(&[c, h, w], seed), rand(&[c, h, w], seed + 1)], DEFAULT_EPSILON, |t, v| {
                t.weighted_mse(v[0], v[1], &weights)
            })
        }));
    }
    let net = SaliencyNet::new(SaliencyConfig::tiny((32, 64))).expect("valid net");
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(99)).expect("init");
    let params = ["sal.s1.weight", "sal.se3.weight", "sal.t1.weight", "sal.te2.weight", "sal.cbam.mlp0.weight", "sal.head1.weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cases.push(check_with_params(
        "saliency network end-to-end 32x64".into(),
        vec![rand(&[1, 32, 64], 100).map(f64::abs), rand(&[2, 32, 64], 101)],
        store,
        params,
        12,
        move |t, s, v| Ok(net.forward(t, s, true, v[0], v[1])?.raw),
    ));
}

/// All registered checks.
pub fn registry() -> Vec<Case> {
    let mut cases = Vec::new();
    elementwise(&mut cases);
    feature_ops(&mut cases);
    convolutions(&mut cases);
    blocks(&mut cases);
    cases
}

/// Runs every registered check; reports come back in registry order.
pub fn run_all() -> Vec<GradCheckReport> {
    let cases = registry();
    par::map_indexed(cases.len(), |i| {
        let mut r = cases[i].run();
        r.op = cases[i].name.clone();
        r
    })
}
