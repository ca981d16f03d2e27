//! Dense tensors, convolution kernels and reverse-mode differentiation.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

use std::sync::Arc;

pub use conv::{Padding, SamplingPlan};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, DEFAULT_EPSILON, PASS_THRESHOLD};
pub use ops::{sigmoid, NormMode, PoolSwitches, ResampleTable};
pub use tape::{BatchStat, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Planar plan shared by [`conv2d`] and the tape op.
pub fn conv2d_plan(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Result<Arc<SamplingPlan>> {
    SamplingPlan::planar(h, w, k, stride, padding).map(Arc::new)
}

/// Planar cross-correlation of `input: [C_in, H, W]` with
/// `kernel: [C_out, C_in, k, k]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (_, h, w) = input.chw()?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::shape("conv2d", format!("kernel {ks:?}")));
    }
    let plan = conv2d_plan(h, w, ks[2], stride, padding)?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let k = tape.leaf(kernel.clone());
    let y = tape.conv(x, k, None, &plan)?;
    Ok(tape.value(y).clone())
}

/// Plan sampling `field` at arbitrary fractional `(row, col)` locations; rows
/// clamp, columns wrap.
pub fn bilinear_plan(h: usize, w: usize, locations: &[(f64, f64)]) -> Arc<SamplingPlan> {
    Arc::new(SamplingPlan::bilinear(h, w, locations.len(), 1, 0, 1, |r, _| locations[r]))
}

/// Bilinear interpolation of `field: [C, H, W]` at `locations`, giving `[C, n]`.
pub fn bilinear_sample(field: &Tensor, locations: &[(f64, f64)]) -> Result<Tensor> {
    let (c, h, w) = field.chw()?;
    if locations.is_empty() {
        return Tensor::new(&[c, 0], Vec::new());
    }
    let plan = bilinear_plan(h, w, locations);
    let cols = plan.im2col(field.data(), c);
    Tensor::new(&[c, locations.len()], cols)
}

impl Tape {
    /// Differentiable bilinear sampling, `[C, H, W] -> [C, n, 1]`.
    pub fn sample_bilinear(&mut self, x: Var, plan: &Arc<SamplingPlan>) -> Result<Var> {
        let (c, _, _) = self.value(x).chw()?;
        let ident = Tensor::new(&[c, c, 1, 1], identity(c))?;
        let k = self.leaf(ident);
        self.conv(x, k, None, plan)
    }
}

fn identity(c: usize) -> Vec<f64> {
    let mut v = vec![0.0; c * c];
    for i in 0..c {
        v[i * c + i] = 1.0;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, 1, Padding::Zero).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn wrap_padding_sums_full_window() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, Padding::LongitudeWrap).unwrap();
        // interior rows see all nine taps, including across the seam
        for r in 1..3 {
            for c in 0..4 {
                assert_eq!(y.data()[r * 4 + c], 9.0);
            }
        }
        // top row loses the three taps above the image
        assert_eq!(y.data()[0], 6.0);
        let z = conv2d(&x, &k, 1, Padding::Zero).unwrap();
        assert_eq!(z.data()[4], 6.0);
    }

    #[test]
    fn stride_two_halves_shape() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[3, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 2, Padding::Zero).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::full(&[2, 4, 4], 1.0);
        let k = Tensor::full(&[1, 3, 3, 3], 1.0);
        assert!(conv2d(&x, &k, 1, Padding::Zero).is_err());
    }

    #[test]
    fn bilinear_identities() {
        let f = Tensor::new(&[1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_sample(&f, &[(0.0, 2.0), (0.0, 0.5)]).unwrap();
        assert_eq!(s.data(), &[2.0, 0.5]);
        assert_eq!(bilinear_sample(&f, &[]).unwrap().shape(), &[1, 0]);
    }

    #[test]
    fn bilinear_wraps_across_seam() {
        // brute force: column -0.5 lies halfway between columns W-1 and 0
        let w = 6;
        let f = Tensor::new(&[1, 2, w], (0..12).map(|i| (i * i) as f64).collect()).unwrap();
        let s = bilinear_sample(&f, &[(1.0, -0.5)]).unwrap();
        let expected = 0.5 * (f.data()[w + w - 1] + f.data()[w]);
        assert!((s.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn bilinear_clamps_rows() {
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = bilinear_sample(&f, &[(-3.0, 0.0), (9.0, 1.0)]).unwrap();
        assert_eq!(s.data(), &[1.0, 4.0]);
    }

    #[test]
    fn relu_gradient_is_exact_away_from_zero() {
        let x = Tensor::new(&[6], vec![-2.0, -0.7, -0.1, 0.2, 0.9, 3.0]).unwrap();
        let r = grad_check("relu", &[x], 1e-5, |t, v| Ok(t.relu(v[0])));
        assert!(r.max_rel_error < 1e-8, "{r}");
    }

    #[test]
    fn sigmoid_gradient() {
        let x = Tensor::uniform(&[4, 4], -3.0, 3.0, &mut rng());
        let r = grad_check("sigmoid", &[x], 1e-5, |t, v| Ok(t.sigmoid(v[0])));
        assert!(r.passed, "{r}");
    }

    #[test]
    fn conv2d_gradient() {
        let mut g = rng();
        let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut g);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut g);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut g);
        let plan = conv2d_plan(5, 5, 3, 1, Padding::Zero).unwrap();
        let r = grad_check("conv2d", &[x, k, b], 1e-5, |t, v| t.conv(v[0], v[1], Some(v[2]), &plan));
        assert!(r.passed, "{r}");
    }

    #[test]
    fn unpool_restores_maxima() {
        let x = Tensor::new(&[1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x);
        let (p, sw) = t.max_pool2(v).unwrap();
        assert_eq!(t.value(p).data(), &[5.0, 7.0]);
        let u = t.unpool(p, &sw).unwrap();
        assert_eq!(t.value(u).data(), &[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_output_has_unit_variance() {
        let x = Tensor::uniform(&[3, 6, 6], -5.0, 9.0, &mut rng());
        let mut t = Tape::new();
        let v = t.leaf(x);
        let g = t.leaf(Tensor::full(&[3], 1.0));
        let b = t.leaf(Tensor::zeros(&[3]));
        let y = t
            .batch_norm(v, g, b, NormMode::Train { name: "bn".into() }, 1e-12)
            .unwrap();
        let out = t.value(y);
        for c in 0..3 {
            let ch = out.channel(c);
            let mean = ch.iter().sum::<f64>() / 36.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        assert_eq!(t.batch_stats().len(), 1);
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let g = t.leaf(Tensor::full(&[1], 2.0));
        let b = t.leaf(Tensor::full(&[1], 0.5));
        let y = t
            .batch_norm(x, g, b, NormMode::Eval { mean: vec![1.0], var: vec![4.0] }, 0.0)
            .unwrap();
        assert_eq!(t.value(y).data(), &[-0.5, 0.5, 1.5]);
    }
}
