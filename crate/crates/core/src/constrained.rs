//! Constrained convolutional first layer.
//!
//! Each of the `K` filters holds one kernel per input channel. After every
//! weight update each kernel is projected so that its center weight is −1 and
//! its remaining weights sum to 1, which turns it into a prediction-error
//! filter: the neighbours predict the center pixel and the layer outputs the
//! residual. Scene content that is locally predictable is suppressed; the
//! residual noise that characterises a sensor is kept.
//!
//! Three-channel (color) banks are the default. A single-channel bank is
//! available for gray-scale input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{conv2d_forward, ConvSpec, Scalar, Tensor};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Off-center sums with a smaller magnitude than this are treated as
/// degenerate and the kernel is re-drawn instead of normalised.
pub const DEGENERATE_EPSILON: f64 = 1e-8;

/// Tolerance on both constraints used by [`ConstrainedFilterBank::check_constraints`].
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;

/// A kernel whose center is exactly −1 and whose off-center sum is within
/// this of 1 is left untouched by the projection.
const FIXED_POINT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionReport {
    /// Off-center sum of every kernel before projection, in `(filter, kernel)` order.
    pub off_center_sums: Vec<f64>,
    /// Kernels whose sum was degenerate and that were re-drawn.
    pub reinitialized: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedFilterBank<T = f32> {
    /// `[K, channels, k, k]`.
    weights: Tensor<T>,
    stride: usize,
    padding: usize,
    init_seed: u64,
    redraws: u64,
}

impl<T: Scalar> ConstrainedFilterBank<T> {
    /// A color bank of `filters` three-kernel filters, initialised He-uniform
    /// from `seed` and projected.
    pub fn new(filters: usize, kernel: usize, seed: u64) -> Result<Self> {
        Self::with_channels(filters, 3, kernel, seed)
    }

    /// Single-kernel filters for gray-scale input.
    pub fn grayscale(filters: usize, kernel: usize, seed: u64) -> Result<Self> {
        Self::with_channels(filters, 1, kernel, seed)
    }

    pub fn with_channels(filters: usize, channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        if filters == 0 || channels == 0 {
            return Err(Error::InvalidConfig("constrained bank needs at least one filter and channel".into()));
        }
        validate_kernel(kernel)?;
        let bound = init_bound(channels, kernel);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::from_fn([filters, channels, kernel, kernel], |_| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        let mut bank = ConstrainedFilterBank {
            weights,
            stride: 1,
            padding: 0,
            init_seed: seed,
            redraws: 0,
        };
        bank.project(DEGENERATE_EPSILON);
        Ok(bank)
    }

    /// Wraps existing weights `[K, C, k, k]` without projecting them.
    pub fn from_weights(weights: Tensor<T>, init_seed: u64) -> Result<Self> {
        let (k, c, kh, kw) = weights.dims4("ConstrainedFilterBank")?;
        if kh != kw {
            return Err(Error::shape("ConstrainedFilterBank", "kernel width", kh, kw));
        }
        validate_kernel(kh)?;
        if k == 0 || c == 0 {
            return Err(Error::InvalidConfig("constrained bank needs at least one filter and channel".into()));
        }
        Ok(ConstrainedFilterBank {
            weights,
            stride: 1,
            padding: 0,
            init_seed,
            redraws: 0,
        })
    }

    pub fn with_geometry(mut self, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("constrained layer stride must be positive".into()));
        }
        self.stride = stride;
        self.padding = padding;
        Ok(self)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// Raw access for the optimizer. Call [`post_update_hook`] afterwards.
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn redraws(&self) -> u64 {
        self.redraws
    }

    pub(crate) fn set_redraws(&mut self, redraws: u64) {
        self.redraws = redraws;
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            kernel_h: self.kernel_size(),
            kernel_w: self.kernel_size(),
            stride: self.stride,
            padding: self.padding,
            in_channels: self.channels(),
            out_channels: self.filters(),
        }
    }

    fn center_index(&self) -> usize {
        let k = self.kernel_size();
        (k / 2) * k + k / 2
    }

    /// Projects every kernel onto the constraint set in place.
    pub fn project(&mut self, epsilon_degenerate: f64) -> ProjectionReport {
        let k = self.kernel_size();
        let area = k * k;
        let center = self.center_index();
        let bound = init_bound(self.channels(), k);
        let mut report = ProjectionReport::default();

        for kernel_idx in 0..self.filters() * self.channels() {
            let kernel = &mut self.weights.data_mut()[kernel_idx * area..(kernel_idx + 1) * area];
            let sum = off_center_sum(kernel, center);
            report.off_center_sums.push(sum);

            if kernel[center] == -T::one() && (sum - 1.0).abs() <= FIXED_POINT_TOLERANCE {
                continue;
            }

            let mut sum = sum;
            while !sum.is_finite() || sum.abs() < epsilon_degenerate {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.init_seed, self.redraws + 1));
                self.redraws += 1;
                for w in kernel.iter_mut() {
                    *w = T::from_f64(rng.gen_range(-bound..bound));
                }
                sum = off_center_sum(kernel, center);
                report.reinitialized += 1;
            }

            for (i, w) in kernel.iter_mut().enumerate() {
                if i != center {
                    *w = T::from_f64(w.as_f64() / sum);
                }
            }
            kernel[center] = -T::one();
            correct_residual(kernel, center);
        }
        report
    }

    /// Both constraints within `tol` for every kernel.
    pub fn check_constraints(&self, tol: f64) -> Result<()> {
        let area = self.kernel_size() * self.kernel_size();
        let center = self.center_index();
        for (idx, kernel) in self.weights.data().chunks(area).enumerate() {
            let (f, c) = (idx / self.channels(), idx % self.channels());
            let cw = kernel[center].as_f64();
            if (cw + 1.0).abs() > tol {
                return Err(Error::ConstraintViolation(format!(
                    "filter {f} kernel {c}: center weight {cw} != -1"
                )));
            }
            let s = off_center_sum(kernel, center);
            if (s - 1.0).abs() > tol {
                return Err(Error::ConstraintViolation(format!(
                    "filter {f} kernel {c}: off-center sum {s} != 1"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        constrained_conv_forward(input, self)
    }
}

fn validate_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "constrained kernel size must be odd so the center is defined, got {kernel}"
        )));
    }
    if kernel == 1 {
        return Err(Error::InvalidConfig("constrained kernel needs off-center weights (size >= 3)".into()));
    }
    Ok(())
}

fn init_bound(channels: usize, kernel: usize) -> f64 {
    (6.0 / (channels * kernel * kernel) as f64).sqrt()
}

fn off_center_sum<T: Scalar>(kernel: &[T], center: usize) -> f64 {
    kernel
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(_, w)| w.as_f64())
        .sum()
}

/// Folds the rounding residual of the normalisation into the smallest
/// off-center weight, where it costs the least precision.
fn correct_residual<T: Scalar>(kernel: &mut [T], center: usize) {
    for _ in 0..3 {
        let residual = 1.0 - off_center_sum(kernel, center);
        if residual.abs() <= FIXED_POINT_TOLERANCE * 1e-2 {
            return;
        }
        let (idx, _) = kernel
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != center)
            .fold((usize::MAX, f64::INFINITY), |best, (i, w)| {
                let mag = w.as_f64().abs();
                if mag < best.1 {
                    (i, mag)
                } else {
                    best
                }
            });
        kernel[idx] = T::from_f64(kernel[idx].as_f64() + residual);
    }
}

/// Functional form of [`ConstrainedFilterBank::project`].
pub fn project_constraints<T: Scalar>(
    mut bank: ConstrainedFilterBank<T>,
    epsilon_degenerate: f64,
) -> (ConstrainedFilterBank<T>, ProjectionReport) {
    let report = bank.project(epsilon_degenerate);
    (bank, report)
}

/// Re-establishes the constraints after an optimizer step touched the bank.
pub fn post_update_hook<T: Scalar>(bank: &mut ConstrainedFilterBank<T>) -> ProjectionReport {
    bank.project(DEGENERATE_EPSILON)
}

/// Convolution with the bank; no bias is applied.
pub fn constrained_conv_forward<T: Scalar>(input: &Tensor<T>, bank: &ConstrainedFilterBank<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = input.dims4("constrained_conv_forward")?;
    if c != bank.channels() {
        let hint = if bank.channels() == 3 {
            "; gray-scale input needs a single-kernel bank (ConstrainedFilterBank::grayscale, `grayscale = true` in the architecture file)"
        } else {
            ""
        };
        return Err(Error::InvalidArgument(format!(
            "constrained layer expects {}-channel input, got {c}{hint}",
            bank.channels()
        )));
    }
    conv2d_forward(input, bank.weights(), None, &bank.conv_spec())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bank_from(values: Vec<f32>, filters: usize, channels: usize, k: usize) -> ConstrainedFilterBank<f32> {
        ConstrainedFilterBank::from_weights(Tensor::new([filters, channels, k, k], values).unwrap(), 0).unwrap()
    }

    fn independent_off_center_sum(kernel: &[f32], k: usize) -> f64 {
        let mut s = 0.0f64;
        for m in 0..k {
            for n in 0..k {
                if !(m == k / 2 && n == k / 2) {
                    s += kernel[m * k + n] as f64;
                }
            }
        }
        s
    }

    #[test]
    fn all_ones_kernel_becomes_uniform_predictor() {
        let (bank, report) = project_constraints(bank_from(vec![1.0; 25], 1, 1, 5), DEGENERATE_EPSILON);
        let w = bank.weights().data();
        assert_eq!(w[12], -1.0);
        for (i, &v) in w.iter().enumerate() {
            if i != 12 {
                assert!((v as f64 - 1.0 / 24.0).abs() < 1e-7, "{v}");
            }
        }
        assert_eq!(report.off_center_sums, vec![24.0]);
        assert_eq!(report.reinitialized, 0);
    }

    #[test]
    fn valid_kernel_is_a_fixed_point() {
        let bank = ConstrainedFilterBank::<f32>::new(3, 5, 42).unwrap();
        let (again, _) = project_constraints(bank.clone(), DEGENERATE_EPSILON);
        assert_eq!(again, bank);
    }

    #[test]
    fn random_kernel_with_sum_two_and_a_half() {
        // Off-center values chosen to sum to 2.5 exactly.
        let mut values: Vec<f32> = (0..25).map(|i| ((i * 7) % 11) as f32 * 0.125 - 0.5).collect();
        let s: f32 = values.iter().enumerate().filter(|&(i, _)| i != 12).map(|(_, v)| *v).sum();
        values[0] += 2.5 - s;
        let before = values.clone();
        let (bank, report) = project_constraints(bank_from(values, 1, 1, 5), DEGENERATE_EPSILON);
        assert!((report.off_center_sums[0] - 2.5).abs() < 1e-6);
        let w = bank.weights().data();
        for i in (0..25).filter(|&i| i != 12) {
            assert!((w[i] - before[i] / 2.5).abs() < 1e-6);
        }
        assert!((independent_off_center_sum(w, 5) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_kernel_is_redrawn_not_divided() {
        let mut values = vec![0.0f32; 25];
        values[0] = 1.0;
        values[1] = -1.0;
        let (bank, report) = project_constraints(bank_from(values, 1, 1, 5), DEGENERATE_EPSILON);
        assert_eq!(report.reinitialized, 1);
        assert!(bank.weights().all_finite());
        bank.check_constraints(CONSTRAINT_TOLERANCE).unwrap();
    }

    #[test]
    fn constant_image_is_annihilated() {
        let bank = ConstrainedFilterBank::<f32>::new(3, 5, 7).unwrap();
        let input = Tensor::from_fn([1, 3, 9, 9], |i| [0.2, 0.55, 0.9][i / 81]);
        let out = bank.forward(&input).unwrap();
        assert_eq!(out.shape(), [1, 3, 5, 5]);
        assert!(out.data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn zero_image_gives_zero_output() {
        let bank = ConstrainedFilterBank::<f32>::new(3, 5, 1).unwrap();
        let out = bank.forward(&Tensor::zeros([2, 3, 6, 6])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_color_input_points_to_grayscale_mode() {
        let bank = ConstrainedFilterBank::<f32>::new(3, 5, 1).unwrap();
        let err = bank.forward(&Tensor::zeros([1, 1, 8, 8])).unwrap_err();
        assert!(err.to_string().contains("gray-scale"), "{err}");
        let gray = ConstrainedFilterBank::<f32>::grayscale(3, 5, 1).unwrap();
        assert_eq!(gray.forward(&Tensor::zeros([1, 1, 8, 8])).unwrap().shape(), [1, 3, 4, 4]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConstrainedFilterBank::<f32>::new(3, 4, 0).is_err());
    }

    #[test]
    fn hook_after_zero_step_and_repeated_hooks_are_no_ops() {
        let mut bank = ConstrainedFilterBank::<f32>::new(3, 5, 3).unwrap();
        let before = bank.clone();
        for w in bank.weights_mut().data_mut() {
            *w -= 0.001 * 0.0;
        }
        post_update_hook(&mut bank);
        assert_eq!(bank, before);
        post_update_hook(&mut bank);
        assert_eq!(bank, before);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(values in prop::collection::vec(-1.0f32..1.0, 75), bias in 0.05f32..1.0) {
            // Shift so no kernel is degenerate.
            let values: Vec<f32> = values.iter().map(|v| v + bias).collect();
            let (once, _) = project_constraints(bank_from(values, 1, 3, 5), DEGENERATE_EPSILON);
            let (twice, report) = project_constraints(once.clone(), DEGENERATE_EPSILON);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report.reinitialized, 0);
            once.check_constraints(CONSTRAINT_TOLERANCE).unwrap();
        }

        #[test]
        fn random_step_restores_invariants(seed in any::<u64>(), grads in prop::collection::vec(-1.0f32..1.0, 225)) {
            let mut bank = ConstrainedFilterBank::<f32>::new(3, 5, seed).unwrap();
            for (w, g) in bank.weights_mut().data_mut().iter_mut().zip(&grads) {
                *w -= 0.05 * g;
            }
            post_update_hook(&mut bank);
            bank.check_constraints(CONSTRAINT_TOLERANCE).unwrap();
        }

        #[test]
        fn off_center_weights_are_scale_covariant(values in prop::collection::vec(0.01f32..1.0, 25), alpha in 0.1f32..10.0, exp in -4i32..4) {
            let (base, _) = project_constraints(bank_from(values.clone(), 1, 1, 5), DEGENERATE_EPSILON);
            let scaled: Vec<f32> = values.iter().map(|v| v * alpha).collect();
            let (other, _) = project_constraints(bank_from(scaled, 1, 1, 5), DEGENERATE_EPSILON);
            for (a, b) in base.weights().data().iter().zip(other.weights().data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            // Power-of-two scaling is exact, so the projection is too.
            let pow2 = 2f32.powi(exp);
            let scaled: Vec<f32> = values.iter().map(|v| v * pow2).collect();
            let (exact, _) = project_constraints(bank_from(scaled, 1, 1, 5), DEGENERATE_EPSILON);
            prop_assert_eq!(exact.weights(), base.weights());
        }

        #[test]
        fn constant_images_vanish_for_any_valid_bank(seed in any::<u64>(), c in prop::array::uniform3(0.0f32..1.0)) {
            let bank = ConstrainedFilterBank::<f32>::new(3, 5, seed).unwrap();
            let scale = bank.weights().data().iter().fold(0f32, |m, v| m.max(v.abs()));
            // A tiny off-center sum blows the normalized weights up; f32 rounding grows with them.
            prop_assume!(scale <= 8.0);
            let input = Tensor::from_fn([1, 3, 7, 7], |i| c[i / 49]);
            let out = bank.forward(&input).unwrap();
            prop_assert!(out.data().iter().all(|v| v.abs() < 1e-4));
        }

        #[test]
        fn constant_image_residual_scales_with_weights(seed in any::<u64>(), c in prop::array::uniform3(0.0f32..1.0)) {
            let bank = ConstrainedFilterBank::<f32>::new(3, 5, seed).unwrap();
            let l1: f32 = bank.weights().data().iter().map(|v| v.abs()).sum();
            let input = Tensor::from_fn([1, 3, 7, 7], |i| c[i / 49]);
            let out = bank.forward(&input).unwrap();
            let bound = 8.0 * f32::EPSILON * l1;
            prop_assert!(out.data().iter().all(|v| v.abs() <= bound));
        }
    }
}
