//! Central finite-difference checks of every backward pass, in 64-bit.
//!
//! Each layer is checked on randomized small shapes through the scalar
//! `L = Σ f(x) ⊙ R` for a fixed random `R`, so the analytic gradient is the
//! layer's backward applied to `R`. Entries are compared with
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constrained::{constrained_conv_forward, ConstrainedFilterBank};
use crate::network::{build_model, ArchitectureSpec};
use crate::tensor::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    maxpool_backward, maxpool_forward, softmax_cross_entropy, ActivationKind, ConvSpec, MaxPool, Tensor,
};
use crate::util::derive_seed;
use crate::Result;

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Step for the whole-model check. Two stacked max-pools put argmax
/// boundaries within 1e-3 of many early-layer weights.
pub const MODEL_STEP: f64 = 1e-5;
const RELATIVE_FLOOR: f64 = 1e-6;
/// Largest number of entries probed per tensor.
const MAX_PROBES: usize = 256;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LayerCheck::passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{:<28} entries {:>6} max-rel-error {:.3e} {}",
                    c.layer,
                    c.entries,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

#[derive(Default)]
struct Tracker {
    entries: usize,
    worst: f64,
}

impl Tracker {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        self.worst = self.worst.max(relative_error(analytic, numeric));
    }

    fn finish(self, layer: impl Into<String>) -> LayerCheck {
        LayerCheck {
            layer: layer.into(),
            entries: self.entries,
            max_rel_error: self.worst,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn probe_indices(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Compares `grad` with central differences of `loss` over `x`.
fn compare(
    tracker: &mut Tracker,
    rng: &mut ChaCha8Rng,
    x: &mut Tensor<f64>,
    grad: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<()> {
    for i in probe_indices(rng, x.len()) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + GRADCHECK_STEP;
        let plus = loss(x)?;
        x.data_mut()[i] = orig - GRADCHECK_STEP;
        let minus = loss(x)?;
        x.data_mut()[i] = orig;
        tracker.record(grad.data()[i], (plus - minus) / (2.0 * GRADCHECK_STEP));
    }
    Ok(())
}

fn random_conv(rng: &mut ChaCha8Rng) -> (ConvSpec, usize, usize, usize) {
    let kernel = [1, 3, 5][rng.gen_range(0..3)];
    let spec = ConvSpec {
        kernel_h: kernel,
        kernel_w: kernel,
        stride: rng.gen_range(1..3),
        padding: rng.gen_range(0..2),
        in_channels: rng.gen_range(1..4),
        out_channels: rng.gen_range(1..4),
    };
    let h = rng.gen_range(kernel.max(3)..=8);
    let w = rng.gen_range(kernel.max(3)..=8);
    (spec, rng.gen_range(1..3), h, w)
}

pub fn check_conv(seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ti, mut tf, mut tb) = (Tracker::default(), Tracker::default(), Tracker::default());
    for _ in 0..trials {
        let (spec, n, h, w) = random_conv(&mut rng);
        let mut x = uniform(&mut rng, &[n, spec.in_channels, h, w], -1.0, 1.0);
        let mut f = uniform(&mut rng, &[spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w], -1.0, 1.0);
        let mut b = uniform(&mut rng, &[spec.out_channels], -1.0, 1.0);
        let y = conv2d_forward(&x, &f, Some(&b), &spec)?;
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let g = conv2d_backward(&r, &x, &f, &spec)?;
        let (f0, b0) = (f.clone(), b.clone());
        compare(&mut ti, &mut rng, &mut x, &g.input, |x| Ok(weighted_sum(&conv2d_forward(x, &f0, Some(&b0), &spec)?, &r)))?;
        let x0 = x.clone();
        compare(&mut tf, &mut rng, &mut f, &g.filters, |f| Ok(weighted_sum(&conv2d_forward(&x0, f, Some(&b0), &spec)?, &r)))?;
        compare(&mut tb, &mut rng, &mut b, &g.bias, |b| Ok(weighted_sum(&conv2d_forward(&x0, &f0, Some(b), &spec)?, &r)))?;
    }
    Ok(vec![ti.finish("conv2d.input"), tf.finish("conv2d.filters"), tb.finish("conv2d.bias")])
}

/// Constrained layer weights, checked on the raw weights the optimizer sees.
pub fn check_constrained(seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::default();
    for trial in 0..trials {
        let filters = rng.gen_range(1..4);
        let bank = ConstrainedFilterBank::<f64>::new(filters, 3, derive_seed(seed, trial as u64))?;
        let spec = bank.conv_spec();
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let x = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
        let y = constrained_conv_forward(&x, &bank)?;
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let g = conv2d_backward(&r, &x, bank.weights(), &spec)?;
        let mut weights = bank.weights().clone();
        compare(&mut t, &mut rng, &mut weights, &g.filters, |wt| {
            let probe = ConstrainedFilterBank::from_weights(wt.clone(), 0)?;
            Ok(weighted_sum(&constrained_conv_forward(&x, &probe)?, &r))
        })?;
    }
    Ok(vec![t.finish("constrained.weights")])
}

/// Inputs are a shuffled grid with spacing 0.01, so no two candidates in a
/// window are within a finite-difference step of each other.
pub fn check_pool(seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::default();
    for _ in 0..trials {
        let window = rng.gen_range(2..4);
        let pool = MaxPool { window, stride: rng.gen_range(1..=window) };
        let shape = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(window..=8), rng.gen_range(window..=8)];
        let len: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        values.shuffle(&mut rng);
        let mut x = Tensor::new(shape, values)?;
        let (y, arg) = maxpool_forward(&x, pool)?;
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let g = maxpool_backward(&r, &arg, x.shape())?;
        compare(&mut t, &mut rng, &mut x, &g, |x| Ok(weighted_sum(&maxpool_forward(x, pool)?.0, &r)))?;
    }
    Ok(vec![t.finish("maxpool.input")])
}

pub fn check_dense(seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ti, mut tw, mut tb) = (Tracker::default(), Tracker::default(), Tracker::default());
    for _ in 0..trials {
        let (n, d, m) = (rng.gen_range(1..4), rng.gen_range(1..10), rng.gen_range(1..8));
        let mut x = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let mut w = uniform(&mut rng, &[d, m], -1.0, 1.0);
        let mut b = uniform(&mut rng, &[m], -1.0, 1.0);
        let r = uniform(&mut rng, &[n, m], -1.0, 1.0);
        let g = dense_backward(&r, &x, &w)?;
        let (w0, b0) = (w.clone(), b.clone());
        compare(&mut ti, &mut rng, &mut x, &g.input, |x| Ok(weighted_sum(&dense_forward(x, &w0, &b0)?, &r)))?;
        let x0 = x.clone();
        compare(&mut tw, &mut rng, &mut w, &g.weights, |w| Ok(weighted_sum(&dense_forward(&x0, w, &b0)?, &r)))?;
        compare(&mut tb, &mut rng, &mut b, &g.bias, |b| Ok(weighted_sum(&dense_forward(&x0, &w0, b)?, &r)))?;
    }
    Ok(vec![ti.finish("dense.input"), tw.finish("dense.weights"), tb.finish("dense.bias")])
}

/// ReLU inputs keep away from the kink at zero.
pub fn check_activation(kind: ActivationKind, seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::default();
    for _ in 0..trials {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..20)];
        let mut x = Tensor::from_fn(shape.to_vec(), |_| {
            let v: f64 = rng.gen_range(0.05..3.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        });
        let r = uniform(&mut rng, &shape, -1.0, 1.0);
        let g = activation_backward(kind, &x, &r)?;
        compare(&mut t, &mut rng, &mut x, &g, |x| Ok(weighted_sum(&activation_forward(kind, x), &r)))?;
    }
    Ok(vec![t.finish(format!("activation.{kind}"))])
}

pub fn check_softmax(seed: u64, trials: usize) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::default();
    for _ in 0..trials {
        let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..30));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut logits = uniform(&mut rng, &[n, c], -4.0, 4.0);
        let grad = softmax_cross_entropy(&logits, &labels)?.grad_logits;
        compare(&mut t, &mut rng, &mut logits, &grad, |z| Ok(softmax_cross_entropy(z, &labels)?.loss))?;
    }
    Ok(vec![t.finish("softmax_cross_entropy.logits")])
}

/// Every parameter of a small constrained model under cross-entropy.
pub fn check_model(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ArchitectureSpec::reduced(32, 32, 3);
    let mut model = build_model::<f64>(&spec, seed)?;
    let batch = Tensor::from_fn([2, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let labels = [0, 2];
    let (logits, cache) = model.forward_train(&batch)?;
    let ce = softmax_cross_entropy(&logits, &labels)?;
    let grads = model.backward(&cache, ce.grad_logits)?;

    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut checks = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let mut t = Tracker::default();
        let probes = probe_indices(&mut rng, grads.tensors[i].len());
        for j in probes {
            let orig = model.params()[i].1.data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                model.params_mut()[i].1.data_mut()[j] = v;
                softmax_cross_entropy(&model.logits(&batch)?, &labels).map(|ce| ce.loss)
            };
            let plus = eval(orig + MODEL_STEP)?;
            let minus = eval(orig - MODEL_STEP)?;
            eval(orig)?;
            t.record(grads.tensors[i].data()[j], (plus - minus) / (2.0 * MODEL_STEP));
        }
        checks.push(t.finish(format!("model.{name}")));
    }
    Ok(checks)
}

/// The full suite; each check draws from its own seed stream.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let s = |stream| derive_seed(seed, stream);
    let mut checks = Vec::new();
    checks.extend(check_conv(s(1), trials)?);
    checks.extend(check_constrained(s(2), trials)?);
    checks.extend(check_pool(s(3), trials)?);
    checks.extend(check_dense(s(4), trials)?);
    checks.extend(check_activation(ActivationKind::Tanh, s(5), trials)?);
    checks.extend(check_activation(ActivationKind::Relu, s(6), trials)?);
    checks.extend(check_softmax(s(7), trials)?);
    checks.extend(check_model(s(8))?);
    Ok(GradcheckReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_pass(checks: Vec<LayerCheck>) {
        for c in checks {
            assert!(c.entries > 0, "{c:?}");
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn conv_passes() {
        assert_pass(check_conv(1, 10).unwrap());
    }

    #[test]
    fn constrained_passes() {
        assert_pass(check_constrained(2, 5).unwrap());
    }

    #[test]
    fn pool_passes() {
        assert_pass(check_pool(3, 10).unwrap());
    }

    #[test]
    fn dense_passes() {
        assert_pass(check_dense(4, 10).unwrap());
    }

    #[test]
    fn activations_pass() {
        assert_pass(check_activation(ActivationKind::Tanh, 5, 10).unwrap());
        assert_pass(check_activation(ActivationKind::Relu, 6, 10).unwrap());
    }

    #[test]
    fn softmax_passes() {
        assert_pass(check_softmax(7, 10).unwrap());
    }

    #[test]
    fn model_passes() {
        assert_pass(check_model(8).unwrap());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tracker::default();
        let mut x = Tensor::from_fn([4], |i| i as f64);
        let wrong = Tensor::from_fn([4], |i| 2.0 * i as f64 + 0.1);
        compare(&mut t, &mut rng, &mut x, &wrong, |x| Ok(x.data().iter().map(|v| v * v).sum())).unwrap();
        assert!(!t.finish("square").passed());
    }
}
