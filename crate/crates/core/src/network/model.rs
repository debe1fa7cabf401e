use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ArchitectureSpec;
use crate::constrained::{post_update_hook, ConstrainedFilterBank, ProjectionReport};
use crate::tensor::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, conv2d_weight_grads, dense_backward,
    dense_forward, maxpool_backward, maxpool_forward, softmax, ActivationKind, ConvSpec, MaxPool, Scalar, Tensor,
};
use crate::util::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Constrained(ConstrainedFilterBank<T>),
    Conv {
        filters: Tensor<T>,
        bias: Tensor<T>,
        spec: ConvSpec,
    },
    Activation(ActivationKind),
    MaxPool(MaxPool),
    Flatten,
    Dense {
        weights: Tensor<T>,
        bias: Tensor<T>,
    },
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Constrained(_) => "constrained",
            Layer::Conv { .. } => "conv",
            Layer::Activation(_) => "activation",
            Layer::MaxPool(_) => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }
}

/// Gradients of every parameter, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache<T> {
    inputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ArchitectureSpec,
    layers: Vec<Layer<T>>,
    classes: Vec<String>,
    seed: u64,
}

/// Gain applied to the logits layer's He bound so a fresh model predicts a
/// near-uniform distribution.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    scaled_uniform(shape, fan_in, 1.0, seed)
}

fn scaled_uniform<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, seed: u64) -> Tensor<T> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Builds a model with deterministic He-uniform weights. Every parameterised
/// layer draws from its own seed stream, so toggling the constrained layer
/// leaves all later layers bit-identical.
pub fn build_model<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let trace = spec.shape_trace(1)?;
    for row in &trace {
        log::debug!("shape {:<16} {:?}", row.layer, row.output);
    }

    let mut layers = Vec::new();
    let first = spec.first_layer_conv();
    let cl = &spec.constrained_layer;
    if cl.enabled {
        let bank = ConstrainedFilterBank::with_channels(cl.filters, first.in_channels, cl.kernel_size, derive_seed(seed, 0))?
            .with_geometry(cl.stride, cl.padding)?;
        layers.push(Layer::Constrained(bank));
    } else {
        let fan_in = first.in_channels * first.kernel_h * first.kernel_w;
        layers.push(Layer::Conv {
            filters: he_uniform(&[first.out_channels, first.in_channels, first.kernel_h, first.kernel_w], fan_in, derive_seed(seed, 0)),
            bias: Tensor::zeros([first.out_channels]),
            spec: first,
        });
    }

    let mut channels = first.out_channels;
    let mut stream = 1;
    for block in &spec.blocks {
        let conv = ConvSpec::square(channels, block.out_channels, block.kernel_size, block.stride, block.padding);
        let fan_in = channels * block.kernel_size * block.kernel_size;
        layers.push(Layer::Conv {
            filters: he_uniform(&[conv.out_channels, conv.in_channels, conv.kernel_h, conv.kernel_w], fan_in, derive_seed(seed, stream)),
            bias: Tensor::zeros([conv.out_channels]),
            spec: conv,
        });
        stream += 1;
        layers.push(Layer::Activation(block.activation));
        if let Some(pool) = block.pool {
            layers.push(Layer::MaxPool(pool));
        }
        channels = block.out_channels;
    }

    layers.push(Layer::Flatten);
    let flat = trace.iter().find(|l| l.layer == "flatten").expect("flatten in trace").output[1];
    let mut features = flat;
    let dense_sizes = spec.fc_sizes.iter().copied().chain(std::iter::once(spec.num_classes));
    let n_dense = spec.fc_sizes.len() + 1;
    for (i, units) in dense_sizes.enumerate() {
        let gain = if i + 1 == n_dense { OUTPUT_INIT_GAIN } else { 1.0 };
        layers.push(Layer::Dense {
            weights: scaled_uniform(&[features, units], features, gain, derive_seed(seed, stream)),
            bias: Tensor::zeros([units]),
        });
        stream += 1;
        if i + 1 < n_dense {
            layers.push(Layer::Activation(spec.fc_activation));
        }
        features = units;
    }

    Ok(Model {
        spec: spec.clone(),
        layers,
        classes: (0..spec.num_classes).map(|i| format!("class-{i:02}")).collect(),
        seed,
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Device id for each output index.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn with_classes(mut self, classes: Vec<String>) -> Result<Self> {
        if classes.len() != self.spec.num_classes {
            return Err(Error::InvalidConfig(format!(
                "class catalog has {} entries, network has {} outputs",
                classes.len(),
                self.spec.num_classes
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn constrained_bank(&self) -> Option<&ConstrainedFilterBank<T>> {
        self.layers.iter().find_map(|l| match l {
            Layer::Constrained(bank) => Some(bank),
            _ => None,
        })
    }

    pub(crate) fn constrained_bank_mut(&mut self) -> Option<&mut ConstrainedFilterBank<T>> {
        self.layers.iter_mut().find_map(|l| match l {
            Layer::Constrained(bank) => Some(bank),
            _ => None,
        })
    }

    /// Projects the constrained bank, if any. Called after every update.
    pub fn enforce_constraints(&mut self) -> Option<ProjectionReport> {
        self.constrained_bank_mut().map(post_update_hook)
    }

    /// `(name, tensor)` for every learnable parameter, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Constrained(bank) => out.push((format!("layer{i}.constrained.weights"), bank.weights())),
                Layer::Conv { filters, bias, .. } => {
                    out.push((format!("layer{i}.conv.filters"), filters));
                    out.push((format!("layer{i}.conv.bias"), bias));
                }
                Layer::Dense { weights, bias } => {
                    out.push((format!("layer{i}.dense.weights"), weights));
                    out.push((format!("layer{i}.dense.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Constrained(bank) => out.push((format!("layer{i}.constrained.weights"), bank.weights_mut())),
                Layer::Conv { filters, bias, .. } => {
                    out.push((format!("layer{i}.conv.filters"), filters));
                    out.push((format!("layer{i}.conv.bias"), bias));
                }
                Layer::Dense { weights, bias } => {
                    out.push((format!("layer{i}.dense.weights"), weights));
                    out.push((format!("layer{i}.dense.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Constrained(bank) => {
                    let mut cast = ConstrainedFilterBank::from_weights(bank.weights().cast(), bank.init_seed())
                        .expect("valid bank")
                        .with_geometry(bank.conv_spec().stride, bank.conv_spec().padding)
                        .expect("valid geometry");
                    cast.set_redraws(bank.redraws());
                    Layer::Constrained(cast)
                }
                Layer::Conv { filters, bias, spec } => Layer::Conv {
                    filters: filters.cast(),
                    bias: bias.cast(),
                    spec: *spec,
                },
                Layer::Activation(k) => Layer::Activation(*k),
                Layer::MaxPool(p) => Layer::MaxPool(*p),
                Layer::Flatten => Layer::Flatten,
                Layer::Dense { weights, bias } => Layer::Dense {
                    weights: weights.cast(),
                    bias: bias.cast(),
                },
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
            classes: self.classes.clone(),
            seed: self.seed,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4("forward")?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::shape(
                "forward",
                "frame shape",
                format!("{:?}", self.spec.input_shape),
                format!("{:?}", [c, h, w]),
            ));
        }
        Ok(())
    }

    fn run_layer(&self, layer: &Layer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        Ok(match layer {
            Layer::Constrained(bank) => (bank.forward(x)?, None),
            Layer::Conv { filters, bias, spec } => (conv2d_forward(x, filters, Some(bias), spec)?, None),
            Layer::Activation(kind) => (activation_forward(*kind, x), None),
            Layer::MaxPool(pool) => {
                let (y, arg) = maxpool_forward(x, *pool)?;
                (y, Some(arg))
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let d = x.len() / n.max(1);
                (x.clone().reshape([n, d])?, None)
            }
            Layer::Dense { weights, bias } => (dense_forward(x, weights, bias)?, None),
        })
    }

    /// Logits without keeping intermediate activations.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = self.run_layer(layer, &x)?.0;
        }
        Ok(x)
    }

    /// Logits plus the cache needed by [`Model::backward`].
    pub fn forward_train(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, arg) = self.run_layer(layer, &x)?;
            inputs.push(std::mem::replace(&mut x, y));
            argmax.push(arg);
        }
        Ok((x, ForwardCache { inputs, argmax }))
    }

    /// Parameter gradients given the gradient of the loss at the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: Tensor<T>) -> Result<Gradients<T>> {
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut grad = grad_logits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let first = i == 0;
            grad = match layer {
                Layer::Constrained(bank) => {
                    let spec = bank.conv_spec();
                    if first {
                        let (gf, _) = conv2d_weight_grads(&grad, input, bank.weights(), &spec)?;
                        per_layer[i].push(gf);
                        grad
                    } else {
                        let g = conv2d_backward(&grad, input, bank.weights(), &spec)?;
                        per_layer[i].push(g.filters);
                        g.input
                    }
                }
                Layer::Conv { filters, spec, .. } => {
                    if first {
                        let (gf, gb) = conv2d_weight_grads(&grad, input, filters, spec)?;
                        per_layer[i].extend([gf, gb]);
                        grad
                    } else {
                        let g = conv2d_backward(&grad, input, filters, spec)?;
                        per_layer[i].extend([g.filters, g.bias]);
                        g.input
                    }
                }
                Layer::Activation(kind) => activation_backward(*kind, input, &grad)?,
                Layer::MaxPool(_) => {
                    let arg = cache.argmax[i].as_ref().expect("pool argmax cached");
                    maxpool_backward(&grad, arg, input.shape())?
                }
                Layer::Flatten => grad.reshape(input.shape().to_vec())?,
                Layer::Dense { weights, .. } => {
                    let g = dense_backward(&grad, input, weights)?;
                    per_layer[i].extend([g.weights, g.bias]);
                    g.input
                }
            };
        }
        Ok(Gradients {
            tensors: per_layer.into_iter().flatten().collect(),
        })
    }

    /// Number of frames pushed through the network at once during inference,
    /// sized so the largest activation stays around 64M elements.
    fn inference_chunk(&self) -> usize {
        let largest = self
            .spec
            .shape_trace(1)
            .map(|t| t.iter().map(|l| l.output.iter().product::<usize>()).max().unwrap_or(1))
            .unwrap_or(1);
        ((64 << 20) / largest.max(1)).clamp(1, 256)
    }

    /// Class probabilities `[N, C]` for a batch `[N, C, H, W]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let n = batch.shape()[0];
        let chunk = self.inference_chunk();
        let mut rows = Vec::with_capacity(n * self.num_classes());
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let logits = self.logits(&batch.slice_outer(start, end)?)?;
            rows.extend_from_slice(softmax(&logits)?.data());
            start = end;
        }
        let probs = Tensor::new([n, self.num_classes()], rows)?;
        if !probs.all_finite() {
            return Err(Error::NonFinite("network produced non-finite probabilities".into()));
        }
        Ok(probs)
    }

    pub(crate) fn set_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let mut params = self.params_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if slot.1.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match architecture {:?}",
                tensor.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = tensor;
        Ok(())
    }

    pub(crate) fn set_bank_redraws(&mut self, redraws: u64) {
        if let Some(bank) = self.constrained_bank_mut() {
            bank.set_redraws(redraws);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchitectureSpec {
        ArchitectureSpec::reduced(32, 32, 4)
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(&small(), 5).unwrap();
        let b = build_model::<f32>(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&small(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn disabling_constraint_only_changes_first_layer() {
        let con = build_model::<f32>(&small(), 1).unwrap();
        let unc = build_model::<f32>(&small().without_constraint(), 1).unwrap();
        assert!(matches!(con.layers()[0], Layer::Constrained(_)));
        assert!(matches!(unc.layers()[0], Layer::Conv { .. }));
        assert_eq!(con.layers()[1..], unc.layers()[1..]);
        let con_rest: usize = con.params()[1..].iter().map(|(_, t)| t.len()).sum();
        let unc_rest: usize = unc.params()[2..].iter().map(|(_, t)| t.len()).sum();
        assert_eq!(con_rest, unc_rest);
    }

    #[test]
    fn default_model_has_28_outputs() {
        let trace = ArchitectureSpec::default().shape_trace(1).unwrap();
        assert_eq!(trace.last().unwrap().output, vec![1, 28]);
    }

    #[test]
    fn fresh_model_is_near_uniform_and_rows_sum_to_one() {
        let model = build_model::<f32>(&small(), 9).unwrap();
        let batch = Tensor::from_fn([3, 3, 32, 32], |i| ((i * 31) % 97) as f32 / 97.0);
        let probs = model.predict(&batch).unwrap();
        for row in probs.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for &p in row {
                assert!((p - 0.25).abs() <= 0.2, "{p}");
            }
        }
    }

    #[test]
    fn duplicated_frames_give_identical_rows() {
        let model = build_model::<f32>(&small(), 2).unwrap();
        let frame = Tensor::from_fn([3, 32, 32], |i| (i % 13) as f32 / 13.0);
        let batch = Tensor::stack(&[frame.clone(), frame]).unwrap();
        let probs = model.predict(&batch).unwrap();
        assert_eq!(probs.data()[..4], probs.data()[4..]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let model = build_model::<f32>(&small(), 2).unwrap();
        assert!(model.predict(&Tensor::zeros([1, 3, 31, 32])).is_err());
    }

    #[test]
    fn class_catalog_length_checked() {
        let model = build_model::<f32>(&small(), 2).unwrap();
        assert!(model.clone().with_classes(vec!["a".into()]).is_err());
        let named = model.with_classes(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        assert_eq!(named.classes()[3], "d");
    }
}
