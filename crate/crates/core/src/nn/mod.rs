//! Minimal dense-tensor convolutional network engine: layer specs, forward
//! inference, exact backpropagation, SGD training and gradient verification.
//!
//! Activations are held channel-first (`[B, C, H, W]`) internally; the public
//! entry points accept batches in `[B, H, W, C]` order to match dataset
//! storage.

mod gradcheck;
mod ops;
mod train;

pub use gradcheck::{gradient_check, max_grad_discrepancy};
pub use train::{
    loss_and_gradients, sgd_step, train, train_steps, Gradients, LayerGrads, TrainConfig,
    TrainReport,
};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
/// Fixed evaluation batch size, so repeated evaluations partition the data
/// identically and reproduce bitwise-identical error rates.
const EVAL_BATCH: usize = 128;

/// One layer of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_filters: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    BatchNorm {
        channels: usize,
    },
    SoftmaxLoss,
}

impl LayerSpec {
    pub fn conv(kernel_h: usize, kernel_w: usize, in_channels: usize, out_filters: usize) -> Self {
        LayerSpec::Conv {
            kernel_h,
            kernel_w,
            in_channels,
            out_filters,
            stride: 1,
            padding: 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::SoftmaxLoss => "softmax-loss",
        }
    }
}

/// Layer-by-layer architecture plus input/output contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Input dimensions as (height, width, channels).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>, class_count: usize) -> Self {
        Self {
            input,
            layers,
            class_count,
        }
    }

    /// Propagates shapes through every layer and checks the structural
    /// invariants. Returns the (height, width, channels) produced by each
    /// layer.
    pub fn layer_output_dims(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w, mut c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidSpec(format!(
                "input dims must be >= 1, got {:?}",
                self.input
            )));
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut last_conv_filters = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_filters,
                    stride,
                    padding,
                } => {
                    if in_channels != c {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: conv expects {in_channels} input channels, \
                             previous layer produces {c}"
                        )));
                    }
                    if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_filters == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: conv extents must be >= 1"
                        )));
                    }
                    let hp = h + 2 * padding;
                    let wp = w + 2 * padding;
                    if hp < kernel_h || wp < kernel_w {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: kernel {kernel_h}x{kernel_w} larger than padded \
                             input {hp}x{wp}"
                        )));
                    }
                    h = (hp - kernel_h) / stride + 1;
                    w = (wp - kernel_w) / stride + 1;
                    c = out_filters;
                    last_conv_filters = Some(out_filters);
                }
                LayerSpec::MaxPool { window, stride } => {
                    if window == 0 || stride == 0 || h < window || w < window {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: pool window {window} invalid for {h}x{w} input"
                        )));
                    }
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
                LayerSpec::Relu => {}
                LayerSpec::BatchNorm { channels } => {
                    if channels != c {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: batchnorm over {channels} channels, input has {c}"
                        )));
                    }
                }
                LayerSpec::SoftmaxLoss => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: softmax-loss must be the final layer"
                        )));
                    }
                }
            }
            dims.push((h, w, c));
        }
        match last_conv_filters {
            Some(n) if n == self.class_count => {}
            Some(n) => {
                return Err(Error::InvalidSpec(format!(
                    "last conv layer has {n} filters, class count is {}",
                    self.class_count
                )))
            }
            None => return Err(Error::InvalidSpec("network has no conv layer".into())),
        }
        if (h, w, c) != (1, 1, self.class_count) {
            return Err(Error::InvalidSpec(format!(
                "network must reduce to 1x1x{} logits, got {h}x{w}x{c}",
                self.class_count
            )));
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_output_dims().map(|_| ())
    }

    /// Indices of conv layers, in order.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parameters attached to one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<E: Scalar = f32> {
    Conv {
        /// `[out_filters, in_channels, kernel_h, kernel_w]`
        weight: Tensor<E>,
        /// `[out_filters]`
        bias: Tensor<E>,
    },
    BatchNorm {
        gamma: Tensor<E>,
        beta: Tensor<E>,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
    },
    None,
}

/// An architecture together with its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork<E: Scalar = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams<E>>,
}

impl<E: Scalar> TrainedNetwork<E> {
    /// Fresh network with He-style uniform filter init (seeded) and zeroed
    /// biases; batchnorm starts at identity with unit running variance.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            params.push(match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_filters,
                    ..
                } => {
                    let fan_in = (kernel_h * kernel_w * in_channels) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    let weight = Tensor::from_vec(
                        vec![out_filters, in_channels, kernel_h, kernel_w],
                        (0..out_filters * in_channels * kernel_h * kernel_w)
                            .map(|_| E::from_f64(rng.random_range(-limit..limit)))
                            .collect(),
                    )?;
                    LayerParams::Conv {
                        weight,
                        bias: Tensor::zeros(vec![out_filters]),
                    }
                }
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm {
                    gamma: Tensor::full(vec![channels], E::one()),
                    beta: Tensor::zeros(vec![channels]),
                    running_mean: Tensor::zeros(vec![channels]),
                    running_var: Tensor::full(vec![channels], E::one()),
                },
                _ => LayerParams::None,
            });
        }
        Ok(Self { spec, params })
    }

    /// Checks that every parameter tensor matches its layer spec and holds
    /// finite values.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.params.len() != self.spec.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} parameter slots for {} layers",
                self.params.len(),
                self.spec.layers.len()
            )));
        }
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            let ok = match (layer, params) {
                (
                    &LayerSpec::Conv {
                        kernel_h,
                        kernel_w,
                        in_channels,
                        out_filters,
                        ..
                    },
                    LayerParams::Conv { weight, bias },
                ) => {
                    weight.shape() == [out_filters, in_channels, kernel_h, kernel_w]
                        && bias.shape() == [out_filters]
                }
                (&LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    [gamma, beta, running_mean, running_var]
                        .iter()
                        .all(|t| t.shape() == [channels])
                }
                (LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::SoftmaxLoss, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    expected: format!("parameters for {}", layer.kind_name()),
                    got: "mismatched parameter tensors".into(),
                });
            }
            let finite = match params {
                LayerParams::Conv { weight, bias } => weight.all_finite() && bias.all_finite(),
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    gamma.all_finite()
                        && beta.all_finite()
                        && running_mean.all_finite()
                        && running_var.all_finite()
                }
                LayerParams::None => true,
            };
            if !finite {
                return Err(Error::NonFinite {
                    context: format!("layer {i} parameters"),
                });
            }
        }
        Ok(())
    }

    /// Converts the element type; used to build the 64-bit verification copy.
    pub fn cast<T: Scalar>(&self) -> TrainedNetwork<T> {
        TrainedNetwork {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| match p {
                    LayerParams::Conv { weight, bias } => LayerParams::Conv {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => LayerParams::BatchNorm {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    },
                    LayerParams::None => LayerParams::None,
                })
                .collect(),
        }
    }

    /// Named parameter tensors in a stable order (checkpoint payload order).
    pub fn parameter_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            match p {
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                    out.push((format!("layer{i}.running_mean"), running_mean));
                    out.push((format!("layer{i}.running_var"), running_var));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn parameter_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter_mut().enumerate() {
            match p {
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                    out.push((format!("layer{i}.running_mean"), running_mean));
                    out.push((format!("layer{i}.running_var"), running_var));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Total learned-parameter count (conv weights/biases, batchnorm
    /// scale/shift; running statistics excluded).
    pub fn learned_parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weight, bias } => weight.len() + bias.len(),
                LayerParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
                LayerParams::None => 0,
            })
            .sum()
    }

    /// Inference over a `[B, H, W, C]` batch, producing `[B, class_count]`
    /// logits. Batchnorm uses running statistics.
    pub fn forward(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let nchw = batch_to_nchw(batch, self.spec.input)?;
        let batch_size = nchw.shape()[0];
        let logits = self.forward_nchw(nchw)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite {
                context: "logits".into(),
            });
        }
        logits.reshaped(vec![batch_size, self.spec.class_count])
    }

    /// Inference on an already channel-first batch.
    pub(crate) fn forward_nchw(&self, mut act: Tensor<E>) -> Result<Tensor<E>> {
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            act = match (layer, params) {
                (
                    &LayerSpec::Conv {
                        stride, padding, ..
                    },
                    LayerParams::Conv { weight, bias },
                ) => ops::conv_forward(&act, weight, bias, stride, padding).0,
                (&LayerSpec::MaxPool { window, stride }, _) => {
                    ops::maxpool_forward(&act, window, stride).0
                }
                (LayerSpec::Relu, _) => ops::relu_forward(&act),
                (
                    LayerSpec::BatchNorm { .. },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => ops::batchnorm_infer(&act, gamma, beta, running_mean, running_var),
                (LayerSpec::SoftmaxLoss, _) => act,
                _ => {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        expected: format!("parameters for {}", layer.kind_name()),
                        got: "wrong parameter kind".into(),
                    })
                }
            };
        }
        Ok(act)
    }
}

/// Converts a `[B, H, W, C]` batch into the internal `[B, C, H, W]` layout,
/// validating dimensions against the spec input.
pub(crate) fn batch_to_nchw<E: Scalar>(
    batch: &Tensor<E>,
    input: (usize, usize, usize),
) -> Result<Tensor<E>> {
    let (h, w, c) = input;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != c {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: format!("[B, {h}, {w}, {c}]"),
            got: format!("{shape:?}"),
        });
    }
    let b = shape[0];
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    let src = batch.data();
    let dst = out.data_mut();
    if c == 1 {
        dst.copy_from_slice(src);
    } else {
        let plane = h * w;
        for bi in 0..b {
            let src_img = &src[bi * plane * c..(bi + 1) * plane * c];
            let dst_img = &mut dst[bi * plane * c..(bi + 1) * plane * c];
            for p in 0..plane {
                for ch in 0..c {
                    dst_img[ch * plane + p] = src_img[p * c + ch];
                }
            }
        }
    }
    Ok(out)
}

/// Top-1 misclassification rate over a dataset (or an index subset of it).
/// Argmax ties break toward the lowest class index.
pub fn evaluate_error(net: &TrainedNetwork<f32>, data: &LabeledDataset) -> Result<f64> {
    let n = data.len();
    evaluate_error_on(net, data, &(0..n).collect::<Vec<_>>())
}

/// Same as [`evaluate_error`] restricted to the given sample indices.
pub fn evaluate_error_on(
    net: &TrainedNetwork<f32>,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.validate()?;
    let mut wrong = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, labels) = data.gather(chunk)?;
        let logits = net.forward(&batch)?;
        let k = net.spec.class_count;
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best != label as usize {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / indices.len() as f64)
}

/// The four-conv-layer architecture used throughout: 5x5x1x20, 5x5x20x50,
/// 4x4x50x500 and 1x1x500x10 convolutions with batchnorm and 2x2 max-pooling,
/// reducing a 28x28 grayscale input to 10 logits.
pub fn lenet_spec() -> NetworkSpec {
    NetworkSpec::new(
        (28, 28, 1),
        vec![
            LayerSpec::conv(5, 5, 1, 20),
            LayerSpec::BatchNorm { channels: 20 },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::conv(5, 5, 20, 50),
            LayerSpec::BatchNorm { channels: 50 },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::conv(4, 4, 50, 500),
            LayerSpec::BatchNorm { channels: 500 },
            LayerSpec::Relu,
            LayerSpec::conv(1, 1, 500, 10),
            LayerSpec::SoftmaxLoss,
        ],
        10,
    )
}
