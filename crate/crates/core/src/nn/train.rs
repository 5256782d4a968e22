//! Training: cached forward pass, exact backpropagation, SGD with momentum
//! and the epoch loop.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{LayerParams, LayerSpec, TrainedNetwork};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SGD hyperparameters. Batch order is a pure function of `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-layer parameter gradients; also reused as the momentum-velocity store.
#[derive(Debug, Clone)]
pub struct Gradients<E: Scalar = f32> {
    pub layers: Vec<LayerGrads<E>>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads<E: Scalar = f32> {
    Conv { dweight: Tensor<E>, dbias: Tensor<E> },
    BatchNorm { dgamma: Tensor<E>, dbeta: Tensor<E> },
    None,
}

impl<E: Scalar> Gradients<E> {
    /// Zero gradients shaped like the network's learned parameters.
    pub fn zeros_like(net: &TrainedNetwork<E>) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weight, bias } => LayerGrads::Conv {
                    dweight: Tensor::zeros(weight.shape().to_vec()),
                    dbias: Tensor::zeros(bias.shape().to_vec()),
                },
                LayerParams::BatchNorm { gamma, .. } => LayerGrads::BatchNorm {
                    dgamma: Tensor::zeros(gamma.shape().to_vec()),
                    dbeta: Tensor::zeros(gamma.shape().to_vec()),
                },
                LayerParams::None => LayerGrads::None,
            })
            .collect();
        Self { layers }
    }

    /// Named gradient tensors in the same order as
    /// `TrainedNetwork::parameter_tensors` restricted to learned parameters.
    pub fn tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, g) in self.layers.iter().enumerate() {
            match g {
                LayerGrads::Conv { dweight, dbias } => {
                    out.push((format!("layer{i}.weight"), dweight));
                    out.push((format!("layer{i}.bias"), dbias));
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    out.push((format!("layer{i}.gamma"), dgamma));
                    out.push((format!("layer{i}.beta"), dbeta));
                }
                LayerGrads::None => {}
            }
        }
        out
    }
}

enum LayerAux<E: Scalar> {
    Conv { col: Tensor<E> },
    Pool { argmax: Vec<u32> },
    Bn { cache: ops::BnCache<E> },
    Plain,
}

struct LayerIo<E: Scalar> {
    input: Tensor<E>,
    aux: LayerAux<E>,
}

/// Training-mode forward over an NCHW batch: batchnorm uses batch statistics
/// and updates running statistics; per-layer inputs are cached for backward.
fn forward_train<E: Scalar>(
    net: &mut TrainedNetwork<E>,
    batch_nchw: Tensor<E>,
) -> (Tensor<E>, Vec<LayerIo<E>>) {
    let mut cache: Vec<LayerIo<E>> = Vec::with_capacity(net.spec.layers.len());
    let mut act = batch_nchw;
    for (layer, params) in net.spec.layers.iter().zip(net.params.iter_mut()) {
        let (next, io) = match (layer, params) {
            (
                &LayerSpec::Conv {
                    stride, padding, ..
                },
                LayerParams::Conv { weight, bias },
            ) => {
                let (y, col) = ops::conv_forward(&act, weight, bias, stride, padding);
                (y, LayerAux::Conv { col })
            }
            (&LayerSpec::MaxPool { window, stride }, _) => {
                let (y, argmax) = ops::maxpool_forward(&act, window, stride);
                (y, LayerAux::Pool { argmax })
            }
            (LayerSpec::Relu, _) => (ops::relu_forward(&act), LayerAux::Plain),
            (
                LayerSpec::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let (y, bn) = ops::batchnorm_train(&act, gamma, beta, running_mean, running_var);
                (y, LayerAux::Bn { cache: bn })
            }
            (LayerSpec::SoftmaxLoss, _) => (act.clone(), LayerAux::Plain),
            _ => unreachable!("validated network has matching params"),
        };
        cache.push(LayerIo { input: act, aux: io });
        act = next;
    }
    (act, cache)
}

fn backward<E: Scalar>(
    net: &TrainedNetwork<E>,
    cache: Vec<LayerIo<E>>,
    dlogits: Tensor<E>,
) -> Gradients<E> {
    let mut grads = Gradients::zeros_like(net);
    let batch = cache[0].input.shape()[0];
    let mut dact = dlogits;
    for (i, io) in cache.into_iter().enumerate().rev() {
        let first = i == 0
            || !net.spec.layers[..i]
                .iter()
                .any(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::BatchNorm { .. }));
        match (&net.spec.layers[i], &net.params[i], io.aux) {
            (
                &LayerSpec::Conv {
                    stride, padding, ..
                },
                LayerParams::Conv { weight, .. },
                LayerAux::Conv { col },
            ) => {
                // Gradient reaches the logits as a [B, K] matrix; view it as
                // the conv output [B, K, 1, 1] when needed.
                let dy = if dact.shape().len() == 2 {
                    let (b, k) = (dact.shape()[0], dact.shape()[1]);
                    dact.reshaped(vec![b, k, 1, 1]).expect("same volume")
                } else {
                    dact
                };
                let (dw, db, dx) = ops::conv_backward(
                    io.input.shape(),
                    weight,
                    &col,
                    &dy,
                    stride,
                    padding,
                    !first,
                );
                grads.layers[i] = LayerGrads::Conv {
                    dweight: dw,
                    dbias: db,
                };
                dact = dx.unwrap_or_else(|| Tensor::zeros(vec![batch, 1, 1, 1]));
                if first {
                    break;
                }
            }
            (_, _, LayerAux::Pool { argmax }) => {
                dact = ops::maxpool_backward(io.input.shape(), &argmax, &dact);
            }
            (LayerSpec::Relu, _, _) => {
                dact = ops::relu_backward(&io.input, &dact);
            }
            (_, LayerParams::BatchNorm { gamma, .. }, LayerAux::Bn { cache: bn }) => {
                let (dx, dgamma, dbeta) = ops::batchnorm_backward(&io.input, gamma, &bn, &dact);
                grads.layers[i] = LayerGrads::BatchNorm { dgamma, dbeta };
                dact = dx;
            }
            (LayerSpec::SoftmaxLoss, _, _) => {}
            _ => unreachable!(),
        }
    }
    grads
}

/// Mean softmax cross-entropy and exact analytic parameter gradients for one
/// labeled batch (`[B, H, W, C]` images). Mutates batchnorm running
/// statistics, as a training step would.
pub fn loss_and_gradients<E: Scalar>(
    net: &mut TrainedNetwork<E>,
    batch: &Tensor<E>,
    labels: &[u8],
) -> Result<(E, Gradients<E>)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nchw = super::batch_to_nchw(batch, net.spec.input)?;
    let b = nchw.shape()[0];
    let (out, cache) = forward_train(net, nchw);
    let logits = out
        .reshaped(vec![b, net.spec.class_count])
        .expect("network reduces to class_count logits");
    let (loss, dlogits) = ops::softmax_cross_entropy(&logits, labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
        });
    }
    Ok((loss, backward(net, cache, dlogits)))
}

/// One SGD update: `v <- momentum * v + g`, then
/// `p <- p - lr * v - lr * weight_decay * p`.
pub fn sgd_step<E: Scalar>(
    net: &mut TrainedNetwork<E>,
    grads: &Gradients<E>,
    velocity: &mut Gradients<E>,
    config: &TrainConfig,
) {
    let lr = E::from_f32(config.learning_rate);
    let momentum = E::from_f32(config.momentum);
    let decay = E::from_f32(config.weight_decay);
    let update = |p: &mut Tensor<E>, g: &Tensor<E>, v: &mut Tensor<E>| {
        debug_assert_eq!(p.shape(), g.shape());
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = momentum * *vv + gv;
            *pv = *pv - lr * *vv - lr * decay * *pv;
        }
    };
    for ((params, grad), vel) in net
        .params
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
    {
        match (params, grad, vel) {
            (
                LayerParams::Conv { weight, bias },
                LayerGrads::Conv { dweight, dbias },
                LayerGrads::Conv {
                    dweight: vw,
                    dbias: vb,
                },
            ) => {
                update(weight, dweight, vw);
                update(bias, dbias, vb);
            }
            (
                LayerParams::BatchNorm { gamma, beta, .. },
                LayerGrads::BatchNorm { dgamma, dbeta },
                LayerGrads::BatchNorm {
                    dgamma: vg,
                    dbeta: vbt,
                },
            ) => {
                update(gamma, dgamma, vg);
                update(beta, dbeta, vbt);
            }
            (LayerParams::None, LayerGrads::None, LayerGrads::None) => {}
            _ => unreachable!("gradients shaped like the network"),
        }
    }
}

/// Per-epoch summary returned by [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f64>,
    pub steps: usize,
}

/// Full training loop over the dataset (optionally an index subset): seeded
/// shuffle per epoch, mini-batch SGD. Aborts with epoch/batch position if the
/// loss turns non-finite.
pub fn train(
    net: &mut TrainedNetwork<f32>,
    data: &LabeledDataset,
    indices: Option<&[usize]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base: Vec<usize> = match indices {
        Some(ix) => ix.to_vec(),
        None => (0..data.len()).collect(),
    };
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = Gradients::zeros_like(net);
    let mut order = base;
    let mut report = TrainReport {
        epoch_mean_loss: Vec::with_capacity(config.epochs),
        steps: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, labels) = data.gather(chunk)?;
            let (loss, grads) = match loss_and_gradients(net, &batch, &labels) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                    })
                }
                Err(e) => return Err(e),
            };
            sgd_step(net, &grads, &mut velocity, config);
            loss_sum += loss as f64;
            batches += 1;
            report.steps += 1;
        }
        let mean = loss_sum / batches.max(1) as f64;
        report.epoch_mean_loss.push(mean);
        log::info!("epoch {epoch}: mean loss {mean:.4}");
    }
    Ok(report)
}

/// Runs exactly `steps` mini-batch SGD updates over a seeded shuffle of the
/// given indices, re-shuffling whenever the pool is exhausted. Used for
/// fine-tuning budgets expressed in steps rather than epochs.
pub fn train_steps(
    net: &mut TrainedNetwork<f32>,
    data: &LabeledDataset,
    indices: &[usize],
    steps: usize,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if steps == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = Gradients::zeros_like(net);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    for step in 0..steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let (batch, labels) = data.gather(&order[cursor..end])?;
        cursor = end;
        let (_, grads) = match loss_and_gradients(net, &batch, &labels) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    epoch: 0,
                    batch: step,
                })
            }
            Err(e) => return Err(e),
        };
        sgd_step(net, &grads, &mut velocity, config);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{evaluate_error, lenet_spec, NetworkSpec};

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            (8, 8, 1),
            vec![
                LayerSpec::conv(5, 5, 1, 6),
                LayerSpec::BatchNorm { channels: 6 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::conv(2, 2, 6, 2),
                LayerSpec::SoftmaxLoss,
            ],
            2,
        )
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        // Zero final-layer weights produce uniform logits.
        let spec = NetworkSpec::new((3, 3, 1), vec![LayerSpec::conv(3, 3, 1, 10)], 10);
        let mut net = TrainedNetwork::<f32>::init(spec, 3).unwrap();
        if let LayerParams::Conv { weight, bias } = &mut net.params[0] {
            weight.data_mut().fill(0.0);
            bias.data_mut().fill(0.0);
        }
        let batch = Tensor::from_vec(vec![4, 3, 3, 1], vec![0.3; 36]).unwrap();
        let (loss, _) = loss_and_gradients(&mut net, &batch, &[0, 3, 7, 9]).unwrap();
        assert!((loss - 10.0f32.ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn loss_decreases_as_true_class_bias_grows() {
        let spec = NetworkSpec::new((2, 2, 1), vec![LayerSpec::conv(2, 2, 1, 3)], 3);
        let batch = Tensor::from_vec(vec![2, 2, 2, 1], vec![0.0; 8]).unwrap();
        let labels = [1u8, 1];
        let mut prev = f32::INFINITY;
        for step in 0..4 {
            let mut net = TrainedNetwork::<f32>::init(spec.clone(), 0).unwrap();
            if let LayerParams::Conv { weight, bias } = &mut net.params[0] {
                weight.data_mut().fill(0.0);
                bias.data_mut().fill(0.0);
                bias.data_mut()[1] = step as f32 * 0.5;
            }
            let (loss, _) = loss_and_gradients(&mut net, &batch, &labels).unwrap();
            assert!(loss < prev, "bias {step}: loss {loss} should drop below {prev}");
            prev = loss;
        }
    }

    #[test]
    fn sgd_zero_grads_leave_params_unchanged() {
        let spec = tiny_spec();
        let mut net = TrainedNetwork::<f32>::init(spec, 5).unwrap();
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        let mut velocity = Gradients::zeros_like(&net);
        let config = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&mut net, &grads, &mut velocity, &config);
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        // param 1.0, grad 0.5, lr 0.1 -> 0.95
        let spec = NetworkSpec::new((1, 1, 1), vec![LayerSpec::conv(1, 1, 1, 1)], 1);
        let mut net = TrainedNetwork::<f32>::init(spec, 0).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut net.params[0] {
            weight.data_mut()[0] = 1.0;
        }
        let mut grads = Gradients::zeros_like(&net);
        if let LayerGrads::Conv { dweight, .. } = &mut grads.layers[0] {
            dweight.data_mut()[0] = 0.5;
        }
        let mut velocity = Gradients::zeros_like(&net);
        let config = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&mut net, &grads, &mut velocity, &config);
        if let LayerParams::Conv { weight, .. } = &net.params[0] {
            assert!((weight.data()[0] - 0.95).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_momentum_unrolls_velocity() {
        // Two identical grads with momentum 0.9: second step is lr*g*1.9.
        let spec = NetworkSpec::new((1, 1, 1), vec![LayerSpec::conv(1, 1, 1, 1)], 1);
        let mut net = TrainedNetwork::<f32>::init(spec, 0).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut net.params[0] {
            weight.data_mut()[0] = 1.0;
        }
        let mut grads = Gradients::zeros_like(&net);
        if let LayerGrads::Conv { dweight, .. } = &mut grads.layers[0] {
            dweight.data_mut()[0] = 0.1;
        }
        let mut velocity = Gradients::zeros_like(&net);
        let config = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&mut net, &grads, &mut velocity, &config);
        let after_first = if let LayerParams::Conv { weight, .. } = &net.params[0] {
            weight.data()[0]
        } else {
            unreachable!()
        };
        sgd_step(&mut net, &grads, &mut velocity, &config);
        let after_second = if let LayerParams::Conv { weight, .. } = &net.params[0] {
            weight.data()[0]
        } else {
            unreachable!()
        };
        let second_step = after_first - after_second;
        assert!((second_step - 0.05 * 0.1 * 1.9).abs() < 1e-7, "step {second_step}");
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let data = synthetic_blobs(2, 10, (8, 8, 1), 0.05, 11).unwrap();
        let mut net = TrainedNetwork::<f32>::init(tiny_spec(), 2).unwrap();
        let before = net.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train(&mut net, &data, None, &config).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn blobs_train_reaches_low_error() {
        let data = synthetic_blobs(2, 50, (8, 8, 1), 0.05, 7).unwrap();
        let mut net = TrainedNetwork::<f32>::init(tiny_spec(), 3).unwrap();
        let config = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 4,
        };
        train(&mut net, &data, None, &config).unwrap();
        let err = evaluate_error(&net, &data).unwrap();
        assert!(err < 0.05, "training error {err} too high");
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let data = synthetic_blobs(2, 20, (8, 8, 1), 0.05, 9).unwrap();
        let run = || {
            let mut net = TrainedNetwork::<f32>::init(tiny_spec(), 3).unwrap();
            let config = TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 42,
                ..TrainConfig::default()
            };
            train(&mut net, &data, None, &config).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lenet_spec_trains_one_step() {
        // Smoke test: a single batch through the full paper architecture.
        let mut net = TrainedNetwork::<f32>::init(lenet_spec(), 0).unwrap();
        let batch = Tensor::from_vec(
            vec![4, 28, 28, 1],
            (0..4 * 784).map(|v| (v % 255) as f32 / 255.0).collect(),
        )
        .unwrap();
        let (loss, grads) = loss_and_gradients(&mut net, &batch, &[1, 2, 3, 4]).unwrap();
        assert!(loss.is_finite());
        let mut velocity = Gradients::zeros_like(&net);
        sgd_step(&mut net, &grads, &mut velocity, &TrainConfig::default());
        assert!(net.validate().is_ok());
    }
}
