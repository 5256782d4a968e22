//! Gradient verification against central finite differences. The check runs
//! on a 64-bit copy of the network so the finite-difference oracle is not
//! drowned by single-precision rounding.

use crate::error::{Error, Result};
use crate::nn::train::{loss_and_gradients, Gradients};
use crate::nn::TrainedNetwork;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradients below this magnitude (on both sides) count as zero rather than
/// being compared relatively.
const NEGLIGIBLE: f64 = 1e-6;

fn relative_discrepancy(analytic: f64, numeric: f64) -> f64 {
    let m = analytic.abs().max(numeric.abs());
    if m < NEGLIGIBLE {
        0.0
    } else {
        (analytic - numeric).abs() / m
    }
}

fn learned_tensor_names(net: &TrainedNetwork<f64>) -> Vec<(String, usize)> {
    net.parameter_tensors()
        .into_iter()
        .filter(|(name, _)| !name.contains("running"))
        .map(|(name, t)| (name, t.len()))
        .collect()
}

fn read_param(net: &TrainedNetwork<f64>, name: &str, offset: usize) -> f64 {
    let (_, t) = net
        .parameter_tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("known parameter tensor");
    t.data()[offset]
}

fn write_param(net: &mut TrainedNetwork<f64>, name: &str, offset: usize, value: f64) {
    let (_, t) = net
        .parameter_tensors_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("known parameter tensor");
    t.data_mut()[offset] = value;
}

fn training_loss(net: &TrainedNetwork<f64>, batch: &Tensor<f64>, labels: &[u8]) -> Result<f64> {
    // Training-mode loss does not depend on running statistics, so the
    // mutation inside loss_and_gradients is irrelevant for the value.
    let mut scratch = net.clone();
    let (loss, _) = loss_and_gradients(&mut scratch, batch, labels)?;
    Ok(loss)
}

/// Compares the supplied analytic gradients against central finite
/// differences of the training loss over up to `max_samples` uniformly
/// sampled learned parameters. Returns the maximum relative discrepancy.
pub fn max_grad_discrepancy(
    net: &TrainedNetwork<f64>,
    batch: &Tensor<f64>,
    labels: &[u8],
    grads: &Gradients<f64>,
    epsilon: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let names = learned_tensor_names(net);
    let total: usize = names.iter().map(|(_, len)| len).sum();
    let count = max_samples.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, count);

    let grad_tensors = grads.tensors();
    debug_assert_eq!(grad_tensors.len(), names.len());

    let mut scratch = net.clone();
    let mut worst = 0.0f64;
    for flat in picks {
        // Locate (tensor, offset) for the flat sample index.
        let mut remaining = flat;
        let mut which = 0usize;
        while remaining >= names[which].1 {
            remaining -= names[which].1;
            which += 1;
        }
        let (name, _) = &names[which];
        let analytic = grad_tensors[which].1.data()[remaining];

        let original = read_param(&scratch, name, remaining);
        write_param(&mut scratch, name, remaining, original + epsilon);
        let plus = training_loss(&scratch, batch, labels)?;
        write_param(&mut scratch, name, remaining, original - epsilon);
        let minus = training_loss(&scratch, batch, labels)?;
        write_param(&mut scratch, name, remaining, original);

        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = relative_discrepancy(analytic, numeric);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Verifies the production backward pass: casts the network to 64-bit,
/// computes analytic gradients on the given `[B, H, W, C]` batch and returns
/// the maximum relative discrepancy against central finite differences over
/// up to `max_samples` sampled parameters.
pub fn gradient_check(
    net: &TrainedNetwork<f32>,
    batch: &Tensor<f32>,
    labels: &[u8],
    epsilon: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64> {
    let net64 = net.cast::<f64>();
    let batch64 = batch.cast::<f64>();
    let mut scratch = net64.clone();
    let (_, grads) = loss_and_gradients(&mut scratch, &batch64, labels)?;
    max_grad_discrepancy(&net64, &batch64, labels, &grads, epsilon, max_samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::train::LayerGrads;
    use crate::nn::{LayerParams, LayerSpec, NetworkSpec};
    use rand::Rng;

    fn seeded_batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![b, h, w, 1],
            (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn two_conv_net() -> TrainedNetwork<f32> {
        let spec = NetworkSpec::new(
            (8, 8, 1),
            vec![
                LayerSpec::conv(3, 3, 1, 4),
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::conv(6, 6, 4, 3),
                LayerSpec::SoftmaxLoss,
            ],
            3,
        );
        TrainedNetwork::init(spec, 12).unwrap()
    }

    #[test]
    fn analytic_matches_finite_difference() {
        let net = two_conv_net();
        let batch = seeded_batch(8, 8, 8, 21);
        let labels = vec![0u8, 1, 2, 0, 1, 2, 0, 1];
        let disc = gradient_check(&net, &batch, &labels, 1e-3, 200, 0).unwrap();
        assert!(disc < 1e-3, "discrepancy {disc}");
    }

    #[test]
    fn relu_and_pool_paths_check_out() {
        let spec = NetworkSpec::new(
            (8, 8, 1),
            vec![
                LayerSpec::conv(3, 3, 1, 4),
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::conv(3, 3, 4, 2),
                LayerSpec::SoftmaxLoss,
            ],
            2,
        );
        let net = TrainedNetwork::init(spec, 5).unwrap();
        let batch = seeded_batch(6, 8, 8, 33);
        let labels = vec![0u8, 1, 0, 1, 0, 1];
        let disc = gradient_check(&net, &batch, &labels, 1e-4, 150, 1).unwrap();
        assert!(disc < 1e-3, "discrepancy {disc}");
    }

    #[test]
    fn zero_gradient_point_reports_zero() {
        // Zero inputs and zero weights with balanced labels: every sampled
        // gradient is zero on both sides.
        let spec = NetworkSpec::new((3, 3, 1), vec![LayerSpec::conv(3, 3, 1, 4)], 4);
        let mut net = TrainedNetwork::<f32>::init(spec, 0).unwrap();
        if let LayerParams::Conv { weight, bias } = &mut net.params[0] {
            weight.data_mut().fill(0.0);
            bias.data_mut().fill(0.0);
        }
        let batch = Tensor::from_vec(vec![4, 3, 3, 1], vec![0.0; 36]).unwrap();
        let labels = vec![0u8, 1, 2, 3];
        let disc = gradient_check(&net, &batch, &labels, 1e-3, 100, 2).unwrap();
        assert_eq!(disc, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let net = two_conv_net().cast::<f64>();
        let batch = seeded_batch(8, 8, 8, 55).cast::<f64>();
        let labels = vec![0u8, 1, 2, 0, 1, 2, 0, 1];
        let mut scratch = net.clone();
        let (_, mut grads) = loss_and_gradients(&mut scratch, &batch, &labels).unwrap();
        if let LayerGrads::Conv { dweight, .. } = &mut grads.layers[0] {
            for v in dweight.data_mut() {
                *v *= 2.0;
            }
        }
        // Sample everything so the corrupted tensor cannot be missed.
        let disc = max_grad_discrepancy(&net, &batch, &labels, &grads, 1e-3, usize::MAX, 3).unwrap();
        assert!(disc > 0.4, "discrepancy {disc} should expose the corruption");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let net = two_conv_net();
        let batch = seeded_batch(2, 8, 8, 1);
        assert!(gradient_check(&net, &batch, &[0, 1], 0.0, 10, 0).is_err());
    }
}
