//! Greedy pruning baselines and control experiments: magnitude thresholding
//! of individual weights (reported as sparsity statistics only), filter-norm
//! thresholding (produces a mask individual), plus scratch-training and
//! random-architecture controls.

use crate::error::{Error, Result};
use crate::genome::{Individual, MaskLayout};
use crate::nn::{LayerParams, LayerSpec, NetworkSpec, TrainedNetwork};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Elementwise-threshold result over one filter tensor. Weights with
/// `|w| <= tau` are marked dropped. Purely statistical: sparse kernels are
/// not executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdMask {
    /// One flag per weight, aligned with the tensor's flat data; `true`
    /// means kept.
    pub bits: Vec<bool>,
    pub kept: usize,
    pub total: usize,
}

/// Marks every weight with `|w| <= tau` as dropped (ties dropped). A
/// negative tau keeps everything.
pub fn weight_threshold_mask(filters: &Tensor<f32>, tau: f32) -> ThresholdMask {
    let bits: Vec<bool> = filters.data().iter().map(|&w| w.abs() > tau).collect();
    let kept = bits.iter().filter(|&&b| b).count();
    ThresholdMask {
        total: bits.len(),
        kept,
        bits,
    }
}

/// Per-filter squared Frobenius norms of a conv weight tensor
/// (`[N, C, KH, KW]`).
pub fn filter_squared_norms(weight: &Tensor<f32>) -> Vec<f64> {
    let n = weight.shape()[0];
    let per = weight.len() / n;
    weight
        .data()
        .chunks_exact(per)
        .map(|f| f.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

/// Drops every filter whose squared Frobenius norm is `<= tau` (the last
/// layer is never masked). A layer losing all filters keeps its
/// largest-norm one, so the result is always a valid individual.
pub fn filter_norm_mask(net: &TrainedNetwork<f32>, tau: f64) -> Result<Individual> {
    let layout = MaskLayout::from_spec(&net.spec)?;
    let conv_indices = net.spec.conv_layer_indices();
    let mut bits = Vec::with_capacity(layout.bit_count());
    for (ord, &li) in conv_indices.iter().enumerate() {
        if !layout.layers[ord].maskable {
            continue;
        }
        let LayerParams::Conv { weight, .. } = &net.params[li] else {
            unreachable!("conv layer has conv params");
        };
        let norms = filter_squared_norms(weight);
        let start = bits.len();
        bits.extend(norms.iter().map(|&n| n > tau));
        if !bits[start..].iter().any(|&b| b) {
            let best = norms
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            bits[start + best] = true;
        }
    }
    Individual::from_bits(layout, bits)
}

/// Trains the given (typically compact) architecture from a fresh random
/// initialization; no weights are inherited.
pub fn scratch_train_control(
    spec: &NetworkSpec,
    data: &crate::data::LabeledDataset,
    indices: Option<&[usize]>,
    config: &crate::nn::TrainConfig,
) -> Result<TrainedNetwork<f32>> {
    let mut net = TrainedNetwork::init(spec.clone(), config.seed)?;
    crate::nn::train(&mut net, data, indices, config)?;
    Ok(net)
}

/// Draws per-conv-layer filter counts summing to `target_total_filters`:
/// the final layer keeps its class-count width, every other layer gets at
/// least one filter and at most its original width, and the remaining
/// budget is spread one filter at a time over uniformly random layers.
pub fn random_architecture(
    spec: &NetworkSpec,
    target_total_filters: usize,
    seed: u64,
) -> Result<NetworkSpec> {
    let layout = MaskLayout::from_spec(spec)?;
    let p = layout.depth();
    let last = layout.layers[p - 1].filters;
    let min_total = (p - 1) + last;
    let max_total: usize = layout.layers.iter().map(|l| l.filters).sum();
    if target_total_filters < min_total || target_total_filters > max_total {
        return Err(Error::InvalidArgument(format!(
            "target {target_total_filters} outside feasible range \
             [{min_total}, {max_total}]"
        )));
    }
    let mut counts: Vec<usize> = layout.layers.iter().map(|_| 1).collect();
    counts[p - 1] = last;
    let mut remaining = target_total_filters - (p - 1) - last;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while remaining > 0 {
        let open: Vec<usize> = (0..p - 1)
            .filter(|&i| counts[i] < layout.layers[i].filters)
            .collect();
        let pick = open[rng.random_range(0..open.len())];
        counts[pick] += 1;
        remaining -= 1;
    }
    Ok(respec_with_counts(spec, &counts))
}

/// Rebuilds a spec with new per-conv-layer filter counts, re-chaining input
/// channels and batchnorm widths.
pub fn respec_with_counts(spec: &NetworkSpec, counts: &[usize]) -> NetworkSpec {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut channels = spec.input.2;
    let mut conv_idx = 0usize;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let out = counts[conv_idx];
                layers.push(LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels: channels,
                    out_filters: out,
                    stride,
                    padding,
                });
                channels = out;
                conv_idx += 1;
            }
            LayerSpec::BatchNorm { .. } => layers.push(LayerSpec::BatchNorm { channels }),
            ref other => layers.push(other.clone()),
        }
    }
    NetworkSpec::new(spec.input, layers, spec.class_count)
}

/// Trains a randomly shaped network with roughly the given filter budget
/// from scratch.
pub fn random_architecture_control(
    spec: &NetworkSpec,
    target_total_filters: usize,
    seed: u64,
    data: &crate::data::LabeledDataset,
    indices: Option<&[usize]>,
    config: &crate::nn::TrainConfig,
) -> Result<TrainedNetwork<f32>> {
    let random_spec = random_architecture(spec, target_total_filters, seed)?;
    scratch_train_control(&random_spec, data, indices, config)
}
