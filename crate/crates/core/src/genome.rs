//! Binary filter masks over a network's conv layers and structural
//! compaction of a network under a mask. One bit per convolution filter;
//! the final conv layer (the classifier nodes) is never masked. Dropping
//! filter `n` of layer `i` also drops input channel `n` of layer `i+1`.

use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, NetworkSpec, TrainedNetwork};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Shape information for one conv layer of a mask layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub filters: usize,
    pub maskable: bool,
}

/// Filter counts and kernel sizes of every conv layer, plus the input
/// channel count. Bits of an [`Individual`] cover the maskable layers in
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayout {
    pub input_channels: usize,
    pub layers: Vec<MaskLayer>,
}

impl MaskLayout {
    /// Extracts the conv chain from a network spec. Every conv layer is
    /// maskable except the last.
    pub fn from_spec(spec: &NetworkSpec) -> Result<Arc<MaskLayout>> {
        spec.validate()?;
        let convs: Vec<&LayerSpec> = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .collect();
        let p = convs.len();
        let layers = convs
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_filters,
                    ..
                } => MaskLayer {
                    kernel_h: *kernel_h,
                    kernel_w: *kernel_w,
                    filters: *out_filters,
                    maskable: i + 1 < p,
                },
                _ => unreachable!(),
            })
            .collect();
        Ok(Arc::new(MaskLayout {
            input_channels: spec.input.2,
            layers,
        }))
    }

    /// Number of conv layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total bits of an individual: one per filter of each maskable layer.
    pub fn bit_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.maskable)
            .map(|l| l.filters)
            .sum()
    }

    /// Bit ranges of the maskable layers, in layer order.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for layer in self.layers.iter().filter(|l| l.maskable) {
            out.push(offset..offset + layer.filters);
            offset += layer.filters;
        }
        out
    }

    /// Total filter count over all conv layers (the normalizer of the
    /// per-filter sparsity term).
    pub fn total_filters(&self) -> usize {
        self.layers.iter().map(|l| l.filters).sum()
    }

    /// Full filter-weight count: kernel area times channels times filters,
    /// summed over layers. Biases excluded.
    pub fn total_weights(&self) -> usize {
        let mut total = 0usize;
        let mut in_full = self.input_channels;
        for layer in &self.layers {
            total += layer.kernel_h * layer.kernel_w * in_full * layer.filters;
            in_full = layer.filters;
        }
        total
    }
}

/// Surviving filter counts `[N̂_0 .. N̂_p]` and the per-conv-layer surviving
/// filter indices of a compacted network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactArchitecture {
    /// Length `depth + 1`; leading entry is the (unmasked) input channel
    /// count, trailing entry the full final layer.
    pub counts: Vec<usize>,
    /// Strictly increasing surviving filter indices per conv layer.
    pub survivors: Vec<Vec<usize>>,
}

/// Kept/discarded weight totals for a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightCounts {
    pub kept: usize,
    pub discarded: usize,
    pub total: usize,
}

/// A binary mask over the maskable conv filters of one layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Individual {
    layout: Arc<MaskLayout>,
    bits: Vec<bool>,
}

impl Individual {
    /// Validates length and the at-least-one-filter-per-layer invariant.
    pub fn from_bits(layout: Arc<MaskLayout>, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != layout.bit_count() {
            return Err(Error::LayoutMismatch(format!(
                "{} bits for a layout of {}",
                bits.len(),
                layout.bit_count()
            )));
        }
        for (i, seg) in layout.segments().into_iter().enumerate() {
            if !bits[seg].iter().any(|&b| b) {
                return Err(Error::LayoutMismatch(format!(
                    "maskable layer {i} keeps no filter"
                )));
            }
        }
        Ok(Self { layout, bits })
    }

    /// All filters kept.
    pub fn all_ones(layout: Arc<MaskLayout>) -> Self {
        let bits = vec![true; layout.bit_count()];
        Self { layout, bits }
    }

    /// Each maskable bit set independently with probability `density`, then
    /// repaired so every layer keeps at least one filter.
    pub fn random(layout: Arc<MaskLayout>, density: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density must lie in (0, 1], got {density}"
            )));
        }
        let mut bits: Vec<bool> = (0..layout.bit_count())
            .map(|_| rng.random_range(0.0..1.0) < density)
            .collect();
        repair(&layout, &mut bits, rng);
        Ok(Self { layout, bits })
    }

    pub fn layout(&self) -> &Arc<MaskLayout> {
        &self.layout
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Bits packed little-endian into bytes; the fitness-cache key and the
    /// basis for per-individual RNG streams.
    pub fn packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Surviving filter counts `[N̂_0 .. N̂_p]`: popcount per maskable layer,
    /// with the input channels and final layer passed through unmasked.
    pub fn surviving_counts(&self) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.layout.depth() + 1);
        counts.push(self.layout.input_channels);
        let mut segs = self.layout.segments().into_iter();
        for layer in &self.layout.layers {
            if layer.maskable {
                let seg = segs.next().expect("segment per maskable layer");
                counts.push(self.bits[seg].iter().filter(|&&b| b).count());
            } else {
                counts.push(layer.filters);
            }
        }
        counts
    }

    /// Surviving counts plus explicit surviving-index lists.
    pub fn compact_architecture(&self) -> CompactArchitecture {
        let counts = self.surviving_counts();
        let mut survivors = Vec::with_capacity(self.layout.depth());
        let mut segs = self.layout.segments().into_iter();
        for layer in &self.layout.layers {
            if layer.maskable {
                let seg = segs.next().expect("segment per maskable layer");
                survivors.push(
                    self.bits[seg]
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b)
                        .map(|(i, _)| i)
                        .collect::<Vec<_>>(),
                );
            } else {
                survivors.push((0..layer.filters).collect());
            }
        }
        CompactArchitecture { counts, survivors }
    }

    /// Serializes as '0'/'1' characters with `|` between layers.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.bits.len() + self.layout.depth());
        let segments = self.layout.segments();
        for (i, seg) in segments.iter().enumerate() {
            if i > 0 {
                out.push('|');
            }
            for &b in &self.bits[seg.clone()] {
                out.push(if b { '1' } else { '0' });
            }
        }
        out
    }

    /// Parses the textual form produced by [`Individual::to_text`].
    pub fn from_text(layout: Arc<MaskLayout>, text: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(layout.bit_count());
        for ch in text.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                '|' => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "invalid character {other:?} in individual"
                    )))
                }
            }
        }
        Self::from_bits(layout, bits)
    }
}

/// Sets one uniformly random bit in every maskable layer that keeps no
/// filter. Never unsets a bit.
pub fn repair(layout: &MaskLayout, bits: &mut [bool], rng: &mut ChaCha8Rng) {
    for seg in layout.segments() {
        if !bits[seg.clone()].iter().any(|&b| b) {
            let pick = seg.start + rng.random_range(0..seg.len());
            bits[pick] = true;
        }
    }
}

/// Weight totals under a mask: `total` is the full filter-weight count
/// (kernel area x channels x filters summed over layers, biases excluded),
/// `kept` the count surviving with channel coupling applied.
pub fn weight_counts(layout: &MaskLayout, counts: &[usize]) -> WeightCounts {
    assert_eq!(counts.len(), layout.depth() + 1, "counts must be [N0..Np]");
    let mut total = 0usize;
    let mut kept = 0usize;
    let mut in_full = layout.input_channels;
    for (i, layer) in layout.layers.iter().enumerate() {
        let area = layer.kernel_h * layer.kernel_w;
        total += area * in_full * layer.filters;
        kept += area * counts[i] * counts[i + 1];
        in_full = layer.filters;
    }
    WeightCounts {
        kept,
        discarded: total - kept,
        total,
    }
}

/// Structurally removes masked filters: output-filter slices where the bit
/// is 0 are dropped, matching input-channel slices of the following conv
/// layer are dropped, and batchnorm entries follow their filters (running
/// statistics carried over unchanged). The result is a valid smaller
/// network.
pub fn compact_network(net: &TrainedNetwork<f32>, ind: &Individual) -> Result<TrainedNetwork<f32>> {
    let layout = MaskLayout::from_spec(&net.spec)?;
    if *layout != **ind.layout() {
        return Err(Error::LayoutMismatch(
            "individual layout does not match network".into(),
        ));
    }
    let arch = ind.compact_architecture();

    let mut layers = Vec::with_capacity(net.spec.layers.len());
    let mut params = Vec::with_capacity(net.params.len());
    let mut kept_in: Vec<usize> = (0..net.spec.input.2).collect();
    let mut conv_idx = 0usize;

    for (layer, lp) in net.spec.layers.iter().zip(&net.params) {
        match (layer, lp) {
            (
                &LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    stride,
                    padding,
                    ..
                },
                LayerParams::Conv { weight, bias },
            ) => {
                let kept_out = &arch.survivors[conv_idx];
                let area = kernel_h * kernel_w;
                let mut w = Tensor::zeros(vec![kept_out.len(), kept_in.len(), kernel_h, kernel_w]);
                {
                    let src = weight.data();
                    let dst = w.data_mut();
                    for (a, &n) in kept_out.iter().enumerate() {
                        for (b, &c) in kept_in.iter().enumerate() {
                            let s = (n * in_channels + c) * area;
                            let d = (a * kept_in.len() + b) * area;
                            dst[d..d + area].copy_from_slice(&src[s..s + area]);
                        }
                    }
                }
                let b = Tensor::from_vec(
                    vec![kept_out.len()],
                    kept_out.iter().map(|&n| bias.data()[n]).collect(),
                )?;
                layers.push(LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels: kept_in.len(),
                    out_filters: kept_out.len(),
                    stride,
                    padding,
                });
                params.push(LayerParams::Conv { weight: w, bias: b });
                kept_in = kept_out.clone();
                conv_idx += 1;
            }
            (
                LayerSpec::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let gather = |t: &Tensor<f32>| {
                    Tensor::from_vec(
                        vec![kept_in.len()],
                        kept_in.iter().map(|&c| t.data()[c]).collect(),
                    )
                };
                layers.push(LayerSpec::BatchNorm {
                    channels: kept_in.len(),
                });
                params.push(LayerParams::BatchNorm {
                    gamma: gather(gamma)?,
                    beta: gather(beta)?,
                    running_mean: gather(running_mean)?,
                    running_var: gather(running_var)?,
                });
            }
            (other, _) => {
                layers.push(other.clone());
                params.push(LayerParams::None);
            }
        }
    }

    let compact = TrainedNetwork {
        spec: NetworkSpec::new(net.spec.input, layers, net.spec.class_count),
        params,
    };
    compact.validate()?;
    Ok(compact)
}

/// The kernel/filter layout of the four-layer MNIST architecture.
pub fn lenet_layout() -> Arc<MaskLayout> {
    MaskLayout::from_spec(&crate::nn::lenet_spec()).expect("valid spec")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::lenet_spec;
    use rand::SeedableRng;

    /// Any mask with the published compressed-layer popcounts (9, 17, 84).
    pub(crate) fn paper_mask(layout: &Arc<MaskLayout>) -> Individual {
        let mut bits = Vec::new();
        for (seg, keep) in layout.segments().into_iter().zip([9usize, 17, 84]) {
            for i in 0..seg.len() {
                bits.push(i < keep);
            }
        }
        Individual::from_bits(layout.clone(), bits).unwrap()
    }

    #[test]
    fn layout_extracts_conv_chain() {
        let layout = lenet_layout();
        assert_eq!(layout.input_channels, 1);
        assert_eq!(layout.depth(), 4);
        assert_eq!(layout.bit_count(), 570);
        assert_eq!(layout.total_filters(), 580);
        assert!(!layout.layers[3].maskable);
    }

    #[test]
    fn random_density_one_is_all_ones() {
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ind = Individual::random(layout.clone(), 1.0, &mut rng).unwrap();
        assert!(ind.bits().iter().all(|&b| b));
        assert_eq!(ind, Individual::all_ones(layout));
    }

    #[test]
    fn random_half_density_is_deterministic_and_valid() {
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Individual::random(layout.clone(), 0.5, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Individual::random(layout.clone(), 0.5, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bits().len(), 570);
        for count in &a.surviving_counts()[1..4] {
            assert!(*count >= 1);
        }
    }

    #[test]
    fn near_zero_density_hits_repair_floor() {
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ind = Individual::random(layout.clone(), 1e-12, &mut rng).unwrap();
        assert_eq!(ind.surviving_counts(), vec![1, 1, 1, 1, 10]);
    }

    #[test]
    fn surviving_counts_match_paper_architecture() {
        let layout = lenet_layout();
        assert_eq!(
            Individual::all_ones(layout.clone()).surviving_counts(),
            vec![1, 20, 50, 500, 10]
        );
        assert_eq!(paper_mask(&layout).surviving_counts(), vec![1, 9, 17, 84, 10]);
    }

    #[test]
    fn weight_counts_reproduce_lenet_totals() {
        let layout = lenet_layout();
        let all = Individual::all_ones(layout.clone());
        let full = weight_counts(&layout, &all.surviving_counts());
        assert_eq!(full.total, 430_500);
        assert_eq!(full.discarded, 0);

        let wc = weight_counts(&layout, &paper_mask(&layout).surviving_counts());
        assert_eq!(wc.kept, 27_738);
        assert_eq!(wc.discarded, 402_762);
    }

    #[test]
    fn repair_only_sets_bits() {
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bits = vec![false; layout.bit_count()];
        bits[3] = true; // layer 1 already valid
        let before = bits.clone();
        repair(&layout, &mut bits, &mut rng);
        for (b, a) in before.iter().zip(&bits) {
            assert!(!b || *a, "repair must never unset a bit");
        }
        for seg in layout.segments() {
            assert!(bits[seg].iter().any(|&b| b));
        }
    }

    #[test]
    fn compact_all_ones_is_identity() {
        let net = TrainedNetwork::<f32>::init(lenet_spec(), 3).unwrap();
        let layout = lenet_layout();
        let compact = compact_network(&net, &Individual::all_ones(layout)).unwrap();
        assert_eq!(compact.spec, net.spec);
        let batch = Tensor::from_vec(
            vec![2, 28, 28, 1],
            (0..2 * 784).map(|v| (v % 97) as f32 / 96.0).collect(),
        )
        .unwrap();
        assert_eq!(
            compact.forward(&batch).unwrap().data(),
            net.forward(&batch).unwrap().data()
        );
    }

    #[test]
    fn compact_matches_masked_forward() {
        // Zeroing a filter's weights/bias (and its batchnorm scale/shift)
        // must make compaction logit-equivalent.
        use crate::nn::NetworkSpec;
        let spec = NetworkSpec::new(
            (6, 6, 1),
            vec![
                LayerSpec::conv(3, 3, 1, 5),
                LayerSpec::BatchNorm { channels: 5 },
                LayerSpec::Relu,
                LayerSpec::conv(4, 4, 5, 3),
                LayerSpec::SoftmaxLoss,
            ],
            3,
        );
        let mut net = TrainedNetwork::<f32>::init(spec, 9).unwrap();
        let drop = 2usize; // filter index to remove in layer 1
        if let LayerParams::Conv { weight, bias } = &mut net.params[0] {
            let area = 9;
            weight.data_mut()[drop * area..(drop + 1) * area].fill(0.0);
            bias.data_mut()[drop] = 0.0;
        }
        if let LayerParams::BatchNorm { gamma, beta, .. } = &mut net.params[1] {
            gamma.data_mut()[drop] = 0.0;
            beta.data_mut()[drop] = 0.0;
        }
        let layout = MaskLayout::from_spec(&net.spec).unwrap();
        let mut bits = vec![true; layout.bit_count()];
        bits[drop] = false;
        let ind = Individual::from_bits(layout, bits).unwrap();
        let compact = compact_network(&net, &ind).unwrap();
        assert_eq!(compact.spec.layer_output_dims().unwrap().len(), 5);

        let batch = Tensor::from_vec(
            vec![4, 6, 6, 1],
            (0..4 * 36).map(|v| ((v * 37) % 101) as f32 / 100.0).collect(),
        )
        .unwrap();
        let full = net.forward(&batch).unwrap();
        let small = compact.forward(&batch).unwrap();
        for (a, b) in full.data().iter().zip(small.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel < 1e-5, "logits diverge: {a} vs {b}");
        }
    }

    #[test]
    fn compact_paper_mask_weight_count() {
        let net = TrainedNetwork::<f32>::init(lenet_spec(), 1).unwrap();
        let layout = lenet_layout();
        let compact = compact_network(&net, &paper_mask(&layout)).unwrap();
        let conv_weights: usize = compact
            .spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_filters,
                    ..
                } => Some(kernel_h * kernel_w * in_channels * out_filters),
                _ => None,
            })
            .sum();
        assert_eq!(conv_weights, 27_738);
    }

    #[test]
    fn compact_rejects_foreign_layout() {
        let net = TrainedNetwork::<f32>::init(lenet_spec(), 0).unwrap();
        let other_spec = NetworkSpec::new(
            (6, 6, 1),
            vec![LayerSpec::conv(3, 3, 1, 4), LayerSpec::conv(4, 4, 4, 2)],
            2,
        );
        let other = MaskLayout::from_spec(&other_spec).unwrap();
        let ind = Individual::all_ones(other);
        assert!(matches!(
            compact_network(&net, &ind),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let layout = lenet_layout();
        let ind = paper_mask(&layout);
        let text = ind.to_text();
        assert_eq!(text.matches('|').count(), 2);
        let back = Individual::from_text(layout, &text).unwrap();
        assert_eq!(back, ind);
    }
}
