//! Individual fitness: `f = 1 - E + lambda * sparsity_term`, where `E` is
//! the post-fine-tune error on the evaluation slice and the sparsity term
//! rewards discarded filters or weights. Results are cached per exact bit
//! string, so re-evaluating an individual is free and identical.

use crate::data::{LabeledDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::genome::{compact_network, weight_counts, Individual, MaskLayout};
use crate::nn::{evaluate_error_on, train_steps, TrainConfig, TrainedNetwork};
use crate::tensor::fnv1a;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// How discarded filters are folded into the sparsity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitnessVariant {
    /// Every filter counts equally: discarded filters over total filters.
    PerFilter,
    /// Discarded filters weighted by kernel area times original channel
    /// count, over the total weight count.
    FilterSize,
    /// Product form coupling consecutive layers' *discarded* counts. Kept
    /// selectable for faithfulness; the term vanishes for any layer whose
    /// predecessor is fully kept.
    CoupledLiteral,
    /// Discarded weights of the compressed network, with channel coupling:
    /// `(M - kept) / M`. The default.
    CoupledCorrected,
}

impl FitnessVariant {
    pub fn name(self) -> &'static str {
        match self {
            FitnessVariant::PerFilter => "v1-uniform",
            FitnessVariant::FilterSize => "v2-sized",
            FitnessVariant::CoupledLiteral => "v3-coupled-literal",
            FitnessVariant::CoupledCorrected => "v3-coupled-corrected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "v1-uniform" => FitnessVariant::PerFilter,
            "v2-sized" => FitnessVariant::FilterSize,
            "v3-coupled-literal" => FitnessVariant::CoupledLiteral,
            "v3-coupled-corrected" => FitnessVariant::CoupledCorrected,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown fitness variant {other:?}"
                )))
            }
        })
    }
}

/// Normalized sparsity reward in `[0, 1]`; 0 for the all-ones individual
/// under every variant.
pub fn sparsity_term(layout: &MaskLayout, ind: &Individual, variant: FitnessVariant) -> f64 {
    let counts = ind.surviving_counts();
    let discarded_per_layer: Vec<usize> = layout
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.filters - counts[i + 1])
        .collect();
    match variant {
        FitnessVariant::PerFilter => {
            let discarded: usize = discarded_per_layer.iter().sum();
            discarded as f64 / layout.total_filters() as f64
        }
        FitnessVariant::FilterSize => {
            let mut acc = 0usize;
            let mut in_full = layout.input_channels;
            for (layer, &d) in layout.layers.iter().zip(&discarded_per_layer) {
                acc += layer.kernel_h * layer.kernel_w * in_full * d;
                in_full = layer.filters;
            }
            acc as f64 / layout.total_weights() as f64
        }
        FitnessVariant::CoupledLiteral => {
            // Discarded count of the "layer 0" input is zero by definition.
            let mut acc = 0usize;
            let mut prev_discarded = 0usize;
            for (layer, &d) in layout.layers.iter().zip(&discarded_per_layer) {
                acc += layer.kernel_h * layer.kernel_w * prev_discarded * d;
                prev_discarded = d;
            }
            acc as f64 / layout.total_weights() as f64
        }
        FitnessVariant::CoupledCorrected => {
            let wc = weight_counts(layout, &counts);
            wc.discarded as f64 / wc.total as f64
        }
    }
}

/// Outcome of one fitness evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessReport {
    pub error: f64,
    pub sparsity_term: f64,
    pub fitness: f64,
    pub variant: FitnessVariant,
    pub fine_tuned: bool,
    pub diverged: bool,
}

/// Fitness evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessConfig {
    pub lambda: f64,
    pub variant: FitnessVariant,
    /// Mini-batch SGD steps applied to each compacted candidate before its
    /// error is measured.
    pub finetune_steps: usize,
    /// Optimizer settings for candidate fine-tuning (`epochs` unused).
    pub finetune: TrainConfig,
    /// Full fine-tune applied once to the final compressed network.
    pub final_finetune: TrainConfig,
    /// Master seed; per-individual streams mix in the bit-string hash.
    pub seed: u64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            variant: FitnessVariant::CoupledCorrected,
            finetune_steps: 157, // one pass over a 10k subset at batch 64
            finetune: TrainConfig {
                epochs: 1,
                batch_size: 64,
                learning_rate: 0.01, // a tenth of the training default
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 0,
            },
            final_finetune: TrainConfig {
                epochs: 3,
                batch_size: 64,
                learning_rate: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 0,
            },
            seed: 0,
        }
    }
}

impl FitnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.finetune.validate()?;
        self.final_finetune.validate()
    }
}

/// Anything that can score individuals. Evaluations of distinct individuals
/// may run concurrently; implementations must be deterministic per bit
/// string.
pub trait FitnessEval: Sync {
    fn layout(&self) -> &Arc<MaskLayout>;
    fn evaluate(&self, ind: &Individual) -> FitnessReport;
}

/// Fine-tunes a compacted network for `steps` mini-batch updates on the
/// given subset. `steps == 0` leaves the network untouched. Divergence is
/// reported, not fatal.
pub fn fine_tune(
    net: &mut TrainedNetwork<f32>,
    data: &LabeledDataset,
    subset: &[usize],
    steps: usize,
    config: &TrainConfig,
) -> Result<bool> {
    if steps == 0 {
        return Ok(false);
    }
    match train_steps(net, data, subset, steps, config) {
        Ok(()) => Ok(false),
        Err(Error::Diverged { .. }) => Ok(true),
        Err(e) => Err(e),
    }
}

/// Network-backed fitness: compact, fine-tune on the fine-tune subset,
/// measure the error on the held-out evaluation slice.
pub struct NetworkFitness<'a> {
    net: &'a TrainedNetwork<f32>,
    data: &'a LabeledDataset,
    split: &'a SplitPlan,
    config: FitnessConfig,
    layout: Arc<MaskLayout>,
    cache: Mutex<HashMap<Vec<u8>, FitnessReport>>,
}

impl<'a> NetworkFitness<'a> {
    pub fn new(
        net: &'a TrainedNetwork<f32>,
        data: &'a LabeledDataset,
        split: &'a SplitPlan,
        config: FitnessConfig,
    ) -> Result<Self> {
        config.validate()?;
        let layout = MaskLayout::from_spec(&net.spec)?;
        Ok(Self {
            net,
            data,
            split,
            config,
            layout,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &FitnessConfig {
        &self.config
    }

    fn evaluate_fresh(&self, ind: &Individual, key: &[u8]) -> FitnessReport {
        let mut compact = compact_network(self.net, ind).expect("layout checked at construction");
        let mut ft = self.config.finetune.clone();
        ft.seed = self.config.seed ^ fnv1a(key);
        let diverged = fine_tune(
            &mut compact,
            self.data,
            &self.split.finetune,
            self.config.finetune_steps,
            &ft,
        )
        .unwrap_or(true);
        let error = if diverged {
            1.0
        } else {
            evaluate_error_on(&compact, self.data, &self.split.eval).unwrap_or(1.0)
        };
        let sparsity = sparsity_term(&self.layout, ind, self.config.variant);
        FitnessReport {
            error,
            sparsity_term: sparsity,
            fitness: 1.0 - error + self.config.lambda * sparsity,
            variant: self.config.variant,
            fine_tuned: self.config.finetune_steps > 0,
            diverged,
        }
    }
}

impl FitnessEval for NetworkFitness<'_> {
    fn layout(&self) -> &Arc<MaskLayout> {
        &self.layout
    }

    fn evaluate(&self, ind: &Individual) -> FitnessReport {
        let key = ind.packed_bits();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let report = self.evaluate_fresh(ind, &key);
        // Last write wins; concurrent writers hold identical values.
        self.cache.lock().unwrap().insert(key, report.clone());
        report
    }
}

/// Deterministic mask-only pseudo-error: a seeded quadratic form over the
/// bits squashed into `(0, 1)`. Stands in for network error so GA dynamics
/// can be verified against exhaustive enumeration without any training.
pub struct SurrogateFitness {
    layout: Arc<MaskLayout>,
    lambda: f64,
    variant: FitnessVariant,
    linear: Vec<f64>,
    pairwise: Vec<f64>, // row-major upper triangle, n*(n-1)/2 entries
}

impl SurrogateFitness {
    pub fn new(layout: Arc<MaskLayout>, lambda: f64, variant: FitnessVariant, seed: u64) -> Self {
        let n = layout.bit_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairwise: Vec<f64> = (0..n * (n - 1) / 2)
            .map(|_| rng.random_range(-0.4..0.4))
            .collect();
        Self {
            layout,
            lambda,
            variant,
            linear,
            pairwise,
        }
    }

    /// The pseudo-error for a mask, independent of any network.
    pub fn pseudo_error(&self, ind: &Individual) -> f64 {
        let bits = ind.bits();
        let n = bits.len();
        let mut z = 0.0;
        for (i, &b) in bits.iter().enumerate() {
            if b {
                z += self.linear[i];
            }
        }
        let mut k = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if bits[i] && bits[j] {
                    z += self.pairwise[k];
                }
                k += 1;
            }
        }
        let scaled = z / (n as f64).sqrt();
        1.0 / (1.0 + (-scaled).exp())
    }
}

impl FitnessEval for SurrogateFitness {
    fn layout(&self) -> &Arc<MaskLayout> {
        &self.layout
    }

    fn evaluate(&self, ind: &Individual) -> FitnessReport {
        let error = self.pseudo_error(ind);
        let sparsity = sparsity_term(&self.layout, ind, self.variant);
        FitnessReport {
            error,
            sparsity_term: sparsity,
            fitness: 1.0 - error + self.lambda * sparsity,
            variant: self.variant,
            fine_tuned: false,
            diverged: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::genome::lenet_layout;
    use crate::nn::{evaluate_error_on, LayerSpec, NetworkSpec};

    fn paper_mask(layout: &Arc<MaskLayout>) -> Individual {
        let mut bits = Vec::new();
        for (seg, keep) in layout.segments().into_iter().zip([9usize, 17, 84]) {
            for i in 0..seg.len() {
                bits.push(i < keep);
            }
        }
        Individual::from_bits(layout.clone(), bits).unwrap()
    }

    #[test]
    fn all_ones_has_zero_sparsity_under_every_variant() {
        let layout = lenet_layout();
        let ind = Individual::all_ones(layout.clone());
        for v in [
            FitnessVariant::PerFilter,
            FitnessVariant::FilterSize,
            FitnessVariant::CoupledLiteral,
            FitnessVariant::CoupledCorrected,
        ] {
            assert_eq!(sparsity_term(&layout, &ind, v), 0.0);
        }
    }

    #[test]
    fn paper_mask_sparsity_values() {
        // Arithmetic oracles:
        //   sized:    (25*1*11 + 25*20*33 + 16*50*416 + 0) / 430500
        //   literal:  (0 + 25*11*33 + 16*33*416 + 0) / 430500
        //   corrected: 402762 / 430500
        let layout = lenet_layout();
        let ind = paper_mask(&layout);
        let sized = sparsity_term(&layout, &ind, FitnessVariant::FilterSize);
        assert!((sized - 349_575.0 / 430_500.0).abs() < 1e-12);
        assert!((sized - 0.81202).abs() < 1e-5, "sized {sized}");

        let literal = sparsity_term(&layout, &ind, FitnessVariant::CoupledLiteral);
        assert!((literal - 228_723.0 / 430_500.0).abs() < 1e-12);
        assert!((literal - 0.53130).abs() < 1e-5, "literal {literal}");

        let corrected = sparsity_term(&layout, &ind, FitnessVariant::CoupledCorrected);
        assert!((corrected - 402_762.0 / 430_500.0).abs() < 1e-12);
        assert!((corrected - 0.93556).abs() < 1e-5, "corrected {corrected}");
    }

    #[test]
    fn per_filter_term_at_repair_floor() {
        // One surviving filter per maskable layer: (L - (p-1) - N_p) / L.
        let layout = lenet_layout();
        let mut bits = vec![false; layout.bit_count()];
        for seg in layout.segments() {
            bits[seg.start] = true;
        }
        let ind = Individual::from_bits(layout.clone(), bits).unwrap();
        let term = sparsity_term(&layout, &ind, FitnessVariant::PerFilter);
        let expected = (580.0 - 3.0 - 10.0) / 580.0;
        assert!((term - expected).abs() < 1e-12);
    }

    #[test]
    fn sparsity_is_monotone_in_bit_clears() {
        // Flipping any kept bit to discarded never lowers the term.
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ind = Individual::random(layout.clone(), 0.7, &mut rng).unwrap();
        for v in [
            FitnessVariant::PerFilter,
            FitnessVariant::FilterSize,
            FitnessVariant::CoupledLiteral,
            FitnessVariant::CoupledCorrected,
        ] {
            let base = sparsity_term(&layout, &ind, v);
            for flip in 0..ind.bits().len() {
                if !ind.bits()[flip] {
                    continue;
                }
                let mut bits = ind.bits().to_vec();
                bits[flip] = false;
                let Ok(cleared) = Individual::from_bits(layout.clone(), bits) else {
                    continue; // would empty a layer; repair territory
                };
                let term = sparsity_term(&layout, &cleared, v);
                assert!(
                    term >= base - 1e-15,
                    "{}: clearing bit {flip} lowered the term: {term} < {base}",
                    v.name()
                );
            }
        }
    }

    #[test]
    fn corrected_variant_equals_weight_count_ratio() {
        let layout = lenet_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let ind = Individual::random(layout.clone(), 0.4, &mut rng).unwrap();
            let term = sparsity_term(&layout, &ind, FitnessVariant::CoupledCorrected);
            let wc = weight_counts(&layout, &ind.surviving_counts());
            assert_eq!(term, wc.discarded as f64 / wc.total as f64);
        }
    }

    fn tiny_setup() -> (TrainedNetwork<f32>, LabeledDataset, SplitPlan) {
        let spec = NetworkSpec::new(
            (8, 8, 1),
            vec![
                LayerSpec::conv(5, 5, 1, 8),
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::conv(2, 2, 8, 2),
                LayerSpec::SoftmaxLoss,
            ],
            2,
        );
        let data = synthetic_blobs(2, 120, (8, 8, 1), 0.05, 5).unwrap();
        let mut net = TrainedNetwork::<f32>::init(spec, 1).unwrap();
        let split = SplitPlan::new(data.len(), 40, 100, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 2,
        };
        crate::nn::train(&mut net, &data, Some(&split.train), &cfg).unwrap();
        (net, data, split)
    }

    #[test]
    fn all_ones_zero_lambda_is_one_minus_error() {
        let (net, data, split) = tiny_setup();
        let config = FitnessConfig {
            lambda: 0.0,
            finetune_steps: 0,
            ..FitnessConfig::default()
        };
        let eval = NetworkFitness::new(&net, &data, &split, config).unwrap();
        let ind = Individual::all_ones(eval.layout().clone());
        let report = eval.evaluate(&ind);
        let direct = evaluate_error_on(&net, &data, &split.eval).unwrap();
        assert_eq!(report.error, direct);
        assert_eq!(report.fitness, 1.0 - direct);
        assert_eq!(report.sparsity_term, 0.0);
        assert!(!report.fine_tuned);
    }

    #[test]
    fn lambda_only_scales_through_sparsity() {
        let (net, data, split) = tiny_setup();
        let config = FitnessConfig {
            lambda: 0.9,
            finetune_steps: 0,
            ..FitnessConfig::default()
        };
        let eval = NetworkFitness::new(&net, &data, &split, config).unwrap();
        let ind = Individual::all_ones(eval.layout().clone());
        let report = eval.evaluate(&ind);
        assert_eq!(report.fitness, 1.0 - report.error);
    }

    #[test]
    fn repeat_evaluation_is_cached_and_identical() {
        let (net, data, split) = tiny_setup();
        let config = FitnessConfig {
            finetune_steps: 5,
            ..FitnessConfig::default()
        };
        let eval = NetworkFitness::new(&net, &data, &split, config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ind = Individual::random(eval.layout().clone(), 0.6, &mut rng).unwrap();
        let a = eval.evaluate(&ind);
        let b = eval.evaluate(&ind);
        assert_eq!(a, b);
        // A second evaluator must agree: caching is transparent.
        let eval2 = NetworkFitness::new(&net, &data, &split, eval.config().clone()).unwrap();
        assert_eq!(eval2.evaluate(&ind), a);
    }

    #[test]
    fn fine_tune_zero_steps_is_identity() {
        let (net, data, split) = tiny_setup();
        let mut copy = net.clone();
        let changed = fine_tune(&mut copy, &data, &split.finetune, 0, &TrainConfig::default());
        assert!(!changed.unwrap());
        assert_eq!(copy, net);
    }

    #[test]
    fn fine_tune_does_not_hurt_much() {
        let (net, data, split) = tiny_setup();
        let layout = MaskLayout::from_spec(&net.spec).unwrap();
        let mut bits = vec![true; layout.bit_count()];
        for i in (0..bits.len()).step_by(2) {
            bits[i] = false; // drop half the filters
        }
        let ind = Individual::from_bits(layout, bits).unwrap();
        let mut compact = compact_network(&net, &ind).unwrap();
        let before = evaluate_error_on(&compact, &data, &split.eval).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 7,
            epochs: 1,
        };
        fine_tune(&mut compact, &data, &split.finetune, 200, &cfg).unwrap();
        let after = evaluate_error_on(&compact, &data, &split.eval).unwrap();
        assert!(
            after <= before + 0.02,
            "fine-tune made things worse: {before} -> {after}"
        );
    }

    #[test]
    fn surrogate_is_deterministic_and_bounded() {
        let layout = lenet_layout();
        let sur = SurrogateFitness::new(layout.clone(), 0.9, FitnessVariant::PerFilter, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ind = Individual::random(layout.clone(), 0.5, &mut rng).unwrap();
            let a = sur.evaluate(&ind);
            let b = sur.evaluate(&ind);
            assert_eq!(a, b);
            assert!(a.error > 0.0 && a.error < 1.0);
            assert!(a.fitness > 0.0);
        }
    }
}
