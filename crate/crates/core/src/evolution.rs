//! The genetic algorithm: fitness-proportional selection, two-point segment
//! crossover, fragment-complement mutation, elitism, and the full
//! evolutionary compression loop.
//!
//! Determinism: all operator randomness is drawn on the orchestration thread
//! in slot order; fitness evaluations are pure per bit string, so results do
//! not depend on how many workers evaluate a generation.

use crate::error::{Error, Result};
use crate::fitness::{FitnessConfig, FitnessEval, FitnessReport, NetworkFitness};
use crate::genome::{compact_network, repair, weight_counts, Individual, MaskLayout};
use crate::nn::TrainedNetwork;
use crate::data::{LabeledDataset, SplitPlan};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::HashMap;

/// Genetic-algorithm settings. `s1 + s2 + s3` (selection, crossover,
/// mutation probabilities) must sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GAConfig {
    pub population: usize,
    pub iterations: usize,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub init_density: f64,
    pub seed: u64,
}

impl Default for GAConfig {
    fn default() -> Self {
        Self {
            population: 1000,
            iterations: 100,
            s1: 0.2,
            s2: 0.7,
            s3: 0.1,
            init_density: 0.5,
            seed: 0,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::InvalidArgument(format!(
                "population must be >= 2, got {}",
                self.population
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.s1 < 0.0 || self.s2 < 0.0 || self.s3 < 0.0 {
            return Err(Error::InvalidArgument(
                "operator probabilities must be non-negative".into(),
            ));
        }
        if ((self.s1 + self.s2 + self.s3) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "s1 + s2 + s3 must equal 1, got {}",
                self.s1 + self.s2 + self.s3
            )));
        }
        if !(self.init_density > 0.0 && self.init_density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "init_density must lie in (0, 1], got {}",
                self.init_density
            )));
        }
        Ok(())
    }
}

/// An individual with its fitness report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedIndividual {
    pub individual: Individual,
    pub report: FitnessReport,
}

/// One fully evaluated generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub generation: usize,
    pub members: Vec<EvaluatedIndividual>,
}

/// Per-generation summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub min_fitness: f64,
    pub best_error: f64,
    pub best_kept_weight_fraction: f64,
    pub ops_selection: usize,
    pub ops_crossover: usize,
    pub ops_mutation: usize,
}

/// Evolution trace: one record per generation, elitism makes best fitness
/// non-decreasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionLog {
    pub records: Vec<GenerationRecord>,
}

impl EvolutionLog {
    /// Line-delimited text form, suitable for external plotting.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# evolution log v1\n");
        for r in &self.records {
            out.push_str(&format!(
                "gen={} best_fitness={:.9} mean_fitness={:.9} min_fitness={:.9} \
                 best_error={:.9} best_kept_frac={:.9} sel={} xover={} mut={}\n",
                r.generation,
                r.best_fitness,
                r.mean_fitness,
                r.min_fitness,
                r.best_error,
                r.best_kept_weight_fraction,
                r.ops_selection,
                r.ops_crossover,
                r.ops_mutation
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields: HashMap<&str, &str> = HashMap::new();
            for pair in line.split_whitespace() {
                let (k, v) = pair.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(format!("malformed log field {pair:?}"))
                })?;
                fields.insert(k, v);
            }
            let get = |k: &str| -> Result<&str> {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("log line missing {k}")))
            };
            records.push(GenerationRecord {
                generation: get("gen")?.parse().map_err(bad_num)?,
                best_fitness: get("best_fitness")?.parse().map_err(bad_num)?,
                mean_fitness: get("mean_fitness")?.parse().map_err(bad_num)?,
                min_fitness: get("min_fitness")?.parse().map_err(bad_num)?,
                best_error: get("best_error")?.parse().map_err(bad_num)?,
                best_kept_weight_fraction: get("best_kept_frac")?.parse().map_err(bad_num)?,
                ops_selection: get("sel")?.parse().map_err(bad_num)?,
                ops_crossover: get("xover")?.parse().map_err(bad_num)?,
                ops_mutation: get("mut")?.parse().map_err(bad_num)?,
            });
        }
        Ok(EvolutionLog { records })
    }
}

fn bad_num<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidArgument(format!("malformed log number: {e}"))
}

/// Fitness-proportional selection probabilities. Rejects non-positive
/// fitness, which the `1 - E` fitness floor is designed to prevent.
pub fn selection_probabilities(fitnesses: &[f64]) -> Result<Vec<f64>> {
    if fitnesses.is_empty() {
        return Err(Error::InvalidArgument("no fitnesses".into()));
    }
    if fitnesses.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidArgument(
            "selection requires strictly positive fitness".into(),
        ));
    }
    let sum: f64 = fitnesses.iter().sum();
    Ok(fitnesses.iter().map(|f| f / sum).collect())
}

/// Draws an index distributed according to the given probabilities.
pub fn roulette_select(probabilities: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

/// Two-point crossover with explicit cut points `lo <= hi`: the segment
/// `[lo, hi)` is swapped between the parents. Offspring are repaired.
pub fn crossover_at(
    parent1: &Individual,
    parent2: &Individual,
    lo: usize,
    hi: usize,
    rng: &mut ChaCha8Rng,
) -> (Individual, Individual) {
    let layout = parent1.layout().clone();
    debug_assert_eq!(**parent2.layout(), *layout);
    let mut a = parent1.bits().to_vec();
    let mut b = parent2.bits().to_vec();
    for i in lo..hi {
        std::mem::swap(&mut a[i], &mut b[i]);
    }
    repair(&layout, &mut a, rng);
    repair(&layout, &mut b, rng);
    (
        Individual::from_bits(layout.clone(), a).expect("repair restores validity"),
        Individual::from_bits(layout, b).expect("repair restores validity"),
    )
}

/// Two-point crossover with uniformly drawn cut points.
pub fn crossover(
    parent1: &Individual,
    parent2: &Individual,
    rng: &mut ChaCha8Rng,
) -> (Individual, Individual) {
    let len = parent1.bits().len();
    let c1 = rng.random_range(0..=len);
    let c2 = rng.random_range(0..=len);
    let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
    crossover_at(parent1, parent2, lo, hi, rng)
}

/// Complements the fragment `[lo, hi)` (the XOR mutation), then repairs.
pub fn mutate_at(
    parent: &Individual,
    lo: usize,
    hi: usize,
    rng: &mut ChaCha8Rng,
) -> Individual {
    let layout = parent.layout().clone();
    let mut bits = parent.bits().to_vec();
    for b in &mut bits[lo..hi] {
        *b = !*b;
    }
    repair(&layout, &mut bits, rng);
    Individual::from_bits(layout, bits).expect("repair restores validity")
}

/// Fragment mutation with uniformly drawn endpoints.
pub fn mutate(parent: &Individual, rng: &mut ChaCha8Rng) -> Individual {
    let len = parent.bits().len();
    let c1 = rng.random_range(0..=len);
    let c2 = rng.random_range(0..=len);
    let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
    mutate_at(parent, lo, hi, rng)
}

/// Deterministic preference: higher fitness, then fewer kept weights, then
/// lexicographically smaller bit string.
fn better(a: &EvaluatedIndividual, b: &EvaluatedIndividual, layout: &MaskLayout) -> Ordering {
    match a.report.fitness.partial_cmp(&b.report.fitness) {
        Some(Ordering::Equal) | None => {}
        Some(ord) => return ord,
    }
    let ka = weight_counts(layout, &a.individual.surviving_counts()).kept;
    let kb = weight_counts(layout, &b.individual.surviving_counts()).kept;
    match kb.cmp(&ka) {
        Ordering::Equal => {}
        ord => return ord, // fewer kept weights wins
    }
    b.individual.bits().cmp(a.individual.bits()) // smaller bit string wins
}

fn best_of<'a>(
    members: &'a [EvaluatedIndividual],
    layout: &MaskLayout,
) -> &'a EvaluatedIndividual {
    members
        .iter()
        .max_by(|a, b| better(a, b, layout))
        .expect("population is non-empty")
}

enum Slot {
    Fixed(Individual),
    /// Crossover offspring pair; the fitter one fills the slot.
    Choose(Individual, Individual),
}

/// Evaluates any not-yet-seen bit strings in parallel and returns a lookup
/// from packed bits to report. Work is split per individual; each evaluation
/// is sequential inside, so the outcome is independent of worker count.
fn evaluate_batch<F: FitnessEval>(
    eval: &F,
    pending: Vec<Individual>,
) -> HashMap<Vec<u8>, FitnessReport> {
    let mut unique: HashMap<Vec<u8>, Individual> = HashMap::new();
    for ind in pending {
        unique.entry(ind.packed_bits()).or_insert(ind);
    }
    unique
        .into_par_iter()
        .map(|(key, ind)| {
            let report = eval.evaluate(&ind);
            (key, report)
        })
        .collect()
}

/// Result of the evolutionary search proper (no final fine-tune).
#[derive(Debug, Clone)]
pub struct EcsResult {
    pub best: EvaluatedIndividual,
    pub log: EvolutionLog,
}

/// Runs the evolutionary compression search: a random initial population is
/// bred for `iterations` generations with elitism in slot one and the
/// selection / crossover / mutation mix driven by `(s1, s2, s3)`. Returns
/// the fittest individual of the final generation.
pub fn run_ecs<F: FitnessEval>(eval: &F, config: &GAConfig) -> Result<EcsResult> {
    config.validate()?;
    let layout = eval.layout().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut current: Vec<Individual> = (0..config.population)
        .map(|_| Individual::random(layout.clone(), config.init_density, &mut rng))
        .collect::<Result<_>>()?;
    let mut ops = (0usize, 0usize, 0usize);
    let mut log = EvolutionLog::default();
    let mut final_population: Vec<EvaluatedIndividual> = Vec::new();

    for generation in 1..=config.iterations {
        let reports = evaluate_batch(eval, current.clone());
        let members: Vec<EvaluatedIndividual> = current
            .iter()
            .map(|ind| EvaluatedIndividual {
                individual: ind.clone(),
                report: reports
                    .get(&ind.packed_bits())
                    .cloned()
                    .unwrap_or_else(|| eval.evaluate(ind)),
            })
            .collect();

        let best = best_of(&members, &layout);
        let fitnesses: Vec<f64> = members.iter().map(|m| m.report.fitness).collect();
        let mean = fitnesses.iter().sum::<f64>() / fitnesses.len() as f64;
        let min = fitnesses.iter().cloned().fold(f64::INFINITY, f64::min);
        let wc = weight_counts(&layout, &best.individual.surviving_counts());
        log.records.push(GenerationRecord {
            generation,
            best_fitness: best.report.fitness,
            mean_fitness: mean,
            min_fitness: min,
            best_error: best.report.error,
            best_kept_weight_fraction: wc.kept as f64 / wc.total as f64,
            ops_selection: ops.0,
            ops_crossover: ops.1,
            ops_mutation: ops.2,
        });
        log::info!(
            "generation {generation}: best fitness {:.4}, error {:.4}, kept {:.3}",
            best.report.fitness,
            best.report.error,
            wc.kept as f64 / wc.total as f64
        );

        if generation == config.iterations {
            final_population = members;
            break;
        }

        // Fitness can in principle reach exactly zero (error 1 with nothing
        // discarded); floor it so roulette selection stays total.
        let floored: Vec<f64> = fitnesses.iter().map(|f| f.max(1e-12)).collect();
        let probs = selection_probabilities(&floored)?;

        ops = (0, 0, 0);
        let mut slate: Vec<Slot> = Vec::with_capacity(config.population);
        slate.push(Slot::Fixed(best.individual.clone()));
        for _ in 1..config.population {
            let s: f64 = rng.random_range(0.0..1.0);
            if s < config.s1 {
                ops.0 += 1;
                let parent = roulette_select(&probs, &mut rng);
                slate.push(Slot::Fixed(members[parent].individual.clone()));
            } else if s < config.s1 + config.s2 {
                ops.1 += 1;
                let p1 = roulette_select(&probs, &mut rng);
                let p2 = roulette_select(&probs, &mut rng);
                let (o1, o2) = crossover(
                    &members[p1].individual,
                    &members[p2].individual,
                    &mut rng,
                );
                slate.push(Slot::Choose(o1, o2));
            } else {
                ops.2 += 1;
                let parent = roulette_select(&probs, &mut rng);
                slate.push(Slot::Fixed(mutate(&members[parent].individual, &mut rng)));
            }
        }

        // Score crossover offspring (cache makes repeats free), keep the
        // fitter of each pair, discard the weaker one.
        let pending: Vec<Individual> = slate
            .iter()
            .flat_map(|slot| match slot {
                Slot::Fixed(_) => Vec::new(),
                Slot::Choose(a, b) => vec![a.clone(), b.clone()],
            })
            .collect();
        let offspring_reports = evaluate_batch(eval, pending);
        current = slate
            .into_iter()
            .map(|slot| match slot {
                Slot::Fixed(ind) => ind,
                Slot::Choose(a, b) => {
                    let ra = offspring_reports[&a.packed_bits()].clone();
                    let rb = offspring_reports[&b.packed_bits()].clone();
                    let ea = EvaluatedIndividual {
                        individual: a,
                        report: ra,
                    };
                    let eb = EvaluatedIndividual {
                        individual: b,
                        report: rb,
                    };
                    if better(&ea, &eb, &layout) == Ordering::Less {
                        eb.individual
                    } else {
                        ea.individual
                    }
                }
            })
            .collect();
    }

    let best = best_of(&final_population, &layout).clone();
    Ok(EcsResult { best, log })
}

/// Everything a compression run produces.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub best: EvaluatedIndividual,
    pub compact: TrainedNetwork<f32>,
    pub log: EvolutionLog,
    /// True if the final full fine-tune diverged.
    pub final_finetune_diverged: bool,
}

/// Full pipeline on a trained network: evolutionary search, compaction of
/// the fittest individual, and a final full fine-tune over the training
/// pool.
pub fn compress_network(
    net: &TrainedNetwork<f32>,
    data: &LabeledDataset,
    split: &SplitPlan,
    fitness_config: FitnessConfig,
    ga_config: &GAConfig,
) -> Result<CompressionOutcome> {
    let eval = NetworkFitness::new(net, data, split, fitness_config.clone())?;
    let result = run_ecs(&eval, ga_config)?;
    let mut compact = compact_network(net, &result.best.individual)?;
    let mut ft = fitness_config.final_finetune.clone();
    ft.seed = fitness_config.seed;
    let diverged = if ft.epochs > 0 {
        match crate::nn::train(&mut compact, data, Some(&split.train), &ft) {
            Ok(_) => false,
            Err(Error::Diverged { .. }) => true,
            Err(e) => return Err(e),
        }
    } else {
        false
    };
    Ok(CompressionOutcome {
        best: result.best,
        compact,
        log: result.log,
        final_finetune_diverged: diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::{FitnessVariant, SurrogateFitness};
    use crate::genome::MaskLayer;
    use std::sync::Arc;

    fn layout_for(groups: &[usize]) -> Arc<MaskLayout> {
        // Maskable layers with the given filter counts plus a fixed last
        // layer, 1x1 kernels throughout.
        let mut layers: Vec<MaskLayer> = groups
            .iter()
            .map(|&filters| MaskLayer {
                kernel_h: 1,
                kernel_w: 1,
                filters,
                maskable: true,
            })
            .collect();
        layers.push(MaskLayer {
            kernel_h: 1,
            kernel_w: 1,
            filters: 4,
            maskable: false,
        });
        Arc::new(MaskLayout {
            input_channels: 1,
            layers,
        })
    }

    fn ind_from(layout: &Arc<MaskLayout>, s: &str) -> Individual {
        Individual::from_text(layout.clone(), s).unwrap()
    }

    #[test]
    fn selection_probability_arithmetic() {
        assert_eq!(
            selection_probabilities(&[1.0, 1.0, 1.0, 1.0]).unwrap(),
            vec![0.25; 4]
        );
        assert_eq!(selection_probabilities(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(
            selection_probabilities(&[1.0, 1.0, 2.0]).unwrap(),
            vec![0.25, 0.25, 0.5]
        );
        assert!(selection_probabilities(&[1.0, 0.0]).is_err());
        assert!(selection_probabilities(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn roulette_degenerate_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(roulette_select(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }

    #[test]
    fn roulette_uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = [0.25; 4];
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[roulette_select(&probs, &mut rng)] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.03, "frequency {freq}");
        }
    }

    #[test]
    fn roulette_skewed_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = [0.25, 0.75];
        let mut hit = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            if roulette_select(&probs, &mut rng) == 1 {
                hit += 1;
            }
        }
        let freq = hit as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn crossover_reproduces_illustrated_strings() {
        let layout = layout_for(&[10, 10, 6]);
        let p1 = ind_from(&layout, "1011101010|0101110010|010100");
        let p2 = ind_from(&layout, "1010001011|1010101011|011010");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (o1, o2) = crossover_at(&p1, &p2, 10, 20, &mut rng);
        assert_eq!(o1.to_text(), "1011101010|1010101011|010100");
        assert_eq!(o2.to_text(), "1010001011|0101110010|011010");
    }

    #[test]
    fn crossover_identical_parents_is_identity() {
        let layout = layout_for(&[10, 10, 6]);
        let p = ind_from(&layout, "1011101010|0101110010|010100");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (o1, o2) = crossover(&p, &p, &mut rng);
            assert_eq!(o1, p);
            assert_eq!(o2, p);
        }
    }

    #[test]
    fn crossover_full_segment_swaps_parents() {
        let layout = layout_for(&[10, 10, 6]);
        let p1 = ind_from(&layout, "1011101010|0101110010|010100");
        let p2 = ind_from(&layout, "1010001011|1010101011|011010");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (o1, o2) = crossover_at(&p1, &p2, 0, 26, &mut rng);
        assert_eq!(o1, p2);
        assert_eq!(o2, p1);
    }

    #[test]
    fn mutation_reproduces_illustrated_fragment() {
        let layout = layout_for(&[7, 13, 7]);
        let parent = ind_from(&layout, "0110100|1001010100001|1010100");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let child = mutate_at(&parent, 7, 20, &mut rng);
        assert_eq!(child.to_text(), "0110100|0110101011110|1010100");
    }

    #[test]
    fn mutation_empty_fragment_is_identity() {
        let layout = layout_for(&[7, 13, 7]);
        let parent = ind_from(&layout, "0110100|1001010100001|1010100");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mutate_at(&parent, 5, 5, &mut rng), parent);
    }

    #[test]
    fn mutation_whole_string_complements_and_repairs() {
        let layout = layout_for(&[4, 4]);
        let parent = ind_from(&layout, "1111|0001");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let child = mutate_at(&parent, 0, 8, &mut rng);
        // First group complements to 0000 and is repaired to one set bit.
        let counts = child.surviving_counts();
        assert_eq!(counts[1], 1);
        assert_eq!(counts[2], 3);
        assert_eq!(&child.bits()[4..], &[true, true, true, false]);
    }

    fn surrogate(groups: &[usize], seed: u64) -> (Arc<MaskLayout>, SurrogateFitness) {
        let layout = layout_for(groups);
        let s = SurrogateFitness::new(layout.clone(), 0.6, FitnessVariant::PerFilter, seed);
        (layout, s)
    }

    #[test]
    fn t_equals_one_returns_best_of_initial_population() {
        let (layout, eval) = surrogate(&[6, 4], 9);
        let config = GAConfig {
            population: 8,
            iterations: 1,
            seed: 5,
            ..GAConfig::default()
        };
        let result = run_ecs(&eval, &config).unwrap();
        assert_eq!(result.log.records.len(), 1);

        // The initial population is drawn straight from the seeded stream.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expected_best = (0..8)
            .map(|_| Individual::random(layout.clone(), 0.5, &mut rng).unwrap())
            .map(|ind| eval.evaluate(&ind).fitness)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(result.best.report.fitness, expected_best);
    }

    #[test]
    fn elitism_makes_best_fitness_monotone() {
        let (_, eval) = surrogate(&[8, 6, 4], 3);
        let config = GAConfig {
            population: 12,
            iterations: 15,
            seed: 1,
            ..GAConfig::default()
        };
        let result = run_ecs(&eval, &config).unwrap();
        assert_eq!(result.log.records.len(), 15);
        for pair in result.log.records.windows(2) {
            assert!(
                pair[1].best_fitness >= pair[0].best_fitness,
                "best fitness regressed: {} -> {}",
                pair[0].best_fitness,
                pair[1].best_fitness
            );
        }
    }

    #[test]
    fn run_is_deterministic() {
        let (_, eval) = surrogate(&[8, 6, 4], 3);
        let config = GAConfig {
            population: 10,
            iterations: 8,
            seed: 23,
            ..GAConfig::default()
        };
        let a = run_ecs(&eval, &config).unwrap();
        let b = run_ecs(&eval, &config).unwrap();
        assert_eq!(a.best.individual, b.best.individual);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn operator_mix_converges_to_probabilities() {
        let (_, eval) = surrogate(&[10, 6], 7);
        let config = GAConfig {
            population: 100,
            iterations: 12,
            seed: 6,
            ..GAConfig::default()
        };
        let result = run_ecs(&eval, &config).unwrap();
        let (mut sel, mut xover, mut mu) = (0usize, 0usize, 0usize);
        for r in &result.log.records {
            sel += r.ops_selection;
            xover += r.ops_crossover;
            mu += r.ops_mutation;
        }
        let total = (sel + xover + mu) as f64;
        assert!(total > 0.0);
        assert!((sel as f64 / total - 0.2).abs() < 0.05);
        assert!((xover as f64 / total - 0.7).abs() < 0.05);
        assert!((mu as f64 / total - 0.1).abs() < 0.05);
    }

    #[test]
    fn finds_global_optimum_of_enumerable_landscape() {
        // 10 maskable bits: exhaustive enumeration is the oracle.
        let (layout, eval) = surrogate(&[6, 4], 42);
        assert_eq!(layout.bit_count(), 10);
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..1024 {
            let bits: Vec<bool> = (0..10).map(|i| mask >> i & 1 == 1).collect();
            let Ok(ind) = Individual::from_bits(layout.clone(), bits) else {
                continue; // empty layer; outside the searched space
            };
            best = best.max(eval.evaluate(&ind).fitness);
        }
        let config = GAConfig {
            population: 20,
            iterations: 30,
            seed: 0,
            ..GAConfig::default()
        };
        let result = run_ecs(&eval, &config).unwrap();
        assert!(
            (result.best.report.fitness - best).abs() < 1e-12,
            "GA best {} vs exhaustive best {}",
            result.best.report.fitness,
            best
        );
    }

    #[test]
    fn zero_lambda_search_never_worsens_error() {
        let layout = layout_for(&[8, 6]);
        let eval = SurrogateFitness::new(layout, 0.0, FitnessVariant::PerFilter, 11);
        let config = GAConfig {
            population: 10,
            iterations: 10,
            seed: 2,
            ..GAConfig::default()
        };
        let result = run_ecs(&eval, &config).unwrap();
        let first = &result.log.records[0];
        assert!(result.best.report.error <= first.best_error + 1e-12);
    }

    #[test]
    fn log_round_trips_through_text() {
        let (_, eval) = surrogate(&[6, 4], 1);
        let config = GAConfig {
            population: 6,
            iterations: 4,
            seed: 9,
            ..GAConfig::default()
        };
        let log = run_ecs(&eval, &config).unwrap().log;
        let parsed = EvolutionLog::parse(&log.to_text()).unwrap();
        assert_eq!(parsed.records.len(), log.records.len());
        for (a, b) in parsed.records.iter().zip(&log.records) {
            assert_eq!(a.generation, b.generation);
            assert!((a.best_fitness - b.best_fitness).abs() < 1e-9);
            assert_eq!(a.ops_crossover, b.ops_crossover);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = GAConfig::default();
        c.s1 = 0.5; // sum now 1.3
        assert!(c.validate().is_err());
        let mut c = GAConfig::default();
        c.population = 1;
        assert!(c.validate().is_err());
        let mut c = GAConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
    }
}
