//! Subcommand implementations. Every command writes a resolved-config
//! snapshot into its output directory; artifacts carry no timestamps so
//! identical configs reproduce identical bytes.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use evoprune::analysis::{
    emit_records, emit_table, export_filters, mean_pairwise_filter_distance, overall_report,
};
use evoprune::baselines::{
    filter_squared_norms, random_architecture, scratch_train_control, weight_threshold_mask,
};
use evoprune::data::{
    load_idx, load_individual, load_network, save_individual, save_log, save_network,
    synthetic_blobs,
};
use evoprune::evolution::compress_network;
use evoprune::fitness::SurrogateFitness;
use evoprune::genome::{compact_network, weight_counts, MaskLayout};
use evoprune::nn::{evaluate_error, lenet_spec, train, LayerParams, LayerSpec};
use evoprune::{
    LabeledDataset, NetworkSpec, SplitPlan, TrainedNetwork,
};
use std::fs;
use std::path::Path;

/// The 8x8 four-class architecture used with the synthetic blobs dataset.
fn tiny_spec() -> NetworkSpec {
    NetworkSpec::new(
        (8, 8, 1),
        vec![
            LayerSpec::conv(5, 5, 1, 8),
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::conv(2, 2, 8, 4),
            LayerSpec::SoftmaxLoss,
        ],
        4,
    )
}

fn load_datasets(config: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match config.data.dataset.as_str() {
        "mnist" => {
            let dir = &config.data.dir;
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )
            .with_context(|| format!("loading MNIST training files from {}", dir.display()))?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )
            .with_context(|| format!("loading MNIST test files from {}", dir.display()))?;
            Ok((train, test))
        }
        "blobs" => {
            let train = synthetic_blobs(4, 500, (8, 8, 1), 0.08, config.seed)?;
            let test = synthetic_blobs(4, 125, (8, 8, 1), 0.08, config.seed ^ 0x5eed)?;
            Ok((train, test))
        }
        other => bail!("unknown dataset {other:?}"),
    }
}

fn spec_for(config: &RunConfig, arch: &str) -> Result<NetworkSpec> {
    match arch {
        "lenet" => Ok(lenet_spec()),
        "tiny" => Ok(tiny_spec()),
        "auto" => Ok(if config.data.dataset == "blobs" {
            tiny_spec()
        } else {
            lenet_spec()
        }),
        other => bail!("unknown architecture {other:?} (expected `lenet`, `tiny` or `auto`)"),
    }
}

fn prepare_out(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    fs::write(out.join("resolved-config.toml"), config.to_toml())?;
    Ok(())
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("building worker pool")?;
        pool.install(f)
    }
}

fn split_plan(config: &RunConfig, train_len: usize) -> Result<SplitPlan> {
    SplitPlan::new(
        train_len,
        config.data.eval_count,
        config.fitness.subset,
        config.seed,
    )
    .map_err(Into::into)
}

pub fn cmd_train(config: &RunConfig, arch: &str, out: &Path) -> Result<()> {
    prepare_out(config, out)?;
    let (train_set, test_set) = load_datasets(config)?;
    let spec = spec_for(config, arch)?;
    let mut net = TrainedNetwork::init(spec, config.seed)?;
    let train_cfg = config.train_config();
    log::info!(
        "training {} on {} samples for {} epochs",
        arch,
        train_set.len(),
        train_cfg.epochs
    );
    let report = with_pool(config.workers, || {
        train(&mut net, &train_set, None, &train_cfg).map_err(Into::into)
    })?;
    let test_error = evaluate_error(&net, &test_set)?;
    let model_path = out.join("model.ckpt");
    save_network(&net, &model_path)?;
    let mut metrics = String::new();
    for (i, loss) in report.epoch_mean_loss.iter().enumerate() {
        metrics.push_str(&format!("epoch={} mean_loss={loss:.6}\n", i + 1));
    }
    metrics.push_str(&format!(
        "test_error={test_error:.6} test_accuracy={:.4}\n",
        (1.0 - test_error) * 100.0
    ));
    fs::write(out.join("metrics.txt"), metrics)?;
    println!(
        "trained model -> {} (test accuracy {:.2}%)",
        model_path.display(),
        (1.0 - test_error) * 100.0
    );
    Ok(())
}

pub fn cmd_compress(config: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    prepare_out(config, out)?;
    let net = load_network(model)?;
    let ga = config.ga_config();

    if config.fitness.surrogate {
        // Mask-only search; no dataset or fine-tuning involved.
        let layout = MaskLayout::from_spec(&net.spec)?;
        let fitness = config.fitness_config();
        let surrogate =
            SurrogateFitness::new(layout, fitness.lambda, fitness.variant, config.seed);
        let result = with_pool(config.workers, || {
            evoprune::run_ecs(&surrogate, &ga).map_err(Into::into)
        })?;
        save_individual(&result.best.individual, &out.join("best.individual"))?;
        save_log(&result.log, &out.join("evolution.log"))?;
        let compact = compact_network(&net, &result.best.individual)?;
        save_network(&compact, &out.join("compact.ckpt"))?;
        println!(
            "surrogate search done: fitness {:.4}, kept weights {:.3}",
            result.best.report.fitness,
            1.0 - result.best.report.sparsity_term
        );
        return Ok(());
    }

    let (train_set, test_set) = load_datasets(config)?;
    let split = split_plan(config, train_set.len())?;
    let baseline_error = evaluate_error(&net, &test_set)?;
    let outcome = with_pool(config.workers, || {
        compress_network(&net, &train_set, &split, config.fitness_config(), &ga)
            .map_err(Into::into)
    })?;
    let compact_error = evaluate_error(&outcome.compact, &test_set)?;

    save_individual(&outcome.best.individual, &out.join("best.individual"))?;
    save_log(&outcome.log, &out.join("evolution.log"))?;
    save_network(&outcome.compact, &out.join("compact.ckpt"))?;

    let wc = weight_counts(
        outcome.best.individual.layout(),
        &outcome.best.individual.surviving_counts(),
    );
    let mut summary = String::new();
    summary.push_str(&format!(
        "baseline_test_error={baseline_error:.6}\ncompact_test_error={compact_error:.6}\n"
    ));
    summary.push_str(&format!(
        "kept_weights={} total_weights={} rc={:.4}\n",
        wc.kept,
        wc.total,
        wc.total as f64 / wc.kept as f64
    ));
    summary.push_str(&format!(
        "surviving_counts={:?}\nfinal_finetune_diverged={}\n",
        outcome.best.individual.surviving_counts(),
        outcome.final_finetune_diverged
    ));
    fs::write(out.join("summary.txt"), &summary)?;
    println!(
        "compressed: accuracy {:.2}% -> {:.2}%, weights {} -> {} ({:.2}x)",
        (1.0 - baseline_error) * 100.0,
        (1.0 - compact_error) * 100.0,
        wc.total,
        wc.kept,
        wc.total as f64 / wc.kept as f64
    );
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, model: &Path, split: &str, out: &Path) -> Result<()> {
    prepare_out(config, out)?;
    let net = load_network(model)?;
    let (train_set, test_set) = load_datasets(config)?;
    let data = match split {
        "test" => &test_set,
        "train" => &train_set,
        other => bail!("unknown split {other:?} (expected `test` or `train`)"),
    };
    let error = evaluate_error(&net, data)?;
    fs::write(
        out.join("evaluation.txt"),
        format!("split={split} error={error:.6} accuracy={:.4}\n", (1.0 - error) * 100.0),
    )?;
    println!("{split} error {error:.6} (accuracy {:.2}%)", (1.0 - error) * 100.0);
    Ok(())
}

pub fn cmd_report(
    config: &RunConfig,
    model: &Path,
    individual: &Path,
    compact: Option<&Path>,
    out: &Path,
) -> Result<()> {
    prepare_out(config, out)?;
    let net = load_network(model)?;
    let ind = load_individual(individual)?;

    let accuracies = match (compact, load_datasets(config)) {
        (Some(compact_path), Ok((_, test_set))) => {
            let compact_net = load_network(compact_path)?;
            let before = 1.0 - evaluate_error(&net, &test_set)?;
            let after = 1.0 - evaluate_error(&compact_net, &test_set)?;
            Some((before, after))
        }
        _ => None,
    };

    let report = overall_report(&net.spec, &ind, accuracies)?;
    let mut table = emit_table(&report);
    let orig_dist = mean_pairwise_filter_distance(&net, 0)?;
    table.push_str(&format!(
        "Mean pairwise first-layer filter distance (original): {orig_dist:.4}\n"
    ));
    if let Some(compact_path) = compact {
        let compact_net = load_network(compact_path)?;
        let dist = mean_pairwise_filter_distance(&compact_net, 0)?;
        table.push_str(&format!(
            "Mean pairwise first-layer filter distance (compressed): {dist:.4}\n"
        ));
        export_filters(&compact_net, 0, &out.join("filters_compressed"))?;
    }
    export_filters(&net, 0, &out.join("filters_original"))?;

    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.records"), emit_records(&report))?;
    print!("{table}");
    Ok(())
}

/// Picks the filter-norm threshold whose kept-filter total is closest to
/// the target budget.
fn budget_matched_tau(net: &TrainedNetwork<f32>, target_maskable_kept: usize) -> f64 {
    let layout = MaskLayout::from_spec(&net.spec).expect("valid network");
    let conv_indices = net.spec.conv_layer_indices();
    let mut norms: Vec<f64> = Vec::new();
    for (ord, &li) in conv_indices.iter().enumerate() {
        if !layout.layers[ord].maskable {
            continue;
        }
        if let LayerParams::Conv { weight, .. } = &net.params[li] {
            norms.extend(filter_squared_norms(weight));
        }
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Keeping the k largest norms means tau just below norms[len - k].
    let k = target_maskable_kept.clamp(1, norms.len());
    norms[norms.len() - k] * (1.0 - 1e-9)
}

pub fn cmd_baseline(
    config: &RunConfig,
    model: &Path,
    individual: Option<&Path>,
    weight_tau: Option<f32>,
    filter_tau: Option<f64>,
    control_seeds: usize,
    out: &Path,
) -> Result<()> {
    prepare_out(config, out)?;
    let net = load_network(model)?;
    let (train_set, test_set) = load_datasets(config)?;
    let split = split_plan(config, train_set.len())?;
    let layout = MaskLayout::from_spec(&net.spec)?;
    let mut lines = String::new();

    // Weight-magnitude thresholding: unstructured sparsity statistics only.
    let tau_w = weight_tau.unwrap_or(0.05);
    for (ord, &li) in net.spec.conv_layer_indices().iter().enumerate() {
        if let LayerParams::Conv { weight, .. } = &net.params[li] {
            let mask = weight_threshold_mask(weight, tau_w);
            lines.push_str(&format!(
                "weight-threshold layer={} tau={tau_w} kept={} total={} sparsity={:.4}\n",
                ord + 1,
                mask.kept,
                mask.total,
                1.0 - mask.kept as f64 / mask.total as f64
            ));
        }
    }

    // Filter-norm pruning, budget-matched to the reference individual when
    // one is given.
    let reference = individual.map(load_individual).transpose()?;
    let tau_f = match (filter_tau, &reference) {
        (Some(tau), _) => tau,
        (None, Some(ind)) => {
            let kept_maskable: usize = ind.surviving_counts()[1..layout.depth()].iter().sum();
            budget_matched_tau(&net, kept_maskable)
        }
        (None, None) => budget_matched_tau(&net, layout.bit_count() / 2),
    };
    let norm_ind = evoprune::baselines::filter_norm_mask(&net, tau_f)?;
    let mut norm_net = compact_network(&net, &norm_ind)?;
    let ft = config.fitness_config().final_finetune;
    let baseline_acc = 1.0 - evaluate_error(&net, &test_set)?;
    with_pool(config.workers, || {
        train(&mut norm_net, &train_set, Some(&split.train), &ft)?;
        Ok(())
    })?;
    let norm_acc = 1.0 - evaluate_error(&norm_net, &test_set)?;
    let norm_report = overall_report(&net.spec, &norm_ind, Some((baseline_acc, norm_acc)))?;
    lines.push_str(&format!(
        "filter-norm tau={tau_f:.6} counts={:?} rc={:.4} accuracy={:.4}\n",
        norm_ind.surviving_counts(),
        norm_report.overall_rc,
        norm_acc * 100.0
    ));
    fs::write(out.join("filter_norm_report.txt"), emit_table(&norm_report))?;
    save_individual(&norm_ind, &out.join("filter_norm.individual"))?;

    // Controls: scratch-train the reference architecture and a random
    // architecture of similar size, both on the fine-tune budget.
    if let Some(reference) = &reference {
        let compact_spec = compact_network(&net, reference)?.spec;
        let total_filters: usize = reference.surviving_counts()[1..].iter().sum();
        let mut scratch_cfg = config.train_config();
        scratch_cfg.epochs = config.fitness.final_finetune_epochs;
        for s in 0..control_seeds {
            let seed = config.seed + s as u64;
            let (scratch_err, random_err) = with_pool(config.workers, || {
                let mut cfg = scratch_cfg.clone();
                cfg.seed = seed;
                let scratch =
                    scratch_train_control(&compact_spec, &train_set, Some(&split.train), &cfg)?;
                let scratch_err = evaluate_error(&scratch, &test_set)?;
                let random_spec = random_architecture(&net.spec, total_filters, seed)?;
                let random =
                    scratch_train_control(&random_spec, &train_set, Some(&split.train), &cfg)?;
                let random_err = evaluate_error(&random, &test_set)?;
                Ok((scratch_err, random_err))
            })?;
            lines.push_str(&format!(
                "control seed={seed} scratch_accuracy={:.4} random_arch_accuracy={:.4}\n",
                (1.0 - scratch_err) * 100.0,
                (1.0 - random_err) * 100.0
            ));
        }
    }

    fs::write(out.join("baseline_report.txt"), &lines)?;
    print!("{lines}");
    Ok(())
}
