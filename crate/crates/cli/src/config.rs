//! Run configuration: TOML file with flat sections, overridden by flags,
//! echoed fully resolved into the output directory.

use anyhow::{bail, Context, Result};
use evoprune::fitness::FitnessVariant;
use evoprune::{FitnessConfig, GAConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "EVOPRUNE_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; feeds training, the GA and fitness streams.
    pub seed: u64,
    /// Concurrent fitness evaluations (0 = one per CPU).
    pub workers: usize,
    pub data: DataSection,
    pub train: TrainSection,
    pub ga: GaSection,
    pub fitness: FitnessSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the IDX files.
    pub dir: PathBuf,
    /// `mnist` (IDX files from `dir`) or `blobs` (synthetic smoke data).
    pub dataset: String,
    /// Trailing slice of the training set held out to score individuals.
    pub eval_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GaSection {
    pub population: usize,
    pub iterations: usize,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub init_density: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitnessSection {
    pub lambda: f64,
    pub variant: String,
    /// Fine-tune subset size drawn from the training pool.
    pub subset: usize,
    /// Mini-batch steps per candidate; 0 derives one pass over the subset.
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f32,
    pub final_finetune_epochs: usize,
    pub final_finetune_lr: f32,
    /// Replace network error with the deterministic mask surrogate.
    pub surrogate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            data: DataSection {
                dir: PathBuf::from("data"),
                dataset: "mnist".into(),
                eval_count: 2000,
            },
            train: TrainSection {
                epochs: 6,
                batch_size: 64,
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            ga: GaSection {
                population: 1000,
                iterations: 100,
                s1: 0.2,
                s2: 0.7,
                s3: 0.1,
                init_density: 0.5,
            },
            fitness: FitnessSection {
                lambda: 0.9,
                variant: "v3-coupled-corrected".into(),
                subset: 10_000,
                finetune_steps: 0,
                finetune_batch: 64,
                finetune_lr: 0.01,
                final_finetune_epochs: 3,
                final_finetune_lr: 0.02,
                surrogate: false,
            },
        }
    }
}

/// Flag-level overrides applied on top of file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub population: Option<usize>,
    pub iterations: Option<usize>,
    pub preset: Option<String>,
    pub workers: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub dataset: Option<String>,
    pub surrogate: bool,
}

impl RunConfig {
    /// Defaults, then the config file, then the preset flag, then individual
    /// flags; the environment data directory fills in when nothing else
    /// names one.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            config.data.dir = PathBuf::from(dir);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            config = merge_file(config, &text)?;
        }
        if let Some(preset) = &overrides.preset {
            config.apply_preset(preset)?;
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(lambda) = overrides.lambda {
            config.fitness.lambda = lambda;
        }
        if let Some(population) = overrides.population {
            config.ga.population = population;
        }
        if let Some(iterations) = overrides.iterations {
            config.ga.iterations = iterations;
        }
        if let Some(workers) = overrides.workers {
            config.workers = workers;
        }
        if let Some(dir) = &overrides.data_dir {
            config.data.dir = dir.clone();
        }
        if let Some(dataset) = &overrides.dataset {
            config.data.dataset = dataset.clone();
        }
        if overrides.surrogate {
            config.fitness.surrogate = true;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_preset(&mut self, preset: &str) -> Result<()> {
        match preset {
            // Paper-scale search; hours of CPU.
            "paper" => {
                self.ga.population = 1000;
                self.ga.iterations = 100;
                self.fitness.subset = 10_000;
            }
            // Minutes-scale search for desk runs and acceptance tests.
            "desk" => {
                self.ga.population = 50;
                self.ga.iterations = 20;
                self.fitness.subset = 2000;
            }
            other => bail!("unknown preset {other:?} (expected `desk` or `paper`)"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if ((self.ga.s1 + self.ga.s2 + self.ga.s3) - 1.0).abs() > 1e-9 {
            bail!(
                "s1 + s2 + s3 must equal 1 (got s1={} s2={} s3={})",
                self.ga.s1,
                self.ga.s2,
                self.ga.s3
            );
        }
        if self.fitness.lambda < 0.0 {
            bail!("lambda must be >= 0 (got {})", self.fitness.lambda);
        }
        FitnessVariant::parse(&self.fitness.variant)?;
        match self.data.dataset.as_str() {
            "mnist" | "blobs" => {}
            other => bail!("unknown dataset {other:?} (expected `mnist` or `blobs`)"),
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
        }
    }

    pub fn ga_config(&self) -> GAConfig {
        GAConfig {
            population: self.ga.population,
            iterations: self.ga.iterations,
            s1: self.ga.s1,
            s2: self.ga.s2,
            s3: self.ga.s3,
            init_density: self.ga.init_density,
            seed: self.seed,
        }
    }

    pub fn fitness_config(&self) -> FitnessConfig {
        let steps = if self.fitness.finetune_steps > 0 {
            self.fitness.finetune_steps
        } else {
            self.fitness.subset.div_ceil(self.fitness.finetune_batch)
        };
        FitnessConfig {
            lambda: self.fitness.lambda,
            variant: FitnessVariant::parse(&self.fitness.variant).expect("validated"),
            finetune_steps: steps,
            finetune: TrainConfig {
                epochs: 1,
                batch_size: self.fitness.finetune_batch,
                learning_rate: self.fitness.finetune_lr,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: self.seed,
            },
            final_finetune: TrainConfig {
                epochs: self.fitness.final_finetune_epochs,
                batch_size: self.fitness.finetune_batch,
                learning_rate: self.fitness.final_finetune_lr,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: self.seed,
            },
            seed: self.seed,
        }
    }

    /// Serialized snapshot written into every run's output directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge_file(base: RunConfig, text: &str) -> Result<RunConfig> {
    // Partial files are allowed: parse into a TOML value, overlay onto the
    // serialized defaults, then deserialize strictly (unknown keys rejected).
    let file_value: toml::Value = text.parse().context("config is not valid TOML")?;
    let mut base_value: toml::Value =
        toml::Value::try_from(&base).expect("default config converts");
    overlay(&mut base_value, &file_value)?;
    let merged: RunConfig = base_value
        .try_into()
        .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    Ok(merged)
}

fn overlay(base: &mut toml::Value, file: &toml::Value) -> Result<()> {
    match (base, file) {
        (toml::Value::Table(b), toml::Value::Table(f)) => {
            for (key, value) in f {
                match b.get_mut(key) {
                    Some(slot) if slot.is_table() && value.is_table() => {
                        overlay(slot, value)?;
                    }
                    Some(slot) => *slot = value.clone(),
                    None => bail!("unknown config key `{key}`"),
                }
            }
            Ok(())
        }
        _ => bail!("config sections must be tables"),
    }
}
