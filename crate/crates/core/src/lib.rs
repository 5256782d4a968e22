//! Compresses small convolutional networks by evolving binary filter masks
//! with a genetic algorithm. A trained network is paired with a population
//! of bit strings (one bit per conv filter); fitness trades classification
//! error after a quick fine-tune against the fraction of weights discarded,
//! and the fittest mask is compacted into a structurally smaller dense
//! network. Greedy threshold baselines, control experiments and exact
//! compression/speed-up accounting round out the toolkit.

pub mod analysis;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evolution;
pub mod fitness;
pub mod genome;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub use data::{LabeledDataset, SplitPlan};
pub use evolution::{run_ecs, EvolutionLog, GAConfig};
pub use fitness::{FitnessConfig, FitnessReport, FitnessVariant};
pub use genome::{Individual, MaskLayout};
pub use nn::{LayerSpec, NetworkSpec, TrainConfig, TrainedNetwork};
