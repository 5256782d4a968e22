//! Dataset ingestion, subset sampling and checkpoint persistence.

mod checkpoint;
mod idx;
mod synthetic;

pub use checkpoint::{
    load_individual, load_log, load_network, save_individual, save_log, save_network,
};
pub use idx::load_idx;
pub use synthetic::synthetic_blobs;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Images with class labels. Images are `[N, H, W, C]` with pixel values
/// normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    images: Tensor<f32>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be [N, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (height, width, channels) of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// Copies the selected samples into a `[B, H, W, C]` batch tensor plus
    /// label vector.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w, c) = self.image_dims();
        let stride = h * w * c;
        let mut data = vec![0.0f32; indices.len() * stride];
        let src = self.images.data();
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range ({} samples)",
                    self.len()
                )));
            }
            data[slot * stride..(slot + 1) * stride]
                .copy_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::from_vec(vec![indices.len(), h, w, c], data)?,
            labels,
        ))
    }
}

/// Index sets carving a training set into the pool used for training, the
/// held-out evaluation slice used while searching, and the fine-tune subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub finetune: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// Reserves the trailing `eval_count` samples as the evaluation slice and
    /// draws `finetune_size` indices uniformly without replacement from the
    /// remainder. Deterministic per seed.
    pub fn new(
        total: usize,
        eval_count: usize,
        finetune_size: usize,
        seed: u64,
    ) -> Result<SplitPlan> {
        if eval_count == 0 || eval_count >= total {
            return Err(Error::InvalidArgument(format!(
                "eval_count {eval_count} must be in 1..{total}"
            )));
        }
        let train_len = total - eval_count;
        let train: Vec<usize> = (0..train_len).collect();
        let eval: Vec<usize> = (train_len..total).collect();
        let finetune = sample_finetune_subset(&train, finetune_size, seed)?;
        Ok(SplitPlan {
            train,
            eval,
            finetune,
            seed,
        })
    }
}

/// Uniform sample of `size` training indices without replacement,
/// deterministic per seed. Returned sorted.
pub fn sample_finetune_subset(train: &[usize], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > train.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {size} exceeds available {} samples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), size)
        .into_iter()
        .map(|i| train[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
