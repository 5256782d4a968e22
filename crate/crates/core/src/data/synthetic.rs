//! Seeded synthetic datasets for fast tests: Gaussian blobs around per-class
//! template images, linearly separable at the default spread.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generates `classes * per_class` images of `dims = (h, w, c)`. Each class
/// has a fixed random template in `[0.25, 0.75]`; samples add Gaussian noise
/// of the given `spread` and are clamped to `[0, 1]`.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    dims: (usize, usize, usize),
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    let (h, w, c) = dims;
    let pix = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..pix).map(|_| rng.random_range(0.25..0.75)).collect())
        .collect();

    let n = classes * per_class;
    let mut data = vec![0.0f32; n * pix];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let dst = &mut data[i * pix..(i + 1) * pix];
        for (d, &t) in dst.iter_mut().zip(&templates[class]) {
            let noise = gaussian(&mut rng) * spread;
            *d = (t as f64 + noise).clamp(0.0, 1.0) as f32;
        }
    }
    LabeledDataset::new(
        format!("blobs-{classes}x{per_class}"),
        Tensor::from_vec(vec![n, h, w, c], data)?,
        labels,
    )
}

/// Box-Muller standard normal draw.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
