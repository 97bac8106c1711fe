//! Seeded synthetic datasets for probes, alignment runs and MIL bags.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Mat;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Isotropic Gaussian classes. Class means are random directions scaled to
/// norm `separation`; samples add unit-variance noise. Rows are interleaved
/// by class.
pub fn gaussian_classes(num_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> (Mat, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n * separation).collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (c, m) in means.iter().enumerate() {
            rows.push(m.iter().map(|&mu| mu + normal(&mut rng)).collect());
            labels.push(c);
        }
    }
    (Mat::from_rows(&rows), labels)
}

/// Paired views of a shared latent: `x = z·A + noise`, `t = z·B + noise`.
pub fn paired_views(n: usize, latent_dim: usize, image_dim: usize, text_dim: usize, noise: f64, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat::from_fn(latent_dim, image_dim, |_, _| normal(&mut rng));
    let b = Mat::from_fn(latent_dim, text_dim, |_, _| normal(&mut rng));
    let z = Mat::from_fn(n, latent_dim, |_, _| normal(&mut rng));
    let mut x = z.matmul(&a);
    let mut t = z.matmul(&b);
    x.as_mut_slice().iter_mut().for_each(|v| *v += noise * normal(&mut rng));
    t.as_mut_slice().iter_mut().for_each(|v| *v += noise * normal(&mut rng));
    (x, t)
}

/// A labelled bag of instance features.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub features: Mat,
    pub label: usize,
}

/// Bags whose instance distribution is centred on a per-class mean; bag
/// sizes are uniform in `size_range`. Labels alternate so every prefix is
/// roughly balanced.
pub fn separable_bags(
    num_bags: usize,
    num_classes: usize,
    dim: usize,
    size_range: (usize, usize),
    separation: f64,
    seed: u64,
) -> Vec<Bag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n * separation).collect()
        })
        .collect();
    (0..num_bags)
        .map(|i| {
            let label = i % num_classes;
            let n = rng.random_range(size_range.0..=size_range.1);
            let features = Mat::from_fn(n, dim, |_, c| means[label][c] + normal(&mut rng));
            Bag { features, label }
        })
        .collect()
}
