//! Seeded synthetic token corpora with known cluster structure.
//!
//! Each class has a unit-length center direction; each class owns a set of
//! modes scattered around that center. A class also fixes a spatial layout
//! assigning one mode to every grid cell, so images of the same class look
//! alike cell by cell. Tokens are mode centers plus isotropic Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, RaidError, Result};
use crate::interchange::TokenEmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub dim: usize,
    pub classes: usize,
    pub modes_per_class: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Expected norm of the per-token noise vector.
    pub noise: f64,
    /// Distance scale of modes from their class center, before normalization.
    pub mode_spread: f64,
    /// Probability that a cell draws a random mode of its class instead of
    /// the layout's mode.
    pub layout_jitter: f64,
    /// Probability that a cell is a noisy outlier: a normal token whose noise
    /// norm is `nuisance_noise` instead of `noise`.
    pub nuisance_rate: f64,
    pub nuisance_noise: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(dim: usize, classes: usize, modes_per_class: usize, seed: u64) -> Self {
        Self {
            dim,
            classes,
            modes_per_class,
            grid_height: 16,
            grid_width: 16,
            noise: 0.1,
            mode_spread: 0.6,
            layout_jitter: 0.0,
            nuisance_rate: 0.0,
            nuisance_noise: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    spec: CorpusSpec,
    class_centers: Vec<Vec<f64>>,
    /// `[class][mode]` unit vectors.
    mode_centers: Vec<Vec<Vec<f64>>>,
    /// `[class][cell]` mode index.
    layouts: Vec<Vec<usize>>,
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// A uniformly random unit vector.
pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    normalized(gaussian_vector(rng, dim))
}

impl SyntheticCorpus {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        ensure(
            spec.dim >= 2 && spec.classes >= 1 && spec.modes_per_class >= 1,
            || {
                RaidError::InvalidArgument(
                    "corpus needs D >= 2, at least one class and one mode".into(),
                )
            },
        )?;
        ensure(spec.grid_height >= 1 && spec.grid_width >= 1, || {
            RaidError::InvalidArgument("corpus grid must be non-empty".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let class_centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| random_unit(&mut rng, spec.dim))
            .collect();
        let mode_centers = class_centers
            .iter()
            .map(|c| {
                (0..spec.modes_per_class)
                    .map(|_| {
                        let dir = random_unit(&mut rng, spec.dim);
                        normalized(
                            c.iter()
                                .zip(&dir)
                                .map(|(a, b)| a + spec.mode_spread * b)
                                .collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        let cells = spec.grid_height * spec.grid_width;
        let layouts = (0..spec.classes)
            .map(|_| {
                (0..cells)
                    .map(|_| rng.random_range(0..spec.modes_per_class))
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            class_centers,
            mode_centers,
            layouts,
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn class_center(&self, class: usize) -> &[f64] {
        &self.class_centers[class]
    }

    pub fn mode_center(&self, class: usize, mode: usize) -> &[f64] {
        &self.mode_centers[class][mode]
    }

    pub fn layout(&self, class: usize) -> &[usize] {
        &self.layouts[class]
    }

    fn noisy(&self, rng: &mut ChaCha8Rng, center: &[f64], noise: f64, out: &mut Vec<f32>) {
        let scale = noise / (self.spec.dim as f64).sqrt();
        for &c in center {
            let z: f64 = StandardNormal.sample(rng);
            out.push((c + scale * z) as f32);
        }
    }

    /// A normal image of `class`.
    pub fn image(&self, id: impl Into<String>, class: usize, seed: u64) -> TokenEmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &self.spec;
        let cells = spec.grid_height * spec.grid_width;
        let mut patches = Vec::with_capacity(cells * spec.dim);
        for cell in 0..cells {
            let mode = if spec.layout_jitter > 0.0 && rng.random_bool(spec.layout_jitter) {
                rng.random_range(0..spec.modes_per_class)
            } else {
                self.layouts[class][cell]
            };
            let noise = if spec.nuisance_rate > 0.0 && rng.random_bool(spec.nuisance_rate) {
                spec.nuisance_noise
            } else {
                spec.noise
            };
            self.noisy(
                &mut rng,
                &self.mode_centers[class][mode],
                noise,
                &mut patches,
            );
        }
        let mut cls = Vec::with_capacity(spec.dim);
        self.noisy(&mut rng, &self.class_centers[class], spec.noise, &mut cls);
        TokenEmbeddingSet::new(
            id,
            cls,
            spec.grid_height,
            spec.grid_width,
            patches,
            spec.grid_height * 14,
            spec.grid_width * 14,
            Some(format!("class{class}")),
        )
        .expect("synthetic tokens are finite and correctly shaped")
    }

    /// `per_class` images of every class, ids `"{prefix}{class}_{i}"`.
    pub fn images(&self, prefix: &str, per_class: usize, seed: u64) -> Vec<TokenEmbeddingSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_class * self.spec.classes);
        for class in 0..self.spec.classes {
            for i in 0..per_class {
                out.push(self.image(format!("{prefix}{class}_{i}"), class, rng.random()));
            }
        }
        out
    }
}
