use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use raid_core::filter::{FilterConfig, FilterParameters};
use raid_core::numerics::FeatureGrid;
use raid_core::retrieval::CostVolume;
use raid_core::training::LabeledInputs;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_grid(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    lo: f64,
    hi: f64,
) -> FeatureGrid {
    FeatureGrid::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn toy_config(d: usize, k: usize, m: usize, top_k: usize) -> FilterConfig {
    FilterConfig {
        dim: d,
        cost_channels: k,
        guidance_experts: m,
        filter_experts: m,
        top_k,
        beta: 0.1,
    }
}

/// Random filter inputs with a random nonempty, non-full mask.
pub fn labeled_inputs(
    rng: &mut ChaCha8Rng,
    cfg: &FilterConfig,
    h: usize,
    w: usize,
) -> LabeledInputs {
    let n = h * w;
    let mut mask: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    mask[0] = 1;
    mask[n - 1] = 0;
    LabeledInputs {
        query_grid: uniform_grid(rng, h, w, cfg.dim, -1.0, 1.0),
        prototype_grid: uniform_grid(rng, h, w, cfg.dim, -1.0, 1.0),
        cost: CostVolume::from_grid(uniform_grid(rng, h, w, cfg.cost_channels, 0.0, 2.0)).unwrap(),
        mask,
    }
}

/// Initialized parameters with biases also randomized, so every tensor has a
/// nontrivial gradient.
pub fn random_params(cfg: FilterConfig, seed: u64) -> FilterParameters {
    let mut p = FilterParameters::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for (name, t) in p.tensors_mut() {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    }
    p
}
