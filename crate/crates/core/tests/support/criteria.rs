//! One check per acceptance criterion. Each returns a one-line summary on
//! success and a description of the first violation on failure.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use raid_core::bench::{run_benchmark, BenchConfig};
use raid_core::database::{build_database, DatabaseConfig};
use raid_core::evaluation::{aupro, auroc, average_precision, f1_max, PixelMap};
use raid_core::filter::{
    denoise_expert, filter_forward, fuse_guidance, sparse_gate, AnomalyMap, ConvLayer,
    FilterConfig, FilterParameters,
};
use raid_core::interchange::{
    load_database, load_embedding_set, load_filter, load_map, save_database, save_embedding_set,
    save_filter, save_map, GroundTruthMask, TokenEmbeddingSet,
};
use raid_core::numerics::{conv2d, cosine_similarity, softmax, ConvKernel};
use raid_core::pipeline::RetrievalMode;
use raid_core::retrieval::{CostVolume, RetrievalParams, Retriever};
use raid_core::synthetic::{CorpusSpec, SyntheticCorpus};
use raid_core::training::{balance_loss, batch_loss, loss_gradient, LabeledInputs, LossConfig};
use raid_core::RaidError;

use super::e2e;
use super::fixtures::{labeled_inputs, random_params, rng, toy_config, uniform_grid};
use super::oracles;

pub type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// --- retrieval -------------------------------------------------------------

/// Smallest distance between any two mode centers, over the intra-cluster
/// spread (root-mean-square token distance from its center).
pub fn separation_ratio(corpus: &SyntheticCorpus) -> f64 {
    let spec = corpus.spec();
    let mut centers = Vec::new();
    for c in 0..spec.classes {
        for m in 0..spec.modes_per_class {
            centers.push(corpus.mode_center(c, m));
        }
    }
    let mut min = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d: f64 = centers[i]
                .iter()
                .zip(centers[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    min / spec.noise
}

pub fn clustered_bench(classes: usize) -> BenchConfig {
    let defaults = BenchConfig::default();
    BenchConfig {
        corpus: CorpusSpec {
            classes,
            seed: 100 + classes as u64,
            ..defaults.corpus
        },
        queries: 4,
        seed: 11,
        ..defaults
    }
}

/// Hierarchical and flat retrieval agree when C = 1 and J = 1.
pub fn collapse_case() -> Result<(), String> {
    let mut spec = CorpusSpec::new(16, 1, 4, 5);
    spec.grid_height = 8;
    spec.grid_width = 8;
    let corpus = SyntheticCorpus::new(spec).unwrap();
    let templates = corpus.images("t", 40, 2);
    let cfg = DatabaseConfig {
        num_classes: 1,
        num_semantic_prototypes: 1,
        seed: 0,
    };
    let db = build_database(&templates, &cfg).unwrap().database;
    let retriever = Retriever::new(&db).unwrap();
    for q in 0..3 {
        let query = corpus.image(format!("q{q}"), 0, 900 + q);
        let params = RetrievalParams { k_prime: 1, k: 150 };
        let hier = retriever.hierarchical_retrieve(&query, params).unwrap();
        let flat = retriever.flat_retrieve(&query, params.k).unwrap();
        for (i, (h, f)) in hier.patches.iter().zip(&flat.patches).enumerate() {
            check(h.instances == f.instances, || {
                format!("collapse case: query {q} patch {i} differs")
            })?;
        }
    }
    Ok(())
}

pub fn retrieval_agreement() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 1.0;
    let mut min_sep = f64::INFINITY;
    for classes in [2, 3, 5] {
        let cfg = clustered_bench(classes);
        let corpus = SyntheticCorpus::new(cfg.corpus).unwrap();
        let sep = separation_ratio(&corpus);
        min_sep = min_sep.min(sep);
        check(sep >= 5.0, || {
            format!("C={classes}: separation only {sep:.2}x the intra-cluster spread")
        })?;
        let rows = run_benchmark(&cfg).map_err(|e| e.to_string())?;
        for r in rows
            .iter()
            .filter(|r| r.mode == RetrievalMode::Hierarchical)
        {
            worst = worst.min(r.agreement);
            check(r.agreement >= 0.95, || {
                format!(
                    "C={classes}, {} tokens: agreement {:.4} < 0.95",
                    r.tokens, r.agreement
                )
            })?;
        }
    }
    collapse_case()?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "min top-K agreement {worst:.4} (C in 2,3,5; 10k-100k tokens; separation >= {min_sep:.1}x); collapse case bitwise"
    ))
}

pub fn efficiency() -> Outcome {
    let start = Instant::now();
    let rows = run_benchmark(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for pair in rows.chunks(2) {
        let (flat, hier) = (&pair[0], &pair[1]);
        check(hier.comparisons < flat.comparisons, || {
            format!(
                "{} tokens: {} comparisons vs flat {}",
                hier.tokens, hier.comparisons, flat.comparisons
            )
        })?;
        let ratio = hier.mean_ms / flat.mean_ms;
        if hier.tokens >= 50_000 {
            check(ratio <= 0.5, || {
                format!("{} tokens: latency ratio {ratio:.3} > 0.5", hier.tokens)
            })?;
        }
        summary.push(format!("{}: {ratio:.3}x", hier.tokens));
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "hier/flat latency {}; fewer comparisons at every size",
        summary.join(", ")
    ))
}

// --- numerics ----------------------------------------------------------------

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

pub struct KernelErrors {
    pub conv: f64,
    pub softmax: f64,
    pub cosine: f64,
    pub attention: f64,
    pub forward: f64,
}

/// Worst relative error of each kernel against its reference on one random
/// configuration.
pub fn kernel_errors(seed: u64) -> KernelErrors {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(2..6), r.random_range(2..6));
    let d = r.random_range(2..6);
    let k = r.random_range(2..8);
    let m = r.random_range(2..5);
    let top_k = r.random_range(1..=m);
    let cfg = toy_config(d, k, m, top_k);

    let size = if r.random_bool(0.5) { 1 } else { 3 };
    let (cin, cout) = (r.random_range(1..6), r.random_range(1..6));
    let input = uniform_grid(&mut r, h, w, cin, -1.0, 1.0);
    let weights: Vec<f64> = (0..size * size * cin * cout)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
    let ours = conv2d(
        &input,
        ConvKernel {
            size,
            c_in: cin,
            c_out: cout,
            weights: &weights,
            bias: &bias,
        },
    )
    .unwrap();
    let reference = oracles::conv(
        &oracles::to_nested(&input),
        size,
        cin,
        cout,
        &weights,
        &bias,
    );
    let conv = max_rel(ours.data(), &oracles::flatten(&reference));

    let logits: Vec<f64> = (0..r.random_range(1..12))
        .map(|_| r.random_range(-30.0..30.0))
        .collect();
    let softmax_err = max_rel(&softmax(&logits).unwrap(), &oracles::softmax(&logits));

    let len = r.random_range(1..64);
    let a: Vec<f32> = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
    let b: Vec<f32> = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
    let cosine = rel_err(cosine_similarity(&a, &b).unwrap(), oracles::cosine(&a, &b));

    let params = random_params(cfg, seed);
    let fused = uniform_grid(&mut r, h, w, 3 * d, -1.0, 1.0);
    let cost = CostVolume::from_grid(uniform_grid(&mut r, h, w, k, 0.0, 2.0)).unwrap();
    let expert = &params.experts[r.random_range(0..m)];
    let ours = denoise_expert(&fused, &cost, expert, cfg.beta).unwrap();
    let nested_cost = oracles::to_nested(cost.as_grid());
    let reference =
        oracles::denoise_expert(&oracles::to_nested(&fused), &nested_cost, expert, cfg.beta);
    let attention = max_rel(&ours.refined, &reference);

    let inputs = labeled_inputs(&mut r, &cfg, h, w);
    let ours = filter_forward(
        &inputs.query_grid,
        &inputs.prototype_grid,
        &inputs.cost,
        &params,
    )
    .unwrap();
    let reference = oracles::filter_forward(
        &oracles::to_nested(&inputs.query_grid),
        &oracles::to_nested(&inputs.prototype_grid),
        &oracles::to_nested(inputs.cost.as_grid()),
        &params,
    );
    let forward = max_rel(&ours.map, &reference);
    KernelErrors {
        conv,
        softmax: softmax_err,
        cosine,
        attention,
        forward,
    }
}

pub fn numeric_kernels() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let names = [
        "conv2d",
        "softmax",
        "cosine",
        "cross-attention",
        "filter_forward",
    ];
    for seed in 0..12 {
        let e = kernel_errors(seed);
        for (w, v) in worst
            .iter_mut()
            .zip([e.conv, e.softmax, e.cosine, e.attention, e.forward])
        {
            *w = w.max(v);
        }
    }
    for (name, &w) in names.iter().zip(&worst) {
        check(w <= 1e-6, || format!("{name}: relative error {w:.3e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    let parts: Vec<String> = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect();
    Ok(format!(
        "12 configs; worst relative error {}",
        parts.join(", ")
    ))
}

// --- gradients ---------------------------------------------------------------

const FD_STEP: f64 = 1e-4;

/// Worst elementwise relative error between the analytic gradient and
/// central differences, with the parameter it occurred at.
pub fn worst_gradient_error(
    params: &FilterParameters,
    batch: &[LabeledInputs],
    cfg: &LossConfig,
) -> (f64, String) {
    let analytic = loss_gradient(params, batch, cfg)
        .unwrap()
        .gradient
        .to_flat();
    let names: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut worst = (0.0, String::new());
    let mut idx = 0;
    for (name, len) in names {
        for e in 0..len {
            let mut shifted = base.clone();
            shifted[idx] = base[idx] + FD_STEP;
            probe.set_flat(&shifted).unwrap();
            let plus = batch_loss(&probe, batch, cfg).unwrap().total;
            shifted[idx] = base[idx] - FD_STEP;
            probe.set_flat(&shifted).unwrap();
            let minus = batch_loss(&probe, batch, cfg).unwrap().total;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let rel = (analytic[idx] - fd).abs() / (fd.abs() + 1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{e}]"));
            }
            idx += 1;
        }
    }
    worst
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut overall = (0.0, String::new());
    for seed in 0..3u64 {
        let cfg = toy_config(4, 6, 2, 1);
        let params = random_params(cfg, seed);
        let mut r = rng(100 + seed);
        let batch: Vec<_> = (0..2).map(|_| labeled_inputs(&mut r, &cfg, 3, 3)).collect();
        let (worst, at) = worst_gradient_error(&params, &batch, &LossConfig::default());
        check(worst <= 1e-3, || {
            format!("seed {seed}: relative error {worst:.3e} at {at}")
        })?;
        if worst > overall.0 {
            overall = (worst, at);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "3 configs (D=4, K=6, 3x3, M=2); worst relative error {:.2e} at {}",
        overall.0, overall.1
    ))
}

// --- end to end ----------------------------------------------------------------

pub fn end_to_end() -> Outcome {
    let setup = e2e::E2eSetup::toy();
    check(setup.train.epochs <= 50, || {
        format!("{} epochs configured", setup.train.epochs)
    })?;
    let out = e2e::run(&setup);
    let (f, b) = (&out.filtered, &out.baseline);
    check(f.pixel_auroc >= 0.95, || {
        format!("pixel AUROC {:.4} < 0.95", f.pixel_auroc)
    })?;
    check(f.image_auroc >= 0.95, || {
        format!("image AUROC {:.4} < 0.95", f.image_auroc)
    })?;
    check(f.pixel_auroc >= b.pixel_auroc, || {
        format!(
            "filtered pixel AUROC {:.4} below min-cost baseline {:.4}",
            f.pixel_auroc, b.pixel_auroc
        )
    })?;
    let secs = out.elapsed.as_secs_f64();
    check(secs < 600.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "pixel AUROC {:.4} (baseline {:.4}), image AUROC {:.4} (baseline {:.4}), {} epochs",
        f.pixel_auroc, b.pixel_auroc, f.image_auroc, b.image_auroc, setup.train.epochs
    ))
}

// --- metrics -------------------------------------------------------------------

/// Scores from a small integer range so ties are common, with both labels
/// present.
pub fn random_binary_instance(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = r.random_range(2..8);
    let scores: Vec<f64> = (0..n)
        .map(|_| f64::from(r.random_range(0..levels)) / 4.0)
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    (scores, labels)
}

/// Random small maps with rectangular and scattered anomalies, at least one
/// region overall and normal pixels in every image.
pub fn random_aupro_instance(r: &mut impl Rng) -> (Vec<PixelMap>, Vec<GroundTruthMask>) {
    let images = r.random_range(1..4);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for i in 0..images {
        let (h, w) = (r.random_range(3..9), r.random_range(3..9));
        let mut mask = vec![0u8; h * w];
        for p in mask.iter_mut() {
            if r.random_bool(0.15) {
                *p = 1;
            }
        }
        if i == 0 {
            mask[0] = 1;
        }
        mask[h * w - 1] = 0;
        let values: Vec<f64> = mask
            .iter()
            .map(|&m| {
                let v = f64::from(r.random_range(0..12)) / 12.0;
                if m == 1 {
                    (v + 0.3).min(1.0)
                } else {
                    v
                }
            })
            .collect();
        maps.push(PixelMap {
            height: h,
            width: w,
            values,
        });
        masks.push(GroundTruthMask::new(format!("m{i}"), h, w, mask).unwrap());
    }
    (maps, masks)
}

pub fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst_pr: f64 = 0.0;
    for i in 0..100 {
        let n = r.random_range(2..40);
        let (scores, labels) = random_binary_instance(&mut r, n);
        let ours = auroc(&scores, &labels).unwrap();
        let reference = oracles::auroc(&scores, &labels);
        check(ours == reference, || {
            format!("instance {i}: AUROC {ours} vs pairwise {reference}")
        })?;
        let ap = (average_precision(&scores, &labels).unwrap()
            - oracles::average_precision(&scores, &labels))
        .abs();
        let f1 = (f1_max(&scores, &labels).unwrap() - oracles::f1_max(&scores, &labels)).abs();
        worst_pr = worst_pr.max(ap).max(f1);
    }
    check(worst_pr <= 1e-12, || {
        format!("AP/F1-max differ from the sweep by {worst_pr:.3e}")
    })?;
    let mut worst_pro: f64 = 0.0;
    for i in 0..40 {
        let (maps, masks) = random_aupro_instance(&mut r);
        let limit = [0.3, 0.05, 1.0, 0.5][i % 4];
        let ours = aupro(&maps, &masks, limit).unwrap();
        let slow: Vec<_> = maps
            .iter()
            .map(|m| (m.height, m.width, m.values.clone()))
            .collect();
        let reference = oracles::aupro(&slow, &masks, limit);
        worst_pro = worst_pro.max((ours - reference).abs());
    }
    check(worst_pro <= 1e-6, || {
        format!("AUPRO differs from the slow sweep by {worst_pro:.3e}")
    })?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "100 AUROC instances exact; AP/F1-max within {worst_pr:.1e}; AUPRO within {worst_pro:.1e} on 40 instances"
    ))
}

// --- routing -------------------------------------------------------------------

/// Copy of `params` with expert `perm[i]` moved to slot `i` in both stages,
/// router output channels permuted to match.
pub fn permute_experts(
    params: &FilterParameters,
    perm1: &[usize],
    perm2: &[usize],
) -> FilterParameters {
    let mut out = params.clone();
    let permute_router = |src: &ConvLayer, dst: &mut ConvLayer, perm: &[usize]| {
        let m = src.c_out;
        for ci in 0..src.c_in {
            for (i, &p) in perm.iter().enumerate() {
                dst.weight[ci * m + i] = src.weight[ci * m + p];
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            dst.bias[i] = src.bias[p];
        }
    };
    permute_router(&params.router1, &mut out.router1, perm1);
    permute_router(&params.router2, &mut out.router2, perm2);
    out.guidance = perm1.iter().map(|&p| params.guidance[p].clone()).collect();
    out.experts = perm2.iter().map(|&p| params.experts[p].clone()).collect();
    out
}

pub fn routing_invariants() -> Outcome {
    let mut r = rng(77);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..20u64 {
        let m = r.random_range(2..6);
        let top_k = r.random_range(1..=m);
        let cfg = toy_config(r.random_range(2..5), r.random_range(2..6), m, top_k);
        let params = random_params(cfg, seed);
        let (h, w) = (r.random_range(2..5), r.random_range(2..5));
        let inputs = labeled_inputs(&mut r, &cfg, h, w);

        let guidance = fuse_guidance(&inputs.query_grid, &inputs.prototype_grid, &params).unwrap();
        let kept = guidance.gates.iter().filter(|&&g| g != 0.0).count();
        check(kept == top_k, || {
            format!("seed {seed}: {kept} gates kept, expected {top_k}")
        })?;
        let min_kept = guidance
            .gates
            .iter()
            .filter(|&&g| g != 0.0)
            .fold(f64::INFINITY, |a, &b| a.min(b));
        for (g, p) in guidance.gates.iter().zip(&guidance.probabilities) {
            check(*g == 0.0 || g == p, || {
                format!("seed {seed}: kept gate {g} altered from {p}")
            })?;
            check(*g != 0.0 || *p <= min_kept, || {
                format!("seed {seed}: dropped {p} above a kept gate")
            })?;
        }

        let out = filter_forward(
            &inputs.query_grid,
            &inputs.prototype_grid,
            &inputs.cost,
            &params,
        )
        .unwrap();
        worst_sum = worst_sum.max((out.stage2_weights.iter().sum::<f64>() - 1.0).abs());

        let mut perm1: Vec<usize> = (0..m).collect();
        let mut perm2 = perm1.clone();
        perm1.shuffle(&mut r);
        perm2.shuffle(&mut r);
        let permuted = permute_experts(&params, &perm1, &perm2);
        let again = filter_forward(
            &inputs.query_grid,
            &inputs.prototype_grid,
            &inputs.cost,
            &permuted,
        )
        .unwrap();
        let diff = out
            .map
            .iter()
            .zip(&again.map)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_perm = worst_perm.max(diff);
    }
    check(worst_sum <= 1e-6, || {
        format!("stage-2 weights sum off by {worst_sum:.3e}")
    })?;
    check(worst_perm <= 1e-6, || {
        format!("permuting experts changed the map by {worst_perm:.3e}")
    })?;

    // Sparse gate on raw probability vectors, including ties.
    for k in 1..=3 {
        let gated = sparse_gate(&[0.2, 0.4, 0.2, 0.2], k).unwrap();
        check(gated.iter().filter(|&&g| g != 0.0).count() == k, || {
            format!("tie case k={k}: {gated:?}")
        })?;
    }

    let m = 3;
    let uniform: Vec<Vec<f64>> = vec![vec![1.0 / m as f64; m]; m];
    let rotating: Vec<Vec<usize>> = (0..m).map(|s| vec![s, (s + 1) % m]).collect();
    let bal_uniform = balance_loss(&uniform, &rotating).unwrap();
    check((bal_uniform - 1.0).abs() <= 1e-12, || {
        format!("uniform routing balance {bal_uniform}")
    })?;
    let peaked: Vec<Vec<f64>> = vec![vec![0.9, 0.05, 0.05]; 4];
    let single: Vec<Vec<usize>> = vec![vec![0]; 4];
    let bal_single = balance_loss(&peaked, &single).unwrap();
    check(bal_single > 1.0, || {
        format!("single-expert balance {bal_single} not above 1")
    })?;

    Ok(format!(
        "top-k gating exact on 20 configs; stage-2 sum error {worst_sum:.1e}; permutation error {worst_perm:.1e}; balance uniform {bal_uniform:.6}, single-expert {bal_single:.3}"
    ))
}

// --- formats -------------------------------------------------------------------

pub fn random_embedding_set(r: &mut impl Rng, id: &str, dim: usize) -> TokenEmbeddingSet {
    let (h, w) = (r.random_range(1..6), r.random_range(1..6));
    let cls: Vec<f32> = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
    let patches: Vec<f32> = (0..h * w * dim)
        .map(|_| r.random_range(-3.0..3.0))
        .collect();
    let label = r
        .random_bool(0.5)
        .then(|| format!("label-{}", r.random_range(0..100)));
    TokenEmbeddingSet::new(id, cls, h, w, patches, h * 14, w * 14 + 3, label).unwrap()
}

pub fn random_map(r: &mut impl Rng) -> AnomalyMap {
    let (h, w) = (r.random_range(1..8), r.random_range(1..8));
    let values: Vec<f64> = (0..h * w)
        .map(|_| f64::from(r.random_range(1e-6f32..0.999_999)))
        .collect();
    AnomalyMap::new(h, w, values, h * 14, w * 14).unwrap()
}

pub fn random_filter(r: &mut impl Rng) -> FilterParameters {
    let m = r.random_range(1..4);
    let cfg = FilterConfig {
        dim: r.random_range(1..5),
        cost_channels: r.random_range(1..6),
        guidance_experts: m,
        filter_experts: r.random_range(1..4),
        top_k: r.random_range(1..=m),
        beta: 0.1,
    };
    FilterParameters::init(cfg, r.random()).unwrap()
}

pub fn random_database(r: &mut impl Rng) -> raid_core::database::HierarchicalDatabase {
    let dim = r.random_range(2..6);
    let templates: Vec<_> = (0..r.random_range(2..6))
        .map(|i| random_embedding_set(r, &format!("t{i}"), dim))
        .collect();
    let cfg = DatabaseConfig {
        num_classes: r.random_range(1..3),
        num_semantic_prototypes: r.random_range(1..4),
        seed: r.random(),
    };
    build_database(&templates, &cfg).unwrap().database
}

fn roundtrip<T: PartialEq>(
    value: &T,
    save: impl Fn(&T, &mut Vec<u8>) -> raid_core::Result<u64>,
    load: impl Fn(&[u8]) -> raid_core::Result<T>,
    name: &str,
) -> Result<Vec<u8>, String> {
    let mut bytes = Vec::new();
    save(value, &mut bytes).map_err(|e| format!("{name}: save failed: {e}"))?;
    let back = load(&bytes).map_err(|e| format!("{name}: load failed: {e}"))?;
    check(&back == value, || format!("{name}: loaded value differs"))?;
    let mut again = Vec::new();
    save(&back, &mut again).unwrap();
    check(again == bytes, || format!("{name}: re-saved bytes differ"))?;
    Ok(bytes)
}

type Loader = (&'static str, fn(&[u8]) -> bool);

pub fn format_roundtrips() -> Outcome {
    let mut r = rng(4242);
    let trials = 25;
    let mut samples: Vec<Vec<u8>> = Vec::new();
    for t in 0..trials {
        let dim = r.random_range(1..8);
        let set = random_embedding_set(&mut r, &format!("img-{t}"), dim);
        let emb = roundtrip(
            &set,
            |v, b| save_embedding_set(v, b),
            |b| load_embedding_set(b),
            "RAIDEMB1",
        )?;
        let db = random_database(&mut r);
        let dbb = roundtrip(
            &db,
            |v, b| save_database(v, b),
            |b| load_database(b),
            "RAIDDB01",
        )?;
        let f = random_filter(&mut r);
        let fb = roundtrip(&f, |v, b| save_filter(v, b), |b| load_filter(b), "RAIDFLT1")?;
        let map = random_map(&mut r);
        let mb = roundtrip(&map, |v, b| save_map(v, b), |b| load_map(b), "RAIDMAP1")?;
        if t == 0 {
            samples = vec![emb, dbb, fb, mb];
        }
    }
    let loaders: [Loader; 4] = [
        ("RAIDEMB1", |b| {
            matches!(load_embedding_set(b), Err(RaidError::BadMagic { .. }))
        }),
        ("RAIDDB01", |b| {
            matches!(load_database(b), Err(RaidError::BadMagic { .. }))
        }),
        ("RAIDFLT1", |b| {
            matches!(load_filter(b), Err(RaidError::BadMagic { .. }))
        }),
        ("RAIDMAP1", |b| {
            matches!(load_map(b), Err(RaidError::BadMagic { .. }))
        }),
    ];
    for (i, (name, load)) in loaders.iter().enumerate() {
        for (j, bytes) in samples.iter().enumerate() {
            if i != j {
                check(load(bytes), || {
                    format!(
                        "{name} loader did not reject a {} file by magic",
                        loaders[j].0
                    )
                })?;
            }
        }
    }
    Ok(format!("{trials} randomized instances of each of the 4 formats round-trip bitwise; cross-format magic rejected"))
}
