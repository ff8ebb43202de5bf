//! Synthetic anomalies, losses, gradients and the filter trainer.
//!
//! Training sees only normal templates. Each step corrupts a template in
//! token space (a rectangle of its patch tokens is blended with tokens from a
//! donor template), runs retrieval and the filter on the corrupted query, and
//! scores the map against the rectangle with a focal loss. A switch-style
//! balance term keeps the sparse stage-1 router from collapsing.
//!
//! Gradients are derived by hand and checked against central finite
//! differences in the test suite.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::database::HierarchicalDatabase;
use crate::error::{ensure, RaidError, Result};
use crate::filter::{filter_forward, FilterConfig, FilterOutput, FilterParameters};
use crate::interchange::TokenEmbeddingSet;
use crate::numerics::{
    conv2d_backward, matmul, matmul_nt, matmul_tn, softmax_backward, FeatureGrid,
};
use crate::pipeline::{prepare_inputs, RetrievalMode};
use crate::retrieval::{CostVolume, RetrievalParams, Retriever};

pub const DEFAULT_LAMBDA_BAL: f64 = 0.005;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionConfig {
    /// Bounds on the rectangle's share of the grid.
    pub min_area: f64,
    pub max_area: f64,
    /// Bounds on the blend weight of the foreign tokens.
    pub min_alpha: f64,
    pub max_alpha: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            min_area: 0.02,
            max_area: 0.25,
            min_alpha: 0.5,
            max_alpha: 1.0,
        }
    }
}

/// A corrupted template with its anomaly mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub query: TokenEmbeddingSet,
    /// `H' x W'`, 1 on corrupted cells.
    pub mask: Vec<u8>,
    pub source_id: String,
    pub alpha: f64,
}

/// Blends a random rectangle of `template` with tokens from `donor`.
///
/// The foreign token for cell `(y, x)` is the donor's patch at
/// `((y + dy) mod H_d, (x + dx) mod W_d)` for a random shift. Cells outside
/// the rectangle and the CLS token are copied bit for bit.
pub fn inject_anomaly(
    template: &TokenEmbeddingSet,
    donor: &TokenEmbeddingSet,
    seed: u64,
    config: &InjectionConfig,
) -> Result<TrainingSample> {
    let (h, w) = (template.grid_height(), template.grid_width());
    ensure(h * w >= 4, || {
        RaidError::InvalidArgument(format!("grid {h}x{w} is too small for anomaly injection"))
    })?;
    ensure(donor.dim() == template.dim(), || {
        RaidError::DimensionMismatch(format!(
            "donor {} has D={}, template {} has D={}",
            donor.image_id(),
            donor.dim(),
            template.image_id(),
            template.dim()
        ))
    })?;
    ensure(
        config.min_alpha >= 0.0 && config.min_alpha <= config.max_alpha && config.max_alpha <= 1.0,
        || RaidError::InvalidArgument("alpha bounds must satisfy 0 <= min <= max <= 1".into()),
    )?;
    let cells = (h * w) as f64;
    let shapes: Vec<(usize, usize)> = (1..=h)
        .flat_map(|rh| (1..=w).map(move |rw| (rh, rw)))
        .filter(|&(rh, rw)| {
            let frac = (rh * rw) as f64 / cells;
            frac >= config.min_area && frac <= config.max_area
        })
        .collect();
    ensure(!shapes.is_empty(), || {
        RaidError::InvalidArgument(format!(
            "no rectangle in a {h}x{w} grid covers between {} and {} of it",
            config.min_area, config.max_area
        ))
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rh, rw) = shapes[rng.random_range(0..shapes.len())];
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    let alpha = if config.max_alpha > config.min_alpha {
        rng.random_range(config.min_alpha..=config.max_alpha)
    } else {
        config.min_alpha
    };
    let (dh, dw) = (donor.grid_height(), donor.grid_width());
    let same = donor.image_id() == template.image_id();
    let (dy, dx) = loop {
        let s = (rng.random_range(0..dh), rng.random_range(0..dw));
        // Avoid the identity shift when the donor is the template itself.
        if !(same && s == (0, 0)) || dh * dw == 1 {
            break s;
        }
    };

    let d = template.dim();
    let mut tokens = template.patch_tokens().to_vec();
    let mut mask = vec![0u8; h * w];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            let cell = y * w + x;
            mask[cell] = 1;
            let foreign = donor.patch((y + dy) % dh, (x + dx) % dw);
            for (t, &f) in tokens[cell * d..(cell + 1) * d].iter_mut().zip(foreign) {
                *t = if alpha == 1.0 {
                    f
                } else {
                    ((1.0 - alpha) * f64::from(*t) + alpha * f64::from(f)) as f32
                };
            }
        }
    }
    Ok(TrainingSample {
        query: template.with_patch_tokens(tokens)?,
        mask,
        source_id: template.image_id().to_string(),
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of the anomalous class; normal pixels get `1 - alpha`.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.75,
        }
    }
}

/// Per-pixel focal term and its derivative with respect to the map value.
fn focal_term(m: f64, anomalous: bool, fp: FocalParams) -> (f64, f64) {
    let (pt, weight, sign) = if anomalous {
        (m, fp.alpha, 1.0)
    } else {
        (1.0 - m, 1.0 - fp.alpha, -1.0)
    };
    let q = 1.0 - pt;
    let log_pt = pt.ln();
    let value = -weight * q.powf(fp.gamma) * log_pt;
    let mut d_pt = -weight * q.powf(fp.gamma) / pt;
    if fp.gamma != 0.0 {
        d_pt += weight * fp.gamma * q.powf(fp.gamma - 1.0) * log_pt;
    }
    (value, sign * d_pt)
}

fn check_map(map: &[f64], mask: &[u8]) -> Result<()> {
    ensure(map.len() == mask.len(), || {
        RaidError::DimensionMismatch(format!(
            "map has {} cells, mask has {}",
            map.len(),
            mask.len()
        ))
    })?;
    ensure(!map.is_empty(), || {
        RaidError::Empty("focal loss of an empty map".into())
    })?;
    ensure(map.iter().all(|&m| m > 0.0 && m < 1.0), || {
        RaidError::InvalidArgument("focal loss needs map values strictly inside (0, 1)".into())
    })
}

/// Mean focal loss over pixels.
pub fn focal_loss(map: &[f64], mask: &[u8], params: FocalParams) -> Result<f64> {
    check_map(map, mask)?;
    let sum: f64 = map
        .iter()
        .zip(mask)
        .map(|(&m, &y)| focal_term(m, y != 0, params).0)
        .sum();
    Ok(sum / map.len() as f64)
}

fn check_routing(probabilities: &[Vec<f64>], active: &[Vec<usize>]) -> Result<(usize, usize)> {
    ensure(!probabilities.is_empty(), || {
        RaidError::Empty("balance loss of an empty batch".into())
    })?;
    ensure(probabilities.len() == active.len(), || {
        RaidError::DimensionMismatch("one active set per sample is required".into())
    })?;
    let m = probabilities[0].len();
    let k = active[0].len();
    ensure(m >= 1 && k >= 1, || {
        RaidError::InvalidArgument("routing needs M >= 1 and k >= 1".into())
    })?;
    for (p, a) in probabilities.iter().zip(active) {
        ensure(
            p.len() == m && a.len() == k && a.iter().all(|&i| i < m),
            || RaidError::DimensionMismatch("inconsistent routing statistics".into()),
        )?;
    }
    Ok((m, k))
}

/// Fraction of samples whose active set contains each expert, divided by `k`.
fn dispatch_fractions(active: &[Vec<usize>], m: usize, k: usize) -> Vec<f64> {
    let mut f = vec![0.0; m];
    for a in active {
        for &i in a {
            f[i] += 1.0;
        }
    }
    let scale = 1.0 / (active.len() * k) as f64;
    f.iter_mut().for_each(|v| *v *= scale);
    f
}

/// Switch-style load balance `M * sum_i f_i * P_i` over a batch of stage-1
/// routing decisions.
pub fn balance_loss(probabilities: &[Vec<f64>], active: &[Vec<usize>]) -> Result<f64> {
    let (m, k) = check_routing(probabilities, active)?;
    let f = dispatch_fractions(active, m, k);
    let b = probabilities.len() as f64;
    let mut p_mean = vec![0.0; m];
    for p in probabilities {
        for (acc, v) in p_mean.iter_mut().zip(p) {
            *acc += v / b;
        }
    }
    Ok(m as f64 * f.iter().zip(&p_mean).map(|(f, p)| f * p).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub focal: f64,
    pub balance: f64,
    pub total: f64,
    pub lambda_bal: f64,
}

impl LossBreakdown {
    pub fn new(focal: f64, balance: f64, lambda_bal: f64) -> Self {
        Self {
            focal,
            balance,
            total: focal + lambda_bal * balance,
            lambda_bal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub lambda_bal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            lambda_bal: DEFAULT_LAMBDA_BAL,
        }
    }
}

/// Batch loss: mean focal loss over samples plus the weighted balance term.
pub fn total_loss(
    maps: &[&[f64]],
    masks: &[&[u8]],
    probabilities: &[Vec<f64>],
    active: &[Vec<usize>],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    ensure(maps.len() == masks.len(), || {
        RaidError::DimensionMismatch("one mask per map is required".into())
    })?;
    ensure(!maps.is_empty(), || {
        RaidError::Empty("loss of an empty batch".into())
    })?;
    let mut focal = 0.0;
    for (map, mask) in maps.iter().zip(masks) {
        focal += focal_loss(map, mask, config.focal)?;
    }
    focal /= maps.len() as f64;
    let balance = balance_loss(probabilities, active)?;
    Ok(LossBreakdown::new(focal, balance, config.lambda_bal))
}

/// Filter inputs paired with a target mask.
#[derive(Debug, Clone)]
pub struct LabeledInputs {
    pub query_grid: FeatureGrid,
    pub prototype_grid: FeatureGrid,
    pub cost: CostVolume,
    pub mask: Vec<u8>,
}

fn forward_batch(params: &FilterParameters, batch: &[LabeledInputs]) -> Result<Vec<FilterOutput>> {
    ensure(!batch.is_empty(), || {
        RaidError::Empty("empty training batch".into())
    })?;
    batch
        .par_iter()
        .map(|s| filter_forward(&s.query_grid, &s.prototype_grid, &s.cost, params))
        .collect()
}

fn active_sets(outputs: &[FilterOutput]) -> Vec<Vec<usize>> {
    outputs
        .iter()
        .map(|o| {
            o.guidance
                .gates
                .iter()
                .enumerate()
                .filter(|(_, &g)| g != 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

fn loss_of(
    outputs: &[FilterOutput],
    batch: &[LabeledInputs],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let maps: Vec<&[f64]> = outputs.iter().map(|o| o.map.as_slice()).collect();
    let masks: Vec<&[u8]> = batch.iter().map(|s| s.mask.as_slice()).collect();
    let probs: Vec<Vec<f64>> = outputs
        .iter()
        .map(|o| o.guidance.probabilities.clone())
        .collect();
    total_loss(&maps, &masks, &probs, &active_sets(outputs), config)
}

/// Forward pass and loss for a batch, without gradients.
pub fn batch_loss(
    params: &FilterParameters,
    batch: &[LabeledInputs],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let outputs = forward_batch(params, batch)?;
    loss_of(&outputs, batch, config)
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: LossBreakdown,
    /// Same shapes as the parameters.
    pub gradient: FilterParameters,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast(h: usize, w: usize, values: &[f64], scale: f64) -> FeatureGrid {
    let mut data = Vec::with_capacity(h * w * values.len());
    for _ in 0..h * w {
        data.extend(values.iter().map(|v| v * scale));
    }
    FeatureGrid::new(h, w, values.len(), data).expect("broadcast shape is consistent")
}

/// Backpropagates one sample. `d_map` is dL/dM per cell and `d_probs_extra`
/// the balance term's dL/dp for the stage-1 probabilities.
fn backward_sample(
    params: &FilterParameters,
    sample: &LabeledInputs,
    out: &FilterOutput,
    d_map: &[f64],
    d_probs_extra: &[f64],
) -> Result<FilterParameters> {
    let cfg = *params.config();
    let (d, k) = (cfg.dim, cfg.cost_channels);
    let (h, w) = (out.height, out.width);
    let n = h * w;
    let c = sample.cost.as_grid();
    let fused = &out.guidance.fused;
    let mut grad = FilterParameters::zeros(cfg);
    let mut d_fused = vec![0.0; n * 3 * d];

    // Stage-2 dense router.
    let d_q: Vec<f64> = out
        .experts
        .iter()
        .map(|e| e.refined.iter().zip(d_map).map(|(r, g)| r * g).sum())
        .collect();
    let d_l2 = softmax_backward(&out.stage2_weights, &d_q);
    let g = conv2d_backward(
        &out.router2_input,
        params.router2.kernel(),
        &broadcast(h, w, &d_l2, 1.0 / n as f64),
    )?;
    grad.router2.weight = g.weights;
    grad.router2.bias = g.bias;
    let in_ch = 3 * d + k;
    for cell in 0..n {
        add_into(
            &mut d_fused[cell * 3 * d..(cell + 1) * 3 * d],
            &g.input.data()[cell * in_ch..cell * in_ch + 3 * d],
        );
    }

    // Stage-2 experts.
    let scale = 1.0 / (k as f64).sqrt();
    for ((expert, eo), (ge, &q)) in params
        .experts
        .iter()
        .zip(&out.experts)
        .zip(grad.experts.iter_mut().zip(&out.stage2_weights))
    {
        let d_logit: Vec<f64> = eo
            .refined
            .iter()
            .zip(d_map)
            .map(|(r, g)| q * g * r * (1.0 - r))
            .collect();
        let g = conv2d_backward(
            &eo.mixed,
            expert.output_conv.kernel(),
            &FeatureGrid::new(h, w, 1, d_logit)?,
        )?;
        ge.output_conv.weight = g.weights;
        ge.output_conv.bias = g.bias;
        let d_mixed = g.input.into_data();

        let mixed_source: Vec<f64> = eo
            .values
            .iter()
            .zip(eo.confidence.data())
            .map(|(v, r)| v + cfg.beta * r)
            .collect();
        let d_attention = matmul_nt(&d_mixed, &mixed_source, n, k, n);
        let d_source = matmul_tn(&eo.attention, &d_mixed, n, n, k);

        ge.w_v = matmul_tn(c.data(), &d_source, n, k, k);
        let d_conf_pre: Vec<f64> = d_source
            .iter()
            .zip(eo.confidence.data())
            .map(|(g, r)| cfg.beta * g * r * (1.0 - r))
            .collect();
        let g = conv2d_backward(
            &eo.confidence_hidden,
            expert.confidence_proj.kernel(),
            &FeatureGrid::new(h, w, k, d_conf_pre)?,
        )?;
        ge.confidence_proj.weight = g.weights;
        ge.confidence_proj.bias = g.bias;
        let g = conv2d_backward(c, expert.confidence_conv.kernel(), &g.input)?;
        ge.confidence_conv.weight = g.weights;
        ge.confidence_conv.bias = g.bias;

        let mut d_scores = Vec::with_capacity(n * n);
        for (a_row, g_row) in eo
            .attention
            .chunks_exact(n)
            .zip(d_attention.chunks_exact(n))
        {
            d_scores.extend(
                softmax_backward(a_row, g_row)
                    .into_iter()
                    .map(|v| v * scale),
            );
        }
        let d_queries = matmul(&d_scores, &eo.keys, n, n, k);
        let d_keys = matmul_tn(&d_scores, &eo.queries, n, n, k);
        ge.w_q = matmul_tn(eo.query_features.data(), &d_queries, n, k, k);
        ge.w_k = matmul_tn(c.data(), &d_keys, n, k, k);
        let d_features = matmul_nt(&d_queries, &expert.w_q, n, k, k);
        let g = conv2d_backward(
            fused,
            expert.query_conv.kernel(),
            &FeatureGrid::new(h, w, k, d_features)?,
        )?;
        ge.query_conv.weight = g.weights;
        ge.query_conv.bias = g.bias;
        add_into(&mut d_fused, g.input.data());
    }

    // Stage-1 experts and sparse router.
    let x = &out.guidance.input;
    let mut d_probs = d_probs_extra.to_vec();
    for (i, (expert, e_out)) in params
        .guidance
        .iter()
        .zip(&out.guidance.expert_outputs)
        .enumerate()
    {
        let Some(e_out) = e_out else { continue };
        let gate = out.guidance.gates[i];
        d_probs[i] += e_out
            .data()
            .iter()
            .zip(&d_fused)
            .map(|(e, g)| e * g)
            .sum::<f64>();
        let mut d_residual = Vec::with_capacity(n * d);
        for cell in 0..n {
            d_residual.extend(
                d_fused[cell * 3 * d..cell * 3 * d + d]
                    .iter()
                    .map(|g| gate * g),
            );
        }
        let g = conv2d_backward(
            x,
            expert.conv.kernel(),
            &FeatureGrid::new(h, w, d, d_residual)?,
        )?;
        grad.guidance[i].conv.weight = g.weights;
        grad.guidance[i].conv.bias = g.bias;
    }
    let d_l1 = softmax_backward(&out.guidance.probabilities, &d_probs);
    let g = conv2d_backward(
        x,
        params.router1.kernel(),
        &broadcast(h, w, &d_l1, 1.0 / n as f64),
    )?;
    grad.router1.weight = g.weights;
    grad.router1.bias = g.bias;
    Ok(grad)
}

/// Exact gradient of the batch loss with respect to every parameter tensor.
///
/// The stage-1 expert selection is treated as fixed (it is piecewise
/// constant in the parameters).
pub fn loss_gradient(
    params: &FilterParameters,
    batch: &[LabeledInputs],
    config: &LossConfig,
) -> Result<LossGradient> {
    let outputs = forward_batch(params, batch)?;
    let loss = loss_of(&outputs, batch, config)?;
    let cfg = params.config();
    let b = batch.len() as f64;
    let active = active_sets(&outputs);
    let f = dispatch_fractions(&active, cfg.guidance_experts, cfg.top_k);
    let m1 = cfg.guidance_experts as f64;
    let d_probs_extra: Vec<f64> = f.iter().map(|fi| config.lambda_bal * m1 * fi / b).collect();

    let per_sample: Vec<Result<FilterParameters>> = batch
        .par_iter()
        .zip(&outputs)
        .map(|(s, o)| {
            let n = o.map.len() as f64;
            let d_map: Vec<f64> = o
                .map
                .iter()
                .zip(&s.mask)
                .map(|(&m, &y)| focal_term(m, y != 0, config.focal).1 / (n * b))
                .collect();
            backward_sample(params, s, o, &d_map, &d_probs_extra)
        })
        .collect();

    let mut total = FilterParameters::zeros(*cfg);
    for g in per_sample {
        let g = g?;
        for ((_, dst), (_, src)) in total.tensors_mut().into_iter().zip(g.tensors()) {
            add_into(dst, src);
        }
    }
    for (name, t) in total.tensors() {
        ensure(t.iter().all(|v| v.is_finite()), || {
            RaidError::NonFiniteGradient {
                tensor: name.clone(),
            }
        })?;
    }
    Ok(LossGradient {
        loss,
        gradient: total,
    })
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub retrieval: RetrievalParams,
    pub mode: RetrievalMode,
    pub injection: InjectionConfig,
    pub guidance_experts: usize,
    pub filter_experts: usize,
    pub top_k: usize,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LEARNING_RATE,
            seed: 0,
            batch_size: 4,
            loss: LossConfig::default(),
            retrieval: RetrievalParams::default(),
            mode: RetrievalMode::Hierarchical,
            injection: InjectionConfig::default(),
            guidance_experts: crate::filter::DEFAULT_EXPERTS,
            filter_experts: crate::filter::DEFAULT_EXPERTS,
            top_k: crate::filter::DEFAULT_TOP_K,
            beta: crate::filter::DEFAULT_BETA,
        }
    }
}

impl TrainConfig {
    pub fn filter_config(&self, dim: usize) -> FilterConfig {
        FilterConfig {
            dim,
            cost_channels: self.retrieval.k,
            guidance_experts: self.guidance_experts,
            filter_experts: self.filter_experts,
            top_k: self.top_k,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub focal: f64,
    pub balance: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub params: FilterParameters,
    pub history: Vec<EpochStats>,
}

/// Chooses a donor for each template: a template of another database class
/// when one exists, else any other template, else the template itself.
fn donor_pools(classes: &[usize]) -> Vec<Vec<usize>> {
    (0..classes.len())
        .map(|i| {
            let other_class: Vec<usize> = (0..classes.len())
                .filter(|&j| classes[j] != classes[i])
                .collect();
            if !other_class.is_empty() {
                return other_class;
            }
            let others: Vec<usize> = (0..classes.len()).filter(|&j| j != i).collect();
            if others.is_empty() {
                vec![i]
            } else {
                others
            }
        })
        .collect()
}

/// Builds one labeled training example from `templates[index]`.
fn make_example(
    retriever: &Retriever<'_>,
    templates: &[TokenEmbeddingSet],
    index: usize,
    donors: DonorPool<'_>,
    seed: u64,
    config: &TrainConfig,
) -> Result<LabeledInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let donor = match donors {
        DonorPool::Templates(pool) => &templates[pool[rng.random_range(0..pool.len())]],
        DonorPool::External(sets) => &sets[rng.random_range(0..sets.len())],
    };
    let sample = inject_anomaly(&templates[index], donor, rng.random(), &config.injection)?;
    let exclude = (retriever.database().image_ids().len() > 1).then_some(sample.source_id.as_str());
    let inputs = prepare_inputs(
        retriever,
        &sample.query,
        config.mode,
        config.retrieval,
        exclude,
    )?;
    Ok(LabeledInputs {
        query_grid: inputs.query_grid,
        prototype_grid: inputs.prototype_grid,
        cost: inputs.cost,
        mask: sample.mask,
    })
}

#[derive(Debug, Clone, Copy)]
enum DonorPool<'a> {
    Templates(&'a [usize]),
    External(&'a [TokenEmbeddingSet]),
}

/// Trains a freshly initialized filter on synthetic anomalies injected into
/// `templates`, with foreign tokens taken from other templates.
/// Deterministic for a given seed.
pub fn train_filter(
    templates: &[TokenEmbeddingSet],
    database: &HierarchicalDatabase,
    config: &TrainConfig,
) -> Result<TrainingRun> {
    train_filter_with_donors(templates, &[], database, config)
}

/// As [`train_filter`], but foreign tokens come from `donors`, an external
/// anomaly source, whenever it is non-empty.
pub fn train_filter_with_donors(
    templates: &[TokenEmbeddingSet],
    donors: &[TokenEmbeddingSet],
    database: &HierarchicalDatabase,
    config: &TrainConfig,
) -> Result<TrainingRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = FilterParameters::init(config.filter_config(database.dim()), rng.random())?;
    train_from(params, templates, donors, database, config)
}

/// Continues training from existing parameters. An empty `donors` slice
/// selects the template donor rule.
pub fn train_from(
    mut params: FilterParameters,
    templates: &[TokenEmbeddingSet],
    donors: &[TokenEmbeddingSet],
    database: &HierarchicalDatabase,
    config: &TrainConfig,
) -> Result<TrainingRun> {
    ensure(!templates.is_empty(), || {
        RaidError::Empty("no templates to train on".into())
    })?;
    ensure(config.batch_size >= 1, || {
        RaidError::InvalidArgument("batch size must be >= 1".into())
    })?;
    ensure(config.lr.is_finite() && config.lr > 0.0, || {
        RaidError::InvalidArgument("learning rate must be positive".into())
    })?;
    params
        .config()
        .ensure_compatible(database.dim(), config.retrieval.k)?;
    let retriever = Retriever::new(database)?;
    let classes = templates
        .iter()
        .map(|t| retriever.retrieve_class(t.cls_token()))
        .collect::<Result<Vec<_>>>()?;
    let pools = donor_pools(&classes);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(config.lr, flat.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..templates.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (chunk, chunk_seeds) in order
            .chunks(config.batch_size)
            .zip(seeds.chunks(config.batch_size))
        {
            let batch = chunk
                .par_iter()
                .zip(chunk_seeds)
                .map(|(&i, &s)| {
                    let pool = if donors.is_empty() {
                        DonorPool::Templates(&pools[i])
                    } else {
                        DonorPool::External(donors)
                    };
                    make_example(&retriever, templates, i, pool, s, config)
                })
                .collect::<Result<Vec<_>>>()?;
            let step = loss_gradient(&params, &batch, &config.loss)?;
            adam.step(&mut flat, &step.gradient.to_flat());
            params.set_flat(&flat)?;
            sums.0 += step.loss.focal;
            sums.1 += step.loss.balance;
            sums.2 += step.loss.total;
            batches += 1;
        }
        let b = batches as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            focal: sums.0 / b,
            balance: sums.1 / b,
            total: sums.2 / b,
        };
        debug!("epoch {} loss {:.6}", stats.epoch, stats.total);
        history.push(stats);
    }
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!(
            "trained {} epochs: loss {:.5} -> {:.5}",
            history.len(),
            first.total,
            last.total
        );
    }
    Ok(TrainingRun { params, history })
}
