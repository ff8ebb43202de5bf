//! Guided mixture-of-experts filter.
//!
//! Stage 1 fuses the query grid `g_q` and the retained-prototype grid `g_s`
//! (both `H' x W' x D`) through sparsely gated residual experts into a
//! `3D`-channel guidance grid. Stage 2 denoises the `K`-channel cost volume
//! with densely gated experts, each combining a cross-attention branch
//! (guidance as query, cost as key/value) with a confidence branch, and
//! reduces to one channel. Routers are per image: 1x1 conv, global average
//! pool, softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, RaidError, Result};
use crate::interchange::TokenEmbeddingSet;
use crate::numerics::{
    conv2d, matmul, matmul_nt, sigmoid, softmax, top_k_indices, ConvKernel, FeatureGrid,
};
use crate::retrieval::CostVolume;

pub const DEFAULT_EXPERTS: usize = 3;
pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Token dimension `D`.
    pub dim: usize,
    /// Cost-volume depth `K`.
    pub cost_channels: usize,
    /// Stage-1 experts `M1`.
    pub guidance_experts: usize,
    /// Stage-2 experts `M2`.
    pub filter_experts: usize,
    /// Active stage-1 experts per image.
    pub top_k: usize,
    /// Weight of the confidence modulation.
    pub beta: f64,
}

impl FilterConfig {
    pub fn new(dim: usize, cost_channels: usize) -> Self {
        Self {
            dim,
            cost_channels,
            guidance_experts: DEFAULT_EXPERTS,
            filter_experts: DEFAULT_EXPERTS,
            top_k: DEFAULT_TOP_K,
            beta: DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.dim >= 1 && self.cost_channels >= 1, || {
            RaidError::InvalidArgument("filter needs D >= 1 and K >= 1".into())
        })?;
        ensure(
            self.guidance_experts >= 1 && self.filter_experts >= 1,
            || RaidError::InvalidArgument("filter needs at least one expert per stage".into()),
        )?;
        ensure(
            self.top_k >= 1 && self.top_k <= self.guidance_experts,
            || {
                RaidError::InvalidArgument(format!(
                    "top-k {} must be in 1..={}",
                    self.top_k, self.guidance_experts
                ))
            },
        )?;
        ensure(self.beta.is_finite() && self.beta >= 0.0, || {
            RaidError::InvalidArgument("beta must be finite and non-negative".into())
        })
    }

    pub fn ensure_compatible(&self, dim: usize, cost_channels: usize) -> Result<()> {
        ensure(
            self.dim == dim && self.cost_channels == cost_channels,
            || {
                RaidError::IncompatibleConfiguration(format!(
                "filter was built for D={}, K={} but the pipeline uses D={dim}, K={cost_channels}",
                self.dim, self.cost_channels
            ))
            },
        )
    }
}

/// A same-size convolution layer, weights `[ky][kx][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(size: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            size,
            c_in,
            c_out,
            weight: vec![0.0; size * size * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    pub fn kernel(&self) -> ConvKernel<'_> {
        ConvKernel {
            size: self.size,
            c_in: self.c_in,
            c_out: self.c_out,
            weights: &self.weight,
            bias: &self.bias,
        }
    }

    pub fn forward(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        conv2d(input, self.kernel())
    }

    fn fan_in(&self) -> usize {
        self.size * self.size * self.c_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceExpert {
    /// 3x3, `2D -> D`.
    pub conv: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseExpert {
    /// 3x3, `3D -> K`, applied to the fused guidance.
    pub query_conv: ConvLayer,
    /// `K x K` projections, row-major.
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    /// 3x3, `K -> K`.
    pub confidence_conv: ConvLayer,
    /// 1x1, `K -> K`.
    pub confidence_proj: ConvLayer,
    /// 1x1, `K -> 1`.
    pub output_conv: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterParameters {
    config: FilterConfig,
    /// 1x1, `2D -> M1`.
    pub router1: ConvLayer,
    pub guidance: Vec<GuidanceExpert>,
    /// 1x1, `3D + K -> M2`.
    pub router2: ConvLayer,
    pub experts: Vec<DenoiseExpert>,
}

impl FilterParameters {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: FilterConfig) -> Self {
        let (d, k) = (config.dim, config.cost_channels);
        Self {
            config,
            router1: ConvLayer::zeros(1, 2 * d, config.guidance_experts),
            guidance: (0..config.guidance_experts)
                .map(|_| GuidanceExpert {
                    conv: ConvLayer::zeros(3, 2 * d, d),
                })
                .collect(),
            router2: ConvLayer::zeros(1, 3 * d + k, config.filter_experts),
            experts: (0..config.filter_experts)
                .map(|_| DenoiseExpert {
                    query_conv: ConvLayer::zeros(3, 3 * d, k),
                    w_q: vec![0.0; k * k],
                    w_k: vec![0.0; k * k],
                    w_v: vec![0.0; k * k],
                    confidence_conv: ConvLayer::zeros(3, k, k),
                    confidence_proj: ConvLayer::zeros(1, k, k),
                    output_conv: ConvLayer::zeros(1, k, 1),
                })
                .collect(),
        }
    }

    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases
    /// zero. Values are `f32`-representable so a fresh filter survives a
    /// save/load round trip unchanged.
    pub fn init(config: FilterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.cost_channels;
        let mut fill = |t: &mut Vec<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.iter_mut() {
                *v = f64::from(rng.random_range(-bound..bound) as f32);
            }
        };
        let fan = params.router1.fan_in();
        fill(&mut params.router1.weight, fan);
        for g in &mut params.guidance {
            let fan = g.conv.fan_in();
            fill(&mut g.conv.weight, fan);
        }
        let fan = params.router2.fan_in();
        fill(&mut params.router2.weight, fan);
        for e in &mut params.experts {
            let fan = e.query_conv.fan_in();
            fill(&mut e.query_conv.weight, fan);
            fill(&mut e.w_q, k);
            fill(&mut e.w_k, k);
            fill(&mut e.w_v, k);
            let fan = e.confidence_conv.fan_in();
            fill(&mut e.confidence_conv.weight, fan);
            let fan = e.confidence_proj.fan_in();
            fill(&mut e.confidence_proj.weight, fan);
            let fan = e.output_conv.fan_in();
            fill(&mut e.output_conv.weight, fan);
        }
        Ok(params)
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Every tensor with its name, in the fixed serialization order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("router1.weight".into(), &self.router1.weight),
            ("router1.bias".into(), &self.router1.bias),
        ];
        for (i, g) in self.guidance.iter().enumerate() {
            out.push((format!("guidance[{i}].conv.weight"), &g.conv.weight));
            out.push((format!("guidance[{i}].conv.bias"), &g.conv.bias));
        }
        out.push(("router2.weight".into(), &self.router2.weight));
        out.push(("router2.bias".into(), &self.router2.bias));
        for (i, e) in self.experts.iter().enumerate() {
            out.push((
                format!("experts[{i}].query_conv.weight"),
                &e.query_conv.weight,
            ));
            out.push((format!("experts[{i}].query_conv.bias"), &e.query_conv.bias));
            out.push((format!("experts[{i}].w_q"), &e.w_q));
            out.push((format!("experts[{i}].w_k"), &e.w_k));
            out.push((format!("experts[{i}].w_v"), &e.w_v));
            out.push((
                format!("experts[{i}].confidence_conv.weight"),
                &e.confidence_conv.weight,
            ));
            out.push((
                format!("experts[{i}].confidence_conv.bias"),
                &e.confidence_conv.bias,
            ));
            out.push((
                format!("experts[{i}].confidence_proj.weight"),
                &e.confidence_proj.weight,
            ));
            out.push((
                format!("experts[{i}].confidence_proj.bias"),
                &e.confidence_proj.bias,
            ));
            out.push((
                format!("experts[{i}].output_conv.weight"),
                &e.output_conv.weight,
            ));
            out.push((
                format!("experts[{i}].output_conv.bias"),
                &e.output_conv.bias,
            ));
        }
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("router1.weight".into(), &mut self.router1.weight),
            ("router1.bias".into(), &mut self.router1.bias),
        ];
        for (i, g) in self.guidance.iter_mut().enumerate() {
            out.push((format!("guidance[{i}].conv.weight"), &mut g.conv.weight));
            out.push((format!("guidance[{i}].conv.bias"), &mut g.conv.bias));
        }
        out.push(("router2.weight".into(), &mut self.router2.weight));
        out.push(("router2.bias".into(), &mut self.router2.bias));
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.push((
                format!("experts[{i}].query_conv.weight"),
                &mut e.query_conv.weight,
            ));
            out.push((
                format!("experts[{i}].query_conv.bias"),
                &mut e.query_conv.bias,
            ));
            out.push((format!("experts[{i}].w_q"), &mut e.w_q));
            out.push((format!("experts[{i}].w_k"), &mut e.w_k));
            out.push((format!("experts[{i}].w_v"), &mut e.w_v));
            out.push((
                format!("experts[{i}].confidence_conv.weight"),
                &mut e.confidence_conv.weight,
            ));
            out.push((
                format!("experts[{i}].confidence_conv.bias"),
                &mut e.confidence_conv.bias,
            ));
            out.push((
                format!("experts[{i}].confidence_proj.weight"),
                &mut e.confidence_proj.weight,
            ));
            out.push((
                format!("experts[{i}].confidence_proj.bias"),
                &mut e.confidence_proj.bias,
            ));
            out.push((
                format!("experts[{i}].output_conv.weight"),
                &mut e.output_conv.weight,
            ));
            out.push((
                format!("experts[{i}].output_conv.bias"),
                &mut e.output_conv.bias,
            ));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        ensure(values.len() == self.num_parameters(), || {
            RaidError::DimensionMismatch("flat parameter vector length".into())
        })?;
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Single-channel anomaly map at token resolution, plus the source image size
/// used for upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    source_height: usize,
    source_width: usize,
}

impl AnomalyMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        source_height: usize,
        source_width: usize,
    ) -> Result<Self> {
        ensure(values.len() == height * width, || {
            RaidError::DimensionMismatch(format!(
                "map {height}x{width} with {} values",
                values.len()
            ))
        })?;
        ensure(
            values
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            || {
                RaidError::InvalidArgument(
                    "anomaly map values must be finite and within [0, 1]".into(),
                )
            },
        )?;
        Ok(Self {
            height,
            width,
            values,
            source_height,
            source_width,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_height(&self) -> usize {
        self.source_height
    }

    pub fn source_width(&self) -> usize {
        self.source_width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Query patch tokens as a `H' x W' x D` grid.
pub fn query_grid(query: &TokenEmbeddingSet) -> FeatureGrid {
    let data = query.patch_tokens().iter().map(|&v| f64::from(v)).collect();
    FeatureGrid::new(query.grid_height(), query.grid_width(), query.dim(), data)
        .expect("embedding sets are validated on construction")
}

/// Keeps the top-`k` probabilities as-is and zeroes the rest. No
/// renormalization; ties go to the lower index.
pub fn sparse_gate(probabilities: &[f64], k: usize) -> Result<Vec<f64>> {
    let keep = top_k_indices(probabilities, k)?;
    let mut gated = vec![0.0; probabilities.len()];
    for i in keep {
        gated[i] = probabilities[i];
    }
    Ok(gated)
}

/// Per-image router: 1x1 conv, global average pool, softmax.
pub fn route(router: &ConvLayer, input: &FeatureGrid) -> Result<Vec<f64>> {
    softmax(&router.forward(input)?.channel_means())
}

#[derive(Debug, Clone)]
pub struct GuidanceOutput {
    /// `H' x W' x 3D`.
    pub fused: FeatureGrid,
    /// Stage-1 router probabilities.
    pub probabilities: Vec<f64>,
    /// Probabilities after sparse gating.
    pub gates: Vec<f64>,
    /// `cat(g_q, g_s)`.
    pub(crate) input: FeatureGrid,
    /// Output of every active expert (`cat(conv(x), x)`); `None` if inactive.
    pub(crate) expert_outputs: Vec<Option<FeatureGrid>>,
}

/// Stage 1: sparse-routed residual experts over `cat(g_q, g_s)`.
pub fn fuse_guidance(
    query_grid: &FeatureGrid,
    prototype_grid: &FeatureGrid,
    params: &FilterParameters,
) -> Result<GuidanceOutput> {
    let d = params.config.dim;
    ensure(
        query_grid.same_spatial(prototype_grid)
            && query_grid.channels() == d
            && prototype_grid.channels() == d,
        || {
            RaidError::DimensionMismatch(format!(
                "guidance grids must both be H'xW'x{d}; got {}x{}x{} and {}x{}x{}",
                query_grid.height(),
                query_grid.width(),
                query_grid.channels(),
                prototype_grid.height(),
                prototype_grid.width(),
                prototype_grid.channels()
            ))
        },
    )?;
    let input = FeatureGrid::concat_channels(&[query_grid, prototype_grid])?;
    let probabilities = route(&params.router1, &input)?;
    let gates = sparse_gate(&probabilities, params.config.top_k)?;

    let mut fused = FeatureGrid::zeros(input.height(), input.width(), 3 * d);
    let mut expert_outputs = Vec::with_capacity(gates.len());
    for (expert, &gate) in params.guidance.iter().zip(&gates) {
        if gate == 0.0 {
            expert_outputs.push(None);
            continue;
        }
        let residual = expert.conv.forward(&input)?;
        let out = FeatureGrid::concat_channels(&[&residual, &input])?;
        for (f, v) in fused.data_mut().iter_mut().zip(out.data()) {
            *f += gate * v;
        }
        expert_outputs.push(Some(out));
    }
    Ok(GuidanceOutput {
        fused,
        probabilities,
        gates,
        input,
        expert_outputs,
    })
}

/// One denoising expert's output and the intermediates needed to
/// differentiate it.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    /// `H'W'` values in `(0, 1)`.
    pub refined: Vec<f64>,
    /// `(H'W') x (H'W')` attention, each row a distribution.
    pub attention: Vec<f64>,
    /// Confidence map `R`, `H' x W' x K`.
    pub confidence: FeatureGrid,
    pub(crate) query_features: FeatureGrid,
    pub(crate) queries: Vec<f64>,
    pub(crate) keys: Vec<f64>,
    pub(crate) values: Vec<f64>,
    pub(crate) confidence_hidden: FeatureGrid,
    pub(crate) mixed: FeatureGrid,
}

/// Stage-2 expert: cross-attention plus confidence modulation, reduced to one
/// channel through a sigmoid.
pub fn denoise_expert(
    fused: &FeatureGrid,
    cost: &CostVolume,
    expert: &DenoiseExpert,
    beta: f64,
) -> Result<ExpertOutput> {
    let c = cost.as_grid();
    let k = c.channels();
    ensure(fused.same_spatial(c), || {
        RaidError::DimensionMismatch("guidance and cost volume differ spatially".into())
    })?;
    ensure(
        expert.w_q.len() == k * k && expert.output_conv.c_in == k,
        || {
            RaidError::DimensionMismatch(format!(
                "expert expects K={}, cost volume has K={k}",
                expert.output_conv.c_in
            ))
        },
    )?;
    let n = c.cells();
    let (h, w) = (c.height(), c.width());

    let query_features = expert.query_conv.forward(fused)?;
    let queries = matmul(query_features.data(), &expert.w_q, n, k, k);
    let keys = matmul(c.data(), &expert.w_k, n, k, k);
    let values = matmul(c.data(), &expert.w_v, n, k, k);

    let scale = 1.0 / (k as f64).sqrt();
    let mut attention = matmul_nt(&queries, &keys, n, k, n);
    for row in attention.chunks_exact_mut(n) {
        row.iter_mut().for_each(|s| *s *= scale);
        let p = softmax(row)?;
        row.copy_from_slice(&p);
    }

    let confidence_hidden = expert.confidence_conv.forward(c)?;
    let mut confidence = expert.confidence_proj.forward(&confidence_hidden)?;
    confidence
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = sigmoid(*v));

    let attended = matmul(&attention, &values, n, n, k);
    let modulated = matmul(&attention, confidence.data(), n, n, k);
    let mixed_data: Vec<f64> = attended
        .iter()
        .zip(&modulated)
        .map(|(a, r)| a + beta * r)
        .collect();
    let mixed = FeatureGrid::new(h, w, k, mixed_data)?;
    let logits = expert.output_conv.forward(&mixed)?;
    let refined = logits.data().iter().map(|&v| sigmoid(v)).collect();

    Ok(ExpertOutput {
        refined,
        attention,
        confidence,
        query_features,
        queries,
        keys,
        values,
        confidence_hidden,
        mixed,
    })
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub height: usize,
    pub width: usize,
    /// `H'W'` anomaly values, row-major.
    pub map: Vec<f64>,
    pub guidance: GuidanceOutput,
    /// Dense stage-2 gate weights.
    pub stage2_weights: Vec<f64>,
    pub experts: Vec<ExpertOutput>,
    pub(crate) router2_input: FeatureGrid,
}

impl FilterOutput {
    pub fn into_anomaly_map(self, source_height: usize, source_width: usize) -> Result<AnomalyMap> {
        AnomalyMap::new(
            self.height,
            self.width,
            self.map,
            source_height,
            source_width,
        )
    }
}

/// Full two-stage forward pass.
pub fn filter_forward(
    query_grid: &FeatureGrid,
    prototype_grid: &FeatureGrid,
    cost: &CostVolume,
    params: &FilterParameters,
) -> Result<FilterOutput> {
    let cfg = params.config;
    ensure(cost.depth() == cfg.cost_channels, || {
        RaidError::IncompatibleConfiguration(format!(
            "filter expects K={}, cost volume has K={}",
            cfg.cost_channels,
            cost.depth()
        ))
    })?;
    ensure(query_grid.same_spatial(cost.as_grid()), || {
        RaidError::DimensionMismatch("query grid and cost volume differ spatially".into())
    })?;
    let guidance = fuse_guidance(query_grid, prototype_grid, params)?;
    let router2_input = FeatureGrid::concat_channels(&[&guidance.fused, cost.as_grid()])?;
    let stage2_weights = route(&params.router2, &router2_input)?;
    let experts = params
        .experts
        .iter()
        .map(|e| denoise_expert(&guidance.fused, cost, e, cfg.beta))
        .collect::<Result<Vec<_>>>()?;
    let mut map = vec![0.0; query_grid.cells()];
    for (weight, out) in stage2_weights.iter().zip(&experts) {
        for (m, r) in map.iter_mut().zip(&out.refined) {
            *m += weight * r;
        }
    }
    Ok(FilterOutput {
        height: query_grid.height(),
        width: query_grid.width(),
        map,
        guidance,
        stage2_weights,
        experts,
        router2_input,
    })
}
