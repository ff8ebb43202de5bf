//! Slow reference implementations written independently of the library,
//! using nested vectors and explicit loops.

#![allow(clippy::needless_range_loop)]

use raid_core::filter::{DenoiseExpert, FilterParameters};
use raid_core::interchange::GroundTruthMask;
use raid_core::numerics::FeatureGrid;

/// `[y][x][c]`.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn to_nested(g: &FeatureGrid) -> Grid {
    (0..g.height())
        .map(|y| (0..g.width()).map(|x| g.cell(y, x).to_vec()).collect())
        .collect()
}

pub fn flatten(g: &Grid) -> Vec<f64> {
    g.iter()
        .flat_map(|row| row.iter().flat_map(|c| c.iter().copied()))
        .collect()
}

/// Zero-padded same-size convolution with weights `[ky][kx][ci][co]`.
pub fn conv(
    input: &Grid,
    size: usize,
    c_in: usize,
    c_out: usize,
    weights: &[f64],
    bias: &[f64],
) -> Grid {
    let h = input.len();
    let w = input[0].len();
    let r = (size / 2) as i64;
    let mut out = vec![vec![vec![0.0; c_out]; w]; h];
    for y in 0..h {
        for x in 0..w {
            for co in 0..c_out {
                let mut acc = bias[co];
                for ky in 0..size {
                    for kx in 0..size {
                        let yy = y as i64 + ky as i64 - r;
                        let xx = x as i64 + kx as i64 - r;
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let wt = weights[((ky * size + kx) * c_in + ci) * c_out + co];
                            acc += wt * input[yy as usize][xx as usize][ci];
                        }
                    }
                }
                out[y][x][co] = acc;
            }
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut e = Vec::new();
    let mut s = 0.0;
    for &x in v {
        let t = (x - m).exp();
        e.push(t);
        s += t;
    }
    e.into_iter().map(|t| t / s).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn concat(parts: &[&Grid]) -> Grid {
    let h = parts[0].len();
    let w = parts[0][0].len();
    let mut out = vec![vec![Vec::new(); w]; h];
    for p in parts {
        for y in 0..h {
            for x in 0..w {
                out[y][x].extend_from_slice(&p[y][x]);
            }
        }
    }
    out
}

fn spatial_mean(g: &Grid) -> Vec<f64> {
    let c = g[0][0].len();
    let mut m = vec![0.0; c];
    let mut n = 0.0;
    for row in g {
        for cell in row {
            for i in 0..c {
                m[i] += cell[i];
            }
            n += 1.0;
        }
    }
    m.into_iter().map(|v| v / n).collect()
}

/// `rows x k` times `k x k`.
fn project(rows: &[Vec<f64>], w: &[f64], k: usize) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            (0..k)
                .map(|j| (0..k).map(|i| r[i] * w[i * k + j]).sum())
                .collect()
        })
        .collect()
}

fn cells(g: &Grid) -> Vec<Vec<f64>> {
    g.iter().flat_map(|row| row.iter().cloned()).collect()
}

/// Row-stochastic cross-attention matrix `softmax(Q K^T / sqrt(k))`.
pub fn attention(queries: &[Vec<f64>], keys: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| {
            let scores: Vec<f64> = keys
                .iter()
                .map(|key| q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (k as f64).sqrt())
                .collect();
            softmax(&scores)
        })
        .collect()
}

/// One stage-2 expert, returning the per-cell output in row-major order.
pub fn denoise_expert(fused: &Grid, cost: &Grid, e: &DenoiseExpert, beta: f64) -> Vec<f64> {
    let k = cost[0][0].len();
    let qf = conv(
        fused,
        3,
        fused[0][0].len(),
        k,
        &e.query_conv.weight,
        &e.query_conv.bias,
    );
    let q = project(&cells(&qf), &e.w_q, k);
    let c = cells(cost);
    let keys = project(&c, &e.w_k, k);
    let vals = project(&c, &e.w_v, k);
    let a = attention(&q, &keys, k);
    let hidden = conv(
        cost,
        3,
        k,
        k,
        &e.confidence_conv.weight,
        &e.confidence_conv.bias,
    );
    let rel = conv(
        &hidden,
        1,
        k,
        k,
        &e.confidence_proj.weight,
        &e.confidence_proj.bias,
    );
    let rel: Vec<Vec<f64>> = cells(&rel)
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect();
    let n = c.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut logit = e.output_conv.bias[0];
        for ch in 0..k {
            let mut z = 0.0;
            for j in 0..n {
                z += a[i][j] * (vals[j][ch] + beta * rel[j][ch]);
            }
            logit += e.output_conv.weight[ch] * z;
        }
        out.push(sigmoid(logit));
    }
    out
}

/// Full two-stage filter.
pub fn filter_forward(gq: &Grid, gs: &Grid, cost: &Grid, p: &FilterParameters) -> Vec<f64> {
    let cfg = p.config();
    let d = cfg.dim;
    let input = concat(&[gq, gs]);
    let r1 = conv(
        &input,
        1,
        2 * d,
        cfg.guidance_experts,
        &p.router1.weight,
        &p.router1.bias,
    );
    let probs = softmax(&spatial_mean(&r1));
    // Sparse gate: keep the top_k largest, earlier index wins ties.
    let mut keep = vec![false; probs.len()];
    for _ in 0..cfg.top_k {
        let mut best: Option<usize> = None;
        for i in 0..probs.len() {
            if !keep[i] && best.is_none_or(|b| probs[i] > probs[b]) {
                best = Some(i);
            }
        }
        keep[best.unwrap()] = true;
    }
    let h = gq.len();
    let w = gq[0].len();
    let mut fused = vec![vec![vec![0.0; 3 * d]; w]; h];
    for (i, expert) in p.guidance.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let res = conv(&input, 3, 2 * d, d, &expert.conv.weight, &expert.conv.bias);
        let out = concat(&[&res, &input]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 * d {
                    fused[y][x][c] += probs[i] * out[y][x][c];
                }
            }
        }
    }
    let k = cfg.cost_channels;
    let r2_in = concat(&[&fused, cost]);
    let r2 = conv(
        &r2_in,
        1,
        3 * d + k,
        cfg.filter_experts,
        &p.router2.weight,
        &p.router2.bias,
    );
    let q = softmax(&spatial_mean(&r2));
    let mut map = vec![0.0; h * w];
    for (j, e) in p.experts.iter().enumerate() {
        let out = denoise_expert(&fused, cost, e, cfg.beta);
        for (m, v) in map.iter_mut().zip(out) {
            *m += q[j] * v;
        }
    }
    map
}

/// Pairwise AUROC as an exact ratio `(2 * wins + ties) / (2 * P * N)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num: u128 = 0;
    let mut pairs: u128 = 0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 2;
            } else if scores[i] == scores[j] {
                num += 1;
            }
        }
    }
    num as f64 / (2 * pairs) as f64
}

fn distinct_descending(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// `(recall, precision)` for the rule `score >= t`, each distinct `t` from
/// the top down, each counted from scratch.
fn pr_sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    distinct_descending(scores)
        .into_iter()
        .map(|t| {
            let mut tp = 0.0;
            let mut predicted = 0.0;
            for i in 0..scores.len() {
                if scores[i] >= t {
                    predicted += 1.0;
                    if labels[i] {
                        tp += 1.0;
                    }
                }
            }
            (tp / pos, tp / predicted)
        })
        .collect()
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in pr_sweep(scores, labels) {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

pub fn f1_max(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best = 0.0;
    for (r, p) in pr_sweep(scores, labels) {
        if r + p > 0.0 {
            let f = 2.0 * p * r / (p + r);
            if f > best {
                best = f;
            }
        }
    }
    best
}

/// 8-connected regions by iterative depth-first search; each region is
/// a list of pixel indices.
pub fn regions(h: usize, w: usize, mask: &[u8]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for s in 0..mask.len() {
        if mask[s] == 0 || seen[s] {
            continue;
        }
        let mut stack = vec![s];
        seen[s] = true;
        let mut region = Vec::new();
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if mask[q] != 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(region);
    }
    out
}

/// Per-region overlap curve recomputed from scratch at every distinct
/// threshold, integrated by trapezoids up to `limit` and divided by it.
pub fn aupro(maps: &[(usize, usize, Vec<f64>)], masks: &[GroundTruthMask], limit: f64) -> f64 {
    let mut all_scores = Vec::new();
    for (_, _, v) in maps {
        all_scores.extend_from_slice(v);
    }
    let per_image: Vec<Vec<Vec<usize>>> = masks
        .iter()
        .map(|m| regions(m.height, m.width, &m.mask))
        .collect();
    let n_regions: usize = per_image.iter().map(Vec::len).sum();
    let negatives: usize = masks
        .iter()
        .map(|m| m.mask.iter().filter(|&&v| v == 0).count())
        .sum();
    let mut curve = vec![(0.0, 0.0)];
    for t in distinct_descending(&all_scores) {
        let mut fp = 0usize;
        let mut pro = 0.0;
        for (i, (_, _, v)) in maps.iter().enumerate() {
            for (p, &s) in v.iter().enumerate() {
                if masks[i].mask[p] == 0 && s >= t {
                    fp += 1;
                }
            }
            for region in &per_image[i] {
                let hit = region.iter().filter(|&&p| v[p] >= t).count();
                pro += hit as f64 / region.len() as f64;
            }
        }
        curve.push((fp as f64 / negatives as f64, pro / n_regions as f64));
    }
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((f0, p0), (f1, p1)) = (win[0], win[1]);
        if f0 >= limit {
            break;
        }
        if f1 > limit {
            let p_lim = p0 + (limit - f0) / (f1 - f0) * (p1 - p0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    area / limit
}
