//! Image scoring and detection metrics.
//!
//! AUROC is the exact Mann-Whitney statistic with midranks. AP and F1-max
//! sweep thresholds in descending score order, one step per distinct score.
//! AUPRO integrates the per-region overlap curve up to a false-positive-rate
//! limit, with regions taken as 8-connected components of the masks.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{ensure, RaidError, Result};
use crate::filter::AnomalyMap;
use crate::interchange::GroundTruthMask;

pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Mean of the top 1% of map values (at least one value).
pub fn image_score(map: &AnomalyMap) -> Result<f64> {
    top_fraction_mean(map.values())
}

fn top_fraction_mean(values: &[f64]) -> Result<f64> {
    ensure(!values.is_empty(), || {
        RaidError::Empty("image score of an empty map".into())
    })?;
    let n_top = values.len().div_ceil(100).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..n_top].iter().sum::<f64>() / n_top as f64)
}

/// A single-channel image at pixel resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    weights
}

/// One separable blur pass along rows (`horizontal`) or columns. The kernel
/// is truncated at the border and renormalized over the taps that remain.
fn blur_pass(src: &[f64], h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (t, &kw) in kernel.iter().enumerate() {
                let p = pos as isize + t as isize - radius;
                if p < 0 || p >= len as isize {
                    continue;
                }
                let p = p as usize;
                let v = if horizontal {
                    src[y * w + p]
                } else {
                    src[p * w + x]
                };
                acc += kw * v;
                norm += kw;
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Bilinear upsampling (half-pixel centers, edge clamping) followed by an
/// optional Gaussian blur.
pub fn upsample_map(
    map: &AnomalyMap,
    height: usize,
    width: usize,
    sigma: Option<f64>,
) -> Result<PixelMap> {
    ensure(height > 0 && width > 0, || {
        RaidError::InvalidArgument("zero upsampling target".into())
    })?;
    ensure(height >= map.height() && width >= map.width(), || {
        RaidError::InvalidArgument(format!(
            "target {height}x{width} is smaller than the {}x{} map",
            map.height(),
            map.width()
        ))
    })?;
    if let Some(s) = sigma {
        ensure(s.is_finite() && s > 0.0, || {
            RaidError::InvalidArgument("sigma must be positive".into())
        })?;
    }
    let (mh, mw) = (map.height(), map.width());
    let source_coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|x| source_coord(x, width, mw)).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, ty) = source_coord(y, height, mh);
        for &(x0, x1, tx) in &cols {
            let top = map.get(y0, x0) * (1.0 - tx) + map.get(y0, x1) * tx;
            let bottom = map.get(y1, x0) * (1.0 - tx) + map.get(y1, x1) * tx;
            values.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    if let Some(s) = sigma {
        let kernel = gaussian_kernel(s);
        let pass = blur_pass(&values, height, width, &kernel, true);
        values = blur_pass(&pass, height, width, &kernel, false);
    }
    Ok(PixelMap {
        height,
        width,
        values,
    })
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    ensure(scores.len() == labels.len(), || {
        RaidError::DimensionMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ))
    })?;
    ensure(scores.iter().all(|s| s.is_finite()), || {
        RaidError::NonFinite("metric scores".into())
    })?;
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn descending_groups(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (order, groups)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    ensure(pos > 0 && neg > 0, || {
        RaidError::UndefinedMetric("AUROC needs both positive and negative samples".into())
    })?;
    // Ranks ascending from 1; doubled so midranks stay integral.
    let (order, groups) = descending_groups(scores);
    let n = scores.len() as u128;
    let mut doubled_rank_sum: u128 = 0;
    for &(start, end) in &groups {
        // Descending positions start..end map to ascending ranks n-end+1 ..= n-start.
        let doubled_mid = (n - end as u128 + 1) + (n - start as u128);
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += doubled_mid * positives;
    }
    let p = pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * neg as u128) as f64)
}

/// `(recall, precision)` after each distinct-score threshold, descending.
fn pr_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check_binary(scores, labels)?;
    ensure(pos > 0, || {
        RaidError::UndefinedMetric("precision/recall need at least one positive".into())
    })?;
    let (order, groups) = descending_groups(scores);
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(groups.len());
    for (start, end) in groups {
        tp += order[start..end].iter().filter(|&&i| labels[i]).count();
        points.push((tp as f64 / pos as f64, tp as f64 / end as f64));
    }
    Ok(points)
}

/// Average precision: precision weighted by the recall gained at each
/// threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (recall, precision) in pr_points(scores, labels)? {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over all distinct-score thresholds.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pr_points(scores, labels)?
        .into_iter()
        .map(|(r, p)| {
            if r + p > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

/// 8-connected components of the nonzero pixels; returns per-pixel labels
/// (0 = background, regions numbered from 1) and the region count.
pub fn connected_components(height: usize, width: usize, mask: &[u8]) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] != 0 && labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Area under the per-region-overlap curve for FPR in `[0, fpr_limit]`,
/// divided by `fpr_limit`.
pub fn aupro(maps: &[PixelMap], masks: &[GroundTruthMask], fpr_limit: f64) -> Result<f64> {
    ensure(maps.len() == masks.len(), || {
        RaidError::DimensionMismatch(format!("{} maps but {} masks", maps.len(), masks.len()))
    })?;
    ensure(fpr_limit > 0.0 && fpr_limit <= 1.0, || {
        RaidError::InvalidArgument("fpr_limit must be in (0, 1]".into())
    })?;
    let mut scores = Vec::new();
    // Global region id per pixel, usize::MAX for normal pixels.
    let mut region_of = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        ensure(map.height == mask.height && map.width == mask.width, || {
            RaidError::DimensionMismatch(format!(
                "map {}x{} vs mask {} {}x{}",
                map.height, map.width, mask.image_id, mask.height, mask.width
            ))
        })?;
        ensure(map.values.iter().all(|v| v.is_finite()), || {
            RaidError::NonFinite("pixel map".into())
        })?;
        let (labels, count) = connected_components(mask.height, mask.width, &mask.mask);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&l, &v) in labels.iter().zip(&map.values) {
            scores.push(v);
            if l == 0 {
                region_of.push(usize::MAX);
            } else {
                let r = offset + l as usize - 1;
                region_sizes[r] += 1;
                region_of.push(r);
            }
        }
    }
    let regions = region_sizes.len();
    ensure(regions > 0, || {
        RaidError::UndefinedMetric("AUPRO needs at least one anomalous region".into())
    })?;
    let negatives = region_of.iter().filter(|&&r| r == usize::MAX).count();
    ensure(negatives > 0, || {
        RaidError::UndefinedMetric("AUPRO needs normal pixels".into())
    })?;

    let (order, groups) = descending_groups(&scores);
    let mut fp = 0usize;
    let mut overlap_sum = 0.0;
    let (mut prev_fpr, mut prev_pro) = (0.0, 0.0);
    let mut area = 0.0;
    for (start, end) in groups {
        for &i in &order[start..end] {
            match region_of[i] {
                usize::MAX => fp += 1,
                r => overlap_sum += 1.0 / region_sizes[r] as f64,
            }
        }
        let fpr = fp as f64 / negatives as f64;
        let pro = overlap_sum / regions as f64;
        if fpr >= fpr_limit {
            let t = if fpr > prev_fpr {
                (fpr_limit - prev_fpr) / (fpr - prev_fpr)
            } else {
                0.0
            };
            let pro_at_limit = prev_pro + t * (pro - prev_pro);
            area += (fpr_limit - prev_fpr) * (prev_pro + pro_at_limit) / 2.0;
            return Ok((area / fpr_limit).clamp(0.0, 1.0));
        }
        area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    // The sweep always ends at FPR 1, so the limit is reached above.
    Ok((area / fpr_limit).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Gaussian blur after upsampling; `None` disables it.
    pub sigma: Option<f64>,
    pub fpr_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma: Some(DEFAULT_SIGMA),
            fpr_limit: DEFAULT_FPR_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub score: f64,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1max: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub pixel_f1max: f64,
    pub aupro: f64,
    pub images: Vec<ImageResult>,
}

impl EvalReport {
    /// Metric name/value pairs in a fixed order.
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1max", self.image_f1max),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_ap", self.pixel_ap),
            ("pixel_f1max", self.pixel_f1max),
            ("aupro", self.aupro),
        ]
    }
}

/// Scores every map, upsamples it to its mask's resolution, and computes all
/// metrics. Image labels come from the masks (any anomalous pixel).
pub fn evaluate_run(
    maps: &[AnomalyMap],
    masks: &[GroundTruthMask],
    config: &EvalConfig,
) -> Result<EvalReport> {
    ensure(maps.len() == masks.len(), || {
        RaidError::DimensionMismatch(format!("{} maps but {} masks", maps.len(), masks.len()))
    })?;
    ensure(!maps.is_empty(), || {
        RaidError::Empty("nothing to evaluate".into())
    })?;
    let pixel_maps = maps
        .par_iter()
        .zip(masks)
        .map(|(m, mask)| upsample_map(m, mask.height, mask.width, config.sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(maps.len());
    for (m, mask) in maps.iter().zip(masks) {
        images.push(ImageResult {
            image_id: mask.image_id.clone(),
            score: image_score(m)?,
            anomalous: mask.is_anomalous(),
        });
    }
    let img_scores: Vec<f64> = images.iter().map(|r| r.score).collect();
    let img_labels: Vec<bool> = images.iter().map(|r| r.anomalous).collect();
    let px_scores: Vec<f64> = pixel_maps
        .iter()
        .flat_map(|p| p.values.iter().copied())
        .collect();
    let px_labels: Vec<bool> = masks
        .iter()
        .flat_map(|m| m.mask.iter().map(|&v| v != 0))
        .collect();
    Ok(EvalReport {
        image_auroc: auroc(&img_scores, &img_labels)?,
        image_ap: average_precision(&img_scores, &img_labels)?,
        image_f1max: f1_max(&img_scores, &img_labels)?,
        pixel_auroc: auroc(&px_scores, &px_labels)?,
        pixel_ap: average_precision(&px_scores, &px_labels)?,
        pixel_f1max: f1_max(&px_scores, &px_labels)?,
        aupro: aupro(&pixel_maps, masks, config.fpr_limit)?,
        images,
    })
}
