//! Numeric kernels shared by retrieval, filtering and training.
//!
//! Everything here accumulates in `f64`. Grids are stored row-major as
//! `(y, x, channel)`.

use std::cmp::Ordering;

use crate::error::{ensure, RaidError, Result};

/// A dense `height x width x channels` grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height * width * channels == data.len(), || {
            RaidError::DimensionMismatch(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ))
        })?;
        ensure(data.iter().all(|v| v.is_finite()), || {
            RaidError::NonFinite("feature grid".into())
        })?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial cells.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel vector at `(y, x)`.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_spatial(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Concatenates grids along the channel axis, in argument order.
    pub fn concat_channels(parts: &[&FeatureGrid]) -> Result<FeatureGrid> {
        let first = parts
            .first()
            .ok_or_else(|| RaidError::Empty("no grids to concatenate".into()))?;
        for p in parts {
            ensure(p.same_spatial(first), || {
                RaidError::DimensionMismatch(format!(
                    "cannot concatenate {}x{} with {}x{}",
                    first.height, first.width, p.height, p.width
                ))
            })?;
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.cells() * channels);
        for cell in 0..first.cells() {
            for p in parts {
                data.extend_from_slice(&p.data[cell * p.channels..(cell + 1) * p.channels]);
            }
        }
        Ok(FeatureGrid {
            height: first.height,
            width: first.width,
            channels,
            data,
        })
    }

    /// Global average pooling: the per-channel mean over all cells.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels.max(1)) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        let n = self.cells().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

pub fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a| |b|)`, clamped to `[-1, 1]`.
///
/// Zero-norm inputs are rejected instead of silently scoring 0.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    ensure(a.len() == b.len(), || {
        RaidError::DimensionMismatch(format!("vectors of length {} and {}", a.len(), b.len()))
    })?;
    let (na, nb) = (norm(a), norm(b));
    ensure(na > 0.0 && nb > 0.0, || {
        RaidError::DegenerateVector("zero-norm input to cosine similarity".into())
    })?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    ensure(!logits.is_empty(), || {
        RaidError::Empty("softmax of empty vector".into())
    })?;
    ensure(logits.iter().all(|v| v.is_finite()), || {
        RaidError::NonFinite("softmax logits".into())
    })?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Softmax backward: given `p = softmax(l)` and `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(probs: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure(k <= values.len(), || {
        RaidError::InvalidArgument(format!("top-{k} of {} values", values.len()))
    })?;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Convolution weights laid out as `[ky][kx][c_in][c_out]` plus one bias per
/// output channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvKernel<'a> {
    pub size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl ConvKernel<'_> {
    fn validate(&self, input: &FeatureGrid) -> Result<()> {
        ensure(self.size % 2 == 1, || {
            RaidError::InvalidArgument(format!("kernel size {} must be odd", self.size))
        })?;
        ensure(input.channels == self.c_in, || {
            RaidError::DimensionMismatch(format!(
                "conv expects {} input channels, grid has {}",
                self.c_in, input.channels
            ))
        })?;
        ensure(
            self.weights.len() == self.size * self.size * self.c_in * self.c_out
                && self.bias.len() == self.c_out,
            || RaidError::DimensionMismatch("conv weight/bias length".into()),
        )
    }

    fn taps(&self, h: usize, w: usize, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> {
        let r = (self.size / 2) as isize;
        let size = self.size;
        (0..size * size).filter_map(move |t| {
            let yy = y as isize + (t / size) as isize - r;
            let xx = x as isize + (t % size) as isize - r;
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                .then(|| (t, yy as usize * w + xx as usize))
        })
    }
}

/// Same-size 2-D convolution, stride 1, zero padding `(k - 1) / 2`.
pub fn conv2d(input: &FeatureGrid, kernel: ConvKernel<'_>) -> Result<FeatureGrid> {
    kernel.validate(input)?;
    let (h, w) = (input.height, input.width);
    let (cin, cout) = (kernel.c_in, kernel.c_out);
    let mut out = Vec::with_capacity(h * w * cout);
    for y in 0..h {
        for x in 0..w {
            let mut acc = kernel.bias.to_vec();
            for (tap, src) in kernel.taps(h, w, y, x) {
                let pixel = &input.data[src * cin..(src + 1) * cin];
                let block = &kernel.weights[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &v) in pixel.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let row = &block[ci * cout..(ci + 1) * cout];
                    for (a, &wt) in acc.iter_mut().zip(row) {
                        *a += v * wt;
                    }
                }
            }
            out.extend(acc);
        }
    }
    Ok(FeatureGrid {
        height: h,
        width: w,
        channels: cout,
        data: out,
    })
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGradients {
    pub input: FeatureGrid,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv2d`] for upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &FeatureGrid,
    kernel: ConvKernel<'_>,
    grad_out: &FeatureGrid,
) -> Result<ConvGradients> {
    kernel.validate(input)?;
    ensure(
        grad_out.same_spatial(input) && grad_out.channels == kernel.c_out,
        || RaidError::DimensionMismatch("conv upstream gradient shape".into()),
    )?;
    let (h, w) = (input.height, input.width);
    let (cin, cout) = (kernel.c_in, kernel.c_out);
    let mut g_in = FeatureGrid::zeros(h, w, cin);
    let mut g_w = vec![0.0; kernel.weights.len()];
    let mut g_b = vec![0.0; cout];
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.cell(y, x);
            for (b, gv) in g_b.iter_mut().zip(g) {
                *b += gv;
            }
            for (tap, src) in kernel.taps(h, w, y, x) {
                let pixel = &input.data[src * cin..(src + 1) * cin];
                let base = tap * cin * cout;
                for (ci, &p) in pixel.iter().enumerate() {
                    let row = base + ci * cout;
                    let mut acc = 0.0;
                    for co in 0..cout {
                        g_w[row + co] += p * g[co];
                        acc += kernel.weights[row + co] * g[co];
                    }
                    g_in.data[src * cin + ci] += acc;
                }
            }
        }
    }
    Ok(ConvGradients {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

/// `(n x m) * (m x p)` for row-major slices.
pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), m * p);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let v = a[i * m + k];
            if v == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += v * bv;
            }
        }
    }
    out
}

/// `a^T * b` where `a` is `m x n` and `b` is `m x p`; result is `n x p`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for k in 0..m {
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..n {
            let v = a[k * n + i];
            if v == 0.0 {
                continue;
            }
            for (o, bv) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *o += v * bv;
            }
        }
    }
    out
}

/// `a * b^T` where `a` is `n x m` and `b` is `p x m`; result is `n x p`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..p {
            out[i * p + j] = arow
                .iter()
                .zip(&b[j * m..(j + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}
