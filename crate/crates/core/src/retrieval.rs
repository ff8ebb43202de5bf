//! Coarse-to-fine retrieval over a [`HierarchicalDatabase`], the exhaustive
//! flat scan used as its oracle, and anomaly cost-volume construction.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use log::warn;
use rayon::prelude::*;

use crate::database::HierarchicalDatabase;
use crate::error::{ensure, RaidError, Result};
use crate::interchange::TokenEmbeddingSet;
use crate::numerics::{dot, FeatureGrid};

pub const DEFAULT_K_PRIME: usize = 5;
pub const DEFAULT_K: usize = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalParams {
    /// Semantic prototypes searched per patch.
    pub k_prime: usize,
    /// Instance tokens kept per patch.
    pub k: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k_prime: DEFAULT_K_PRIME,
            k: DEFAULT_K,
        }
    }
}

/// Address of one stored instance token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceRef {
    pub class: u32,
    pub prototype: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceMatch {
    pub instance: InstanceRef,
    pub similarity: f32,
}

/// Descending similarity, then ascending address.
fn rank(a: &InstanceMatch, b: &InstanceMatch) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.instance.cmp(&b.instance))
}

fn select_top(mut candidates: Vec<InstanceMatch>, k: usize) -> Vec<InstanceMatch> {
    if candidates.len() > k && k > 0 {
        candidates.select_nth_unstable_by(k - 1, rank);
    }
    candidates.truncate(k);
    candidates.sort_by(rank);
    candidates
}

/// Retrieval output for one query patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRetrieval {
    /// `(class, prototype)` whose bucket produced the best instance match.
    pub retained_class: usize,
    pub retained_prototype: usize,
    /// Exactly `k` matches, best first.
    pub instances: Vec<InstanceMatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Estimated class; `None` for flat retrieval, which skips the class step.
    pub class_index: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// Row-major over the query grid.
    pub patches: Vec<PatchRetrieval>,
    /// Number of similarity evaluations performed.
    pub comparisons: u64,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

impl RetrievalResult {
    pub fn patch(&self, y: usize, x: usize) -> &PatchRetrieval {
        &self.patches[y * self.width + x]
    }
}

/// Per-candidate outcome of [`Retriever::retrieve_instances`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidates {
    pub matches: Vec<InstanceMatch>,
    pub retained_prototype: usize,
    pub comparisons: u64,
}

/// Read-only search structure over a database. Caches inverse norms of every
/// stored vector; the database itself is never modified.
#[derive(Debug, Clone)]
pub struct Retriever<'a> {
    db: &'a HierarchicalDatabase,
    class_inv: Vec<f64>,
    proto_inv: Vec<Vec<f64>>,
    bucket_inv: Vec<Vec<Vec<f64>>>,
}

fn inv_norm(v: &[f32], what: &str) -> Result<f64> {
    let n = dot(v, v).sqrt();
    ensure(n > 0.0, || {
        RaidError::DegenerateVector(format!("zero-norm {what}"))
    })?;
    Ok(1.0 / n)
}

#[inline]
fn similarity(a: &[f32], inv_a: f64, b: &[f32], inv_b: f64) -> f32 {
    (dot(a, b) * inv_a * inv_b).clamp(-1.0, 1.0) as f32
}

impl<'a> Retriever<'a> {
    pub fn new(db: &'a HierarchicalDatabase) -> Result<Self> {
        let class_inv = (0..db.num_classes())
            .map(|c| inv_norm(db.class_prototype(c), "class prototype"))
            .collect::<Result<_>>()?;
        let mut proto_inv = Vec::with_capacity(db.num_classes());
        let mut bucket_inv = Vec::with_capacity(db.num_classes());
        for class in db.classes() {
            proto_inv.push(
                (0..class.num_prototypes())
                    .map(|j| inv_norm(class.semantic_prototype(j), "semantic prototype"))
                    .collect::<Result<Vec<_>>>()?,
            );
            bucket_inv.push(
                class
                    .buckets()
                    .iter()
                    .map(|b| {
                        (0..b.len())
                            .map(|i| inv_norm(b.vector(i), "instance token"))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            db,
            class_inv,
            proto_inv,
            bucket_inv,
        })
    }

    pub fn database(&self) -> &'a HierarchicalDatabase {
        self.db
    }

    /// Stored vector behind an [`InstanceRef`].
    pub fn instance_vector(&self, r: InstanceRef) -> &'a [f32] {
        self.db
            .class(r.class as usize)
            .bucket(r.prototype as usize)
            .vector(r.index as usize)
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        ensure(v.len() == self.db.dim(), || {
            RaidError::DimensionMismatch(format!(
                "query D={} vs database D={}",
                v.len(),
                self.db.dim()
            ))
        })
    }

    /// Class whose prototype is most cosine-similar to `cls_token`.
    pub fn retrieve_class(&self, cls_token: &[f32]) -> Result<usize> {
        ensure(!self.db.is_empty(), || {
            RaidError::Empty("database has no classes".into())
        })?;
        self.check_dim(cls_token)?;
        let inv = inv_norm(cls_token, "query CLS token")?;
        let mut best = (0, f32::NEG_INFINITY);
        for c in 0..self.db.num_classes() {
            let s = similarity(
                cls_token,
                inv,
                self.db.class_prototype(c),
                self.class_inv[c],
            );
            if s > best.1 {
                best = (c, s);
            }
        }
        Ok(best.0)
    }

    fn semantic_ranked(&self, patch: &[f32], inv: f64, class: usize, k_prime: usize) -> Vec<usize> {
        let entry = self.db.class(class);
        let sims: Vec<f64> = (0..entry.num_prototypes())
            .map(|j| {
                f64::from(similarity(
                    patch,
                    inv,
                    entry.semantic_prototype(j),
                    self.proto_inv[class][j],
                ))
            })
            .collect();
        crate::numerics::top_k_indices(&sims, k_prime.min(sims.len())).unwrap_or_default()
    }

    /// Top-`k_prime` semantic prototypes of class `class` for one patch token,
    /// best first. `k_prime` larger than the class's prototype count is
    /// clipped.
    pub fn retrieve_semantic(
        &self,
        patch: &[f32],
        class: usize,
        k_prime: usize,
    ) -> Result<Vec<usize>> {
        self.check_class(class)?;
        self.check_dim(patch)?;
        let j = self.db.class(class).num_prototypes();
        if k_prime > j {
            warn!("K'={k_prime} exceeds the {j} semantic prototypes of class {class}; clipping");
        }
        let inv = inv_norm(patch, "query patch token")?;
        Ok(self.semantic_ranked(patch, inv, class, k_prime))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        ensure(class < self.db.num_classes(), || {
            RaidError::InvalidArgument(format!("class {class} out of range"))
        })
    }

    fn scan_buckets(
        &self,
        patch: &[f32],
        inv: f64,
        class: usize,
        prototypes: &[usize],
        k: usize,
        excluded: Option<&[bool]>,
    ) -> Result<InstanceCandidates> {
        let entry = self.db.class(class);
        let mut candidates = Vec::new();
        let mut comparisons = 0u64;
        for &j in prototypes {
            let bucket = entry.bucket(j);
            let invs = &self.bucket_inv[class][j];
            for i in 0..bucket.len() {
                if let Some(ex) = excluded {
                    if ex[bucket.provenance()[i].image as usize] {
                        continue;
                    }
                }
                comparisons += 1;
                candidates.push(InstanceMatch {
                    instance: InstanceRef {
                        class: class as u32,
                        prototype: j as u32,
                        index: i as u32,
                    },
                    similarity: similarity(patch, inv, bucket.vector(i), invs[i]),
                });
            }
        }
        ensure(!candidates.is_empty(), || {
            RaidError::Empty("all candidate buckets are empty".into())
        })?;
        ensure(candidates.len() >= k, || {
            RaidError::InsufficientCandidates {
                needed: k,
                found: candidates.len(),
            }
        })?;
        let matches = select_top(candidates, k);
        Ok(InstanceCandidates {
            retained_prototype: matches[0].instance.prototype as usize,
            matches,
            comparisons,
        })
    }

    /// Top-`k` instance tokens from the union of the given prototype buckets.
    /// The retained prototype is the bucket holding the single best match.
    pub fn retrieve_instances(
        &self,
        patch: &[f32],
        class: usize,
        prototypes: &[usize],
        k: usize,
    ) -> Result<InstanceCandidates> {
        self.check_class(class)?;
        self.check_dim(patch)?;
        let j = self.db.class(class).num_prototypes();
        ensure(prototypes.iter().all(|&p| p < j), || {
            RaidError::InvalidArgument("prototype index out of range".into())
        })?;
        let inv = inv_norm(patch, "query patch token")?;
        self.scan_buckets(patch, inv, class, prototypes, k, None)
    }

    fn exclusion_mask(&self, exclude_image: Option<&str>) -> Option<Vec<bool>> {
        exclude_image.map(|id| self.db.image_ids().iter().map(|s| s == id).collect())
    }

    fn check_query(&self, query: &TokenEmbeddingSet, k: usize) -> Result<()> {
        ensure(!self.db.is_empty(), || {
            RaidError::Empty("database has no classes".into())
        })?;
        ensure(k >= 1, || {
            RaidError::InvalidArgument("K must be >= 1".into())
        })?;
        self.check_dim(query.cls_token())
    }

    /// Class, then semantic prototypes, then instances, for every patch.
    pub fn hierarchical_retrieve(
        &self,
        query: &TokenEmbeddingSet,
        params: RetrievalParams,
    ) -> Result<RetrievalResult> {
        self.hierarchical_retrieve_excluding(query, params, None)
    }

    /// As [`Self::hierarchical_retrieve`], skipping every stored token whose
    /// source image id equals `exclude_image`.
    pub fn hierarchical_retrieve_excluding(
        &self,
        query: &TokenEmbeddingSet,
        params: RetrievalParams,
        exclude_image: Option<&str>,
    ) -> Result<RetrievalResult> {
        let start = Instant::now();
        self.check_query(query, params.k)?;
        ensure(params.k_prime >= 1, || {
            RaidError::InvalidArgument("K' must be >= 1".into())
        })?;
        let class = self.retrieve_class(query.cls_token())?;
        let j = self.db.class(class).num_prototypes();
        let mut warnings = Vec::new();
        if params.k_prime > j {
            let msg = format!(
                "K'={} exceeds the {j} semantic prototypes of class {class}; clipped",
                params.k_prime
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        let excluded = self.exclusion_mask(exclude_image);
        let per_patch: Vec<Result<(PatchRetrieval, u64)>> = (0..query.num_patches())
            .into_par_iter()
            .map(|cell| {
                let patch = query.patch_at(cell);
                let inv = inv_norm(patch, "query patch token")?;
                let protos = self.semantic_ranked(patch, inv, class, params.k_prime);
                let found =
                    self.scan_buckets(patch, inv, class, &protos, params.k, excluded.as_deref())?;
                Ok((
                    PatchRetrieval {
                        retained_class: class,
                        retained_prototype: found.retained_prototype,
                        instances: found.matches,
                    },
                    found.comparisons + j as u64,
                ))
            })
            .collect();
        let mut patches = Vec::with_capacity(per_patch.len());
        let mut comparisons = self.db.num_classes() as u64;
        for r in per_patch {
            let (p, c) = r?;
            comparisons += c;
            patches.push(p);
        }
        Ok(RetrievalResult {
            class_index: Some(class),
            height: query.grid_height(),
            width: query.grid_width(),
            k: params.k,
            patches,
            comparisons,
            elapsed: start.elapsed(),
            warnings,
        })
    }

    /// Exhaustive scan of every stored instance token of every class.
    pub fn flat_retrieve(&self, query: &TokenEmbeddingSet, k: usize) -> Result<RetrievalResult> {
        self.flat_retrieve_excluding(query, k, None)
    }

    pub fn flat_retrieve_excluding(
        &self,
        query: &TokenEmbeddingSet,
        k: usize,
        exclude_image: Option<&str>,
    ) -> Result<RetrievalResult> {
        let start = Instant::now();
        self.check_query(query, k)?;
        let excluded = self.exclusion_mask(exclude_image);
        let per_patch: Vec<Result<(PatchRetrieval, u64)>> = (0..query.num_patches())
            .into_par_iter()
            .map(|cell| {
                let patch = query.patch_at(cell);
                let inv = inv_norm(patch, "query patch token")?;
                let mut candidates = Vec::new();
                let mut comparisons = 0;
                for c in 0..self.db.num_classes() {
                    let all: Vec<usize> = (0..self.db.class(c).num_prototypes()).collect();
                    // An empty class contributes nothing; that is not an error here.
                    if self.db.class(c).num_tokens() == 0 {
                        continue;
                    }
                    let found = self.scan_all(patch, inv, c, &all, excluded.as_deref());
                    comparisons += found.1;
                    candidates.extend(found.0);
                }
                ensure(!candidates.is_empty(), || {
                    RaidError::Empty("database holds no instance tokens".into())
                })?;
                ensure(candidates.len() >= k, || {
                    RaidError::InsufficientCandidates {
                        needed: k,
                        found: candidates.len(),
                    }
                })?;
                let instances = select_top(candidates, k);
                let best = instances[0].instance;
                Ok((
                    PatchRetrieval {
                        retained_class: best.class as usize,
                        retained_prototype: best.prototype as usize,
                        instances,
                    },
                    comparisons,
                ))
            })
            .collect();
        let mut patches = Vec::with_capacity(per_patch.len());
        let mut comparisons = 0;
        for r in per_patch {
            let (p, c) = r?;
            comparisons += c;
            patches.push(p);
        }
        Ok(RetrievalResult {
            class_index: None,
            height: query.grid_height(),
            width: query.grid_width(),
            k,
            patches,
            comparisons,
            elapsed: start.elapsed(),
            warnings: Vec::new(),
        })
    }

    fn scan_all(
        &self,
        patch: &[f32],
        inv: f64,
        class: usize,
        prototypes: &[usize],
        excluded: Option<&[bool]>,
    ) -> (Vec<InstanceMatch>, u64) {
        let entry = self.db.class(class);
        let mut out = Vec::with_capacity(entry.num_tokens());
        for &j in prototypes {
            let bucket = entry.bucket(j);
            let invs = &self.bucket_inv[class][j];
            for i in 0..bucket.len() {
                if excluded.is_some_and(|ex| ex[bucket.provenance()[i].image as usize]) {
                    continue;
                }
                out.push(InstanceMatch {
                    instance: InstanceRef {
                        class: class as u32,
                        prototype: j as u32,
                        index: i as u32,
                    },
                    similarity: similarity(patch, inv, bucket.vector(i), invs[i]),
                });
            }
        }
        let n = out.len() as u64;
        (out, n)
    }

    /// Retained semantic prototypes arranged as an `H' x W' x D` grid.
    pub fn prototype_grid(&self, retrieval: &RetrievalResult) -> Result<FeatureGrid> {
        let mut data = Vec::with_capacity(retrieval.patches.len() * self.db.dim());
        for p in &retrieval.patches {
            let proto = self
                .db
                .class(p.retained_class)
                .semantic_prototype(p.retained_prototype);
            data.extend(proto.iter().map(|&v| f64::from(v)));
        }
        FeatureGrid::new(retrieval.height, retrieval.width, self.db.dim(), data)
    }
}

/// `H' x W' x K` grid of `1 - similarity` costs; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume(FeatureGrid);

impl CostVolume {
    pub fn from_grid(grid: FeatureGrid) -> Result<Self> {
        ensure(grid.data().iter().all(|v| (0.0..=2.0).contains(v)), || {
            RaidError::InvalidArgument("cost values must lie in [0, 2]".into())
        })?;
        Ok(Self(grid))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn depth(&self) -> usize {
        self.0.channels()
    }

    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.0.cell(y, x)[k]
    }

    pub fn as_grid(&self) -> &FeatureGrid {
        &self.0
    }

    /// Per-cell minimum cost, the retrieval-only anomaly score.
    pub fn min_cost(&self) -> Vec<f64> {
        self.0
            .data()
            .chunks_exact(self.depth().max(1))
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Builds the cost volume `1 - sim(query patch, retrieved instance)`.
pub fn build_cost_volume(
    retrieval: &RetrievalResult,
    query: &TokenEmbeddingSet,
) -> Result<CostVolume> {
    ensure(
        retrieval.height == query.grid_height() && retrieval.width == query.grid_width(),
        || RaidError::DimensionMismatch("retrieval grid differs from query grid".into()),
    )?;
    let k = retrieval.k;
    let mut data = Vec::with_capacity(retrieval.patches.len() * k);
    for (cell, p) in retrieval.patches.iter().enumerate() {
        ensure(p.instances.len() == k, || {
            RaidError::DimensionMismatch(format!(
                "patch {cell} has {} instances, expected K={k}",
                p.instances.len()
            ))
        })?;
        data.extend(p.instances.iter().map(|m| 1.0 - f64::from(m.similarity)));
    }
    CostVolume::from_grid(FeatureGrid::new(
        retrieval.height,
        retrieval.width,
        k,
        data,
    )?)
}
