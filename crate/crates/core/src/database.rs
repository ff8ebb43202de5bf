//! Three-level template index: class prototypes, per-class semantic
//! prototypes and per-prototype buckets of instance tokens.

use log::warn;
use rayon::prelude::*;

use crate::clustering::{kmeans_fit, KMeansConfig};
use crate::error::{ensure, RaidError, Result};
use crate::interchange::TokenEmbeddingSet;

pub const DEFAULT_SEMANTIC_PROTOTYPES: usize = 50;

/// Where an instance token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    /// Index into [`HierarchicalDatabase::image_ids`].
    pub image: u32,
    pub y: u32,
    pub x: u32,
}

/// Instance tokens filed under one semantic prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    dim: usize,
    vectors: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl Bucket {
    pub fn new(dim: usize, vectors: Vec<f32>, provenance: Vec<Provenance>) -> Result<Self> {
        ensure(vectors.len() == provenance.len() * dim, || {
            RaidError::DimensionMismatch("bucket vectors and provenance disagree".into())
        })?;
        Ok(Self {
            dim,
            vectors,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }
}

/// One class: its semantic prototypes and their buckets, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    dim: usize,
    semantic_prototypes: Vec<f32>,
    buckets: Vec<Bucket>,
}

impl ClassEntry {
    pub fn new(dim: usize, semantic_prototypes: Vec<f32>, buckets: Vec<Bucket>) -> Result<Self> {
        ensure(semantic_prototypes.len() == buckets.len() * dim, || {
            RaidError::DimensionMismatch(format!(
                "{} buckets for {} prototype values at D={dim}",
                buckets.len(),
                semantic_prototypes.len()
            ))
        })?;
        ensure(buckets.iter().all(|b| b.dim == dim), || {
            RaidError::DimensionMismatch("bucket dimension differs from class".into())
        })?;
        Ok(Self {
            dim,
            semantic_prototypes,
            buckets,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.buckets.len()
    }

    pub fn semantic_prototype(&self, j: usize) -> &[f32] {
        &self.semantic_prototypes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn semantic_prototypes_flat(&self) -> &[f32] {
        &self.semantic_prototypes
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn bucket(&self, j: usize) -> &Bucket {
        &self.buckets[j]
    }

    pub fn num_tokens(&self) -> usize {
        self.buckets.iter().map(Bucket::len).sum()
    }
}

/// The immutable template database.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalDatabase {
    dim: usize,
    class_prototypes: Vec<f32>,
    classes: Vec<ClassEntry>,
    image_ids: Vec<String>,
}

impl HierarchicalDatabase {
    pub fn from_parts(
        dim: usize,
        class_prototypes: Vec<f32>,
        classes: Vec<ClassEntry>,
        image_ids: Vec<String>,
    ) -> Result<Self> {
        ensure(dim >= 1, || {
            RaidError::InvalidArgument("D must be >= 1".into())
        })?;
        ensure(class_prototypes.len() == classes.len() * dim, || {
            RaidError::DimensionMismatch("class prototype count differs from class entries".into())
        })?;
        ensure(classes.iter().all(|c| c.dim == dim), || {
            RaidError::DimensionMismatch("class entry dimension differs from database".into())
        })?;
        let n_images = image_ids.len();
        let provenance_ok = classes
            .iter()
            .flat_map(|c| c.buckets.iter())
            .flat_map(|b| b.provenance.iter())
            .all(|p| (p.image as usize) < n_images);
        ensure(provenance_ok, || {
            RaidError::InvalidArgument("instance provenance points past the image table".into())
        })?;
        Ok(Self {
            dim,
            class_prototypes,
            classes,
            image_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_prototype(&self, c: usize) -> &[f32] {
        &self.class_prototypes[c * self.dim..(c + 1) * self.dim]
    }

    pub fn class_prototypes_flat(&self) -> &[f32] {
        &self.class_prototypes
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class(&self, c: usize) -> &ClassEntry {
        &self.classes[c]
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn total_tokens(&self) -> usize {
        self.classes.iter().map(ClassEntry::num_tokens).sum()
    }
}

/// Class-level clustering of template CLS tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub dim: usize,
    /// `C x D`, row-major.
    pub prototypes: Vec<f32>,
    /// Class index of each template, in input order.
    pub assignments: Vec<usize>,
}

/// Semantic prototypes of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrototypes {
    /// `J x D`, row-major.
    pub prototypes: Vec<f32>,
    /// Prototype of every pooled patch token, templates in input order and
    /// cells row-major within each template.
    pub assignments: Vec<usize>,
    pub warning: Option<String>,
}

impl SemanticPrototypes {
    pub fn len(&self, dim: usize) -> usize {
        self.prototypes.len() / dim
    }
}

fn common_dim(templates: &[&TokenEmbeddingSet]) -> Result<usize> {
    let first = templates
        .first()
        .ok_or_else(|| RaidError::Empty("no templates".into()))?;
    let dim = first.dim();
    if let Some(bad) = templates.iter().find(|t| t.dim() != dim) {
        return Err(RaidError::DimensionMismatch(format!(
            "template `{}` has D={}, expected D={dim}",
            bad.image_id(),
            bad.dim()
        )));
    }
    Ok(dim)
}

/// K-means over the templates' CLS tokens.
pub fn build_class_prototypes(
    templates: &[TokenEmbeddingSet],
    num_classes: usize,
    seed: u64,
) -> Result<ClassPrototypes> {
    let refs: Vec<&TokenEmbeddingSet> = templates.iter().collect();
    let dim = common_dim(&refs)?;
    let cls: Vec<f32> = templates
        .iter()
        .flat_map(|t| t.cls_token().iter().copied())
        .collect();
    let fit = kmeans_fit(&cls, dim, &KMeansConfig::new(num_classes, seed))?;
    Ok(ClassPrototypes {
        dim,
        prototypes: fit.centroids,
        assignments: fit.assignments,
    })
}

/// K-means over every patch token of one class. A request for more
/// prototypes than there are tokens is clipped to the token count.
pub fn build_semantic_prototypes(
    class_templates: &[&TokenEmbeddingSet],
    num_prototypes: usize,
    seed: u64,
) -> Result<SemanticPrototypes> {
    let dim = common_dim(class_templates).map_err(|e| match e {
        RaidError::Empty(_) => RaidError::Empty("class has no templates".into()),
        other => other,
    })?;
    let pooled: Vec<f32> = class_templates
        .iter()
        .flat_map(|t| t.patch_tokens().iter().copied())
        .collect();
    let count = pooled.len() / dim;
    let mut warning = None;
    let k = if num_prototypes > count {
        let msg = format!("requested {num_prototypes} semantic prototypes but the class has only {count} tokens; using {count}");
        warn!("{msg}");
        warning = Some(msg);
        count
    } else {
        num_prototypes
    };
    let fit = kmeans_fit(&pooled, dim, &KMeansConfig::new(k, seed))?;
    Ok(SemanticPrototypes {
        prototypes: fit.centroids,
        assignments: fit.assignments,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatabaseConfig {
    pub num_classes: usize,
    pub num_semantic_prototypes: usize,
    pub seed: u64,
}

impl DatabaseConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            num_semantic_prototypes: DEFAULT_SEMANTIC_PROTOTYPES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatabaseBuild {
    pub database: HierarchicalDatabase,
    /// Class index of every template, in input order.
    pub template_classes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Builds the full hierarchy. A template's patch tokens all go to the class
/// its CLS token was assigned to; within the class each token lands in the
/// bucket of its nearest semantic prototype.
pub fn build_database(
    templates: &[TokenEmbeddingSet],
    config: &DatabaseConfig,
) -> Result<DatabaseBuild> {
    ensure(!templates.is_empty(), || {
        RaidError::Empty("no templates".into())
    })?;
    let classes = build_class_prototypes(templates, config.num_classes, config.seed)?;
    let dim = classes.dim;

    let per_class: Vec<Vec<usize>> = (0..config.num_classes)
        .map(|c| {
            (0..templates.len())
                .filter(|&t| classes.assignments[t] == c)
                .collect()
        })
        .collect();

    let built: Vec<Result<(ClassEntry, Option<String>)>> = per_class
        .par_iter()
        .enumerate()
        .map(|(c, members)| {
            let refs: Vec<&TokenEmbeddingSet> = members.iter().map(|&t| &templates[t]).collect();
            let seed = config.seed.wrapping_add(1 + c as u64);
            let semantic = build_semantic_prototypes(&refs, config.num_semantic_prototypes, seed)?;
            let j = semantic.len(dim);
            let mut vectors = vec![Vec::new(); j];
            let mut provenance = vec![Vec::new(); j];
            let mut next = 0;
            for &t in members {
                let tpl = &templates[t];
                for y in 0..tpl.grid_height() {
                    for x in 0..tpl.grid_width() {
                        let b = semantic.assignments[next];
                        next += 1;
                        vectors[b].extend_from_slice(tpl.patch(y, x));
                        provenance[b].push(Provenance {
                            image: t as u32,
                            y: y as u32,
                            x: x as u32,
                        });
                    }
                }
            }
            let buckets = vectors
                .into_iter()
                .zip(provenance)
                .map(|(v, p)| Bucket::new(dim, v, p))
                .collect::<Result<Vec<_>>>()?;
            Ok((
                ClassEntry::new(dim, semantic.prototypes, buckets)?,
                semantic.warning,
            ))
        })
        .collect();

    let mut entries = Vec::with_capacity(built.len());
    let mut warnings = Vec::new();
    for (c, r) in built.into_iter().enumerate() {
        let (entry, warning) = r?;
        if let Some(w) = warning {
            warnings.push(format!("class {c}: {w}"));
        }
        entries.push(entry);
    }
    let ids = templates.iter().map(|t| t.image_id().to_owned()).collect();
    Ok(DatabaseBuild {
        database: HierarchicalDatabase::from_parts(dim, classes.prototypes, entries, ids)?,
        template_classes: classes.assignments,
        warnings,
    })
}
