//! Flat versus hierarchical retrieval on synthetic databases of growing size.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use log::info;

use crate::database::{build_database, DatabaseConfig};
use crate::error::{ensure, RaidError, Result};
use crate::pipeline::RetrievalMode;
use crate::retrieval::{InstanceRef, RetrievalParams, RetrievalResult, Retriever};
use crate::synthetic::{CorpusSpec, SyntheticCorpus};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Target database sizes in tokens; each is rounded up to whole images.
    pub sizes: Vec<usize>,
    pub corpus: CorpusSpec,
    pub semantic_prototypes: usize,
    pub retrieval: RetrievalParams,
    /// Query images timed per size.
    pub queries: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 50_000, 100_000],
            corpus: CorpusSpec {
                noise: 0.08,
                ..CorpusSpec::new(32, 3, 16, 17)
            },
            semantic_prototypes: 16,
            retrieval: RetrievalParams::default(),
            queries: 5,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: RetrievalMode,
    pub tokens: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Similarity evaluations per query, averaged.
    pub comparisons: f64,
    /// Fraction of patches whose top-K set equals the flat result's.
    pub agreement: f64,
}

/// Fraction of patches with identical top-K instance sets.
pub fn topk_agreement(a: &RetrievalResult, b: &RetrievalResult) -> Result<f64> {
    ensure(
        a.patches.len() == b.patches.len() && !a.patches.is_empty(),
        || RaidError::DimensionMismatch("retrievals cover different patch grids".into()),
    )?;
    let same = a
        .patches
        .iter()
        .zip(&b.patches)
        .filter(|(p, q)| {
            let sa: BTreeSet<InstanceRef> = p.instances.iter().map(|m| m.instance).collect();
            let sb: BTreeSet<InstanceRef> = q.instances.iter().map(|m| m.instance).collect();
            sa == sb
        })
        .count();
    Ok(same as f64 / a.patches.len() as f64)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(
    mode: RetrievalMode,
    tokens: usize,
    mut times: Vec<f64>,
    comparisons: &[u64],
    agreement: f64,
) -> BenchRow {
    times.sort_by(f64::total_cmp);
    BenchRow {
        mode,
        tokens,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        comparisons: comparisons.iter().sum::<u64>() as f64 / comparisons.len() as f64,
        agreement,
    }
}

/// Builds one database per size and times both retrieval modes on the same
/// fresh queries. Returns a flat and a hierarchical row per size.
pub fn run_benchmark(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure(!config.sizes.is_empty(), || {
        RaidError::InvalidArgument("no benchmark sizes".into())
    })?;
    ensure(config.queries >= 1, || {
        RaidError::InvalidArgument("need at least one query".into())
    })?;
    let corpus = SyntheticCorpus::new(config.corpus)?;
    let spec = corpus.spec();
    let per_image = spec.grid_height * spec.grid_width;
    let mut rows = Vec::with_capacity(2 * config.sizes.len());
    for &size in &config.sizes {
        let images = size.div_ceil(per_image).max(spec.classes);
        let per_class = images.div_ceil(spec.classes);
        let templates = corpus.images("t", per_class, config.seed ^ size as u64);
        let tokens = templates.len() * per_image;
        let db_config = DatabaseConfig {
            num_classes: spec.classes,
            num_semantic_prototypes: config.semantic_prototypes,
            seed: config.seed,
        };
        let build = build_database(&templates, &db_config)?;
        let retriever = Retriever::new(&build.database)?;
        let queries: Vec<_> = (0..config.queries)
            .map(|i| {
                corpus.image(
                    format!("q{i}"),
                    i % spec.classes,
                    config.seed.wrapping_add(1000 + i as u64),
                )
            })
            .collect();

        let (mut flat_ms, mut hier_ms) = (Vec::new(), Vec::new());
        let (mut flat_cmp, mut hier_cmp) = (Vec::new(), Vec::new());
        let mut agree = 0.0;
        for q in &queries {
            let t = Instant::now();
            let flat = retriever.flat_retrieve(q, config.retrieval.k)?;
            flat_ms.push(t.elapsed().as_secs_f64() * 1e3);
            flat_cmp.push(flat.comparisons);
            let t = Instant::now();
            let hier = retriever.hierarchical_retrieve(q, config.retrieval)?;
            hier_ms.push(t.elapsed().as_secs_f64() * 1e3);
            hier_cmp.push(hier.comparisons);
            agree += topk_agreement(&hier, &flat)?;
        }
        let agree = agree / queries.len() as f64;
        let flat_row = summarize(RetrievalMode::Flat, tokens, flat_ms, &flat_cmp, 1.0);
        let hier_row = summarize(
            RetrievalMode::Hierarchical,
            tokens,
            hier_ms,
            &hier_cmp,
            agree,
        );
        info!(
            "{tokens} tokens: flat {:.2} ms, hier {:.2} ms, agreement {:.4}",
            flat_row.mean_ms, hier_row.mean_ms, agree
        );
        rows.push(flat_row);
        rows.push(hier_row);
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut sink: W) -> Result<()> {
    writeln!(sink, "mode,tokens,mean_ms,p95_ms,comparisons,agreement")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{:.4},{:.4},{:.1},{:.6}",
            r.mode, r.tokens, r.mean_ms, r.p95_ms, r.comparisons, r.agreement
        )?;
    }
    Ok(())
}
