//! The five pipeline commands. Each returns a summary for the caller to
//! print; all file output goes through atomic writes.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};

use raid_core::bench::{run_benchmark, write_bench_csv, BenchConfig, BenchRow};
use raid_core::database::{build_database, DatabaseConfig, HierarchicalDatabase};
use raid_core::evaluation::image_score;
use raid_core::evaluation::{evaluate_run, upsample_map, EvalConfig, EvalReport};
use raid_core::filter::{AnomalyMap, FilterParameters};
use raid_core::interchange::{
    load_database, load_filter, load_map, load_mask_pgm, save_database, save_filter, save_map,
    write_pgm, GroundTruthMask,
};
use raid_core::pipeline::detect as detect_one;
use raid_core::retrieval::{RetrievalParams, Retriever};
use raid_core::synthetic::CorpusSpec;
use raid_core::training::{train_filter_with_donors, EpochStats, LossConfig, TrainConfig};

use crate::config::Settings;
use crate::files::{file_stem_for, list_files, load_embedding_dir, open, write_atomic};

pub const MAP_EXTENSION: &str = "raidmap";

fn load_db(path: &Path) -> Result<HierarchicalDatabase> {
    load_database(open(path)?).with_context(|| format!("loading database {}", path.display()))
}

fn load_filter_file(path: &Path) -> Result<FilterParameters> {
    if !path.exists() {
        bail!(
            "filter file {} does not exist; run `raid train` first or pass --filter",
            path.display()
        );
    }
    load_filter(open(path)?).with_context(|| format!("loading filter {}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub path: PathBuf,
    pub templates: usize,
    pub dim: usize,
    /// Semantic prototypes per class.
    pub prototypes: Vec<usize>,
    /// Instance tokens per class.
    pub tokens: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn build_db(s: &Settings) -> Result<BuildSummary> {
    let dir = s.require(&s.templates, "templates")?;
    let out = s.require(&s.db, "db")?;
    let sets: Vec<_> = load_embedding_dir(dir, "templates")?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let config = DatabaseConfig {
        num_classes: s.classes.unwrap_or(1),
        num_semantic_prototypes: s.semantic_protos_or_default(),
        seed: s.seed,
    };
    let build = build_database(&sets, &config).context("building the database")?;
    for w in &build.warnings {
        warn!("{w}");
    }
    let db = &build.database;
    write_atomic(out, |w| {
        save_database(db, w)?;
        Ok(())
    })?;
    Ok(BuildSummary {
        path: out.to_path_buf(),
        templates: sets.len(),
        dim: db.dim(),
        prototypes: db.classes().iter().map(|c| c.num_prototypes()).collect(),
        tokens: db.classes().iter().map(|c| c.num_tokens()).collect(),
        warnings: build.warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub filter: PathBuf,
    pub loss_csv: PathBuf,
    pub parameters: usize,
    pub history: Vec<EpochStats>,
}

pub fn train_config(s: &Settings) -> TrainConfig {
    TrainConfig {
        epochs: s.epochs,
        lr: s.lr,
        seed: s.seed,
        batch_size: s.batch_size,
        loss: LossConfig {
            focal: s.focal,
            lambda_bal: s.lambda_bal,
        },
        retrieval: RetrievalParams {
            k_prime: s.k_prime,
            k: s.k_or_default(),
        },
        mode: s.mode,
        guidance_experts: s.experts,
        filter_experts: s.experts,
        top_k: s.top_k,
        ..TrainConfig::default()
    }
}

pub fn train(s: &Settings) -> Result<TrainSummary> {
    let templates_dir = s.require(&s.templates, "templates")?;
    let db_path = s.require(&s.db, "db")?;
    let filter_path = s.require(&s.filter, "filter")?;
    let db = load_db(db_path)?;
    let templates: Vec<_> = load_embedding_dir(templates_dir, "templates")?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    ensure!(
        templates[0].dim() == db.dim(),
        "templates in {} have D={} but database {} has D={}",
        templates_dir.display(),
        templates[0].dim(),
        db_path.display(),
        db.dim()
    );
    let donors: Vec<_> = match &s.donors {
        Some(dir) => load_embedding_dir(dir, "donors")?
            .into_iter()
            .map(|(_, t)| t)
            .collect(),
        None => Vec::new(),
    };
    let config = train_config(s);
    info!(
        "training on {} templates for {} epochs (K={}, K'={}, lr={})",
        templates.len(),
        config.epochs,
        config.retrieval.k,
        config.retrieval.k_prime,
        config.lr
    );
    let run = train_filter_with_donors(&templates, &donors, &db, &config)
        .context("training the filter")?;
    write_atomic(filter_path, |w| {
        save_filter(&run.params, w)?;
        Ok(())
    })?;
    let loss_csv = s.out.join("loss.csv");
    write_atomic(&loss_csv, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["epoch", "focal", "balance", "total"])?;
        for h in &run.history {
            csv.write_record([
                h.epoch.to_string(),
                h.focal.to_string(),
                h.balance.to_string(),
                h.total.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(TrainSummary {
        filter: filter_path.to_path_buf(),
        loss_csv,
        parameters: run.params.num_parameters(),
        history: run.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub image_id: String,
    pub score: f64,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectSummary {
    pub maps_dir: PathBuf,
    pub scores_csv: PathBuf,
    pub rows: Vec<ScoreRow>,
}

fn map_pgm(map: &AnomalyMap, sigma: Option<f64>) -> Result<Vec<u8>> {
    let up = upsample_map(
        map,
        map.source_height().max(map.height()),
        map.source_width().max(map.width()),
        sigma,
    )?;
    let mut bytes = Vec::new();
    let pixels: Vec<u8> = up
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(&mut bytes, up.width, up.height, &pixels)?;
    Ok(bytes)
}

pub fn detect(s: &Settings) -> Result<DetectSummary> {
    let queries_dir = s.require(&s.queries, "queries")?;
    let db_path = s.require(&s.db, "db")?;
    let filter_path = s.require(&s.filter, "filter")?;
    let filter = load_filter_file(filter_path)?;
    let db = load_db(db_path)?;
    let cfg = filter.config();
    let k = s.k.unwrap_or(cfg.cost_channels);
    cfg.ensure_compatible(db.dim(), k).with_context(|| {
        format!(
            "filter {} does not fit database {} (D={}) with K={k}",
            filter_path.display(),
            db_path.display(),
            db.dim()
        )
    })?;
    let params = RetrievalParams {
        k_prime: s.k_prime,
        k,
    };
    let retriever = Retriever::new(&db)?;
    let maps_dir = s.out.join("maps");
    fs::create_dir_all(&maps_dir).with_context(|| format!("creating {}", maps_dir.display()))?;

    let mut rows = Vec::new();
    let mut stems = HashSet::new();
    for (path, query) in load_embedding_dir(queries_dir, "queries")? {
        ensure!(
            query.dim() == db.dim(),
            "{} has D={} but the database has D={}",
            path.display(),
            query.dim(),
            db.dim()
        );
        let stem = file_stem_for(query.image_id());
        ensure!(
            stems.insert(stem.clone()),
            "{}: image id {:?} collides with an earlier query",
            path.display(),
            query.image_id()
        );
        let det = detect_one(&retriever, &filter, &query, s.mode, params)
            .with_context(|| format!("detecting anomalies in {}", path.display()))?;
        for w in &det.retrieval.warnings {
            warn!("{}: {w}", path.display());
        }
        write_atomic(&maps_dir.join(format!("{stem}.{MAP_EXTENSION}")), |w| {
            save_map(&det.map, w)?;
            Ok(())
        })?;
        let pgm = map_pgm(&det.map, s.sigma)?;
        write_atomic(&maps_dir.join(format!("{stem}.pgm")), |w| {
            Ok(w.write_all(&pgm)?)
        })?;
        rows.push(ScoreRow {
            image_id: query.image_id().to_string(),
            score: image_score(&det.map)?,
            label: query.class_label().map(str::to_string),
        });
    }
    let scores_csv = s.out.join("scores.csv");
    write_atomic(&scores_csv, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["image_id", "score", "label"])?;
        for r in &rows {
            csv.write_record([
                r.image_id.as_str(),
                &r.score.to_string(),
                r.label.as_deref().unwrap_or(""),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(DetectSummary {
        maps_dir,
        scores_csv,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub metrics_csv: PathBuf,
    pub report: EvalReport,
    /// Maps with no mask file, evaluated as all-normal.
    pub unmasked: usize,
}

pub fn eval(s: &Settings) -> Result<EvalSummary> {
    let masks_dir = s.require(&s.masks, "masks")?;
    let maps_dir = s.out.join("maps");
    let map_files: Vec<PathBuf> = list_files(&maps_dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == MAP_EXTENSION))
        .collect();
    ensure!(
        !map_files.is_empty(),
        "no .{MAP_EXTENSION} files in {}; run `raid detect` first",
        maps_dir.display()
    );
    let mut maps = Vec::with_capacity(map_files.len());
    let mut masks = Vec::with_capacity(map_files.len());
    let mut unmasked = 0;
    for path in &map_files {
        let map =
            load_map(open(path)?).with_context(|| format!("loading map {}", path.display()))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mask_path = masks_dir.join(format!("{stem}.pgm"));
        let mask = if mask_path.exists() {
            let m = load_mask_pgm(stem.clone(), open(&mask_path)?)
                .with_context(|| format!("loading mask {}", mask_path.display()))?;
            ensure!(
                m.height == map.source_height() && m.width == map.source_width(),
                "mask {} is {}x{} but the map expects {}x{}",
                mask_path.display(),
                m.height,
                m.width,
                map.source_height(),
                map.source_width()
            );
            m
        } else {
            unmasked += 1;
            GroundTruthMask::empty(stem.clone(), map.source_height(), map.source_width())
        };
        maps.push(map);
        masks.push(mask);
    }
    let config = EvalConfig {
        sigma: s.sigma,
        fpr_limit: s.fpr_limit,
    };
    let report = evaluate_run(&maps, &masks, &config).context("computing metrics")?;
    let metrics_csv = s.out.join("metrics.csv");
    write_atomic(&metrics_csv, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["metric", "value"])?;
        for (name, value) in report.metrics() {
            csv.write_record([name, &value.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(EvalSummary {
        metrics_csv,
        report,
        unmasked,
    })
}

pub fn bench_config(s: &Settings) -> BenchConfig {
    let defaults = BenchConfig::default();
    let j = s.semantic_protos.unwrap_or(defaults.semantic_prototypes);
    BenchConfig {
        sizes: s.sizes.clone(),
        corpus: CorpusSpec {
            classes: s.classes.unwrap_or(defaults.corpus.classes),
            // One synthetic cluster per semantic prototype.
            modes_per_class: j,
            seed: s.seed,
            ..defaults.corpus
        },
        semantic_prototypes: j,
        retrieval: RetrievalParams {
            k_prime: s.k_prime,
            k: s.k_or_default(),
        },
        queries: s.bench_queries,
        seed: s.seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub bench_csv: PathBuf,
    pub rows: Vec<BenchRow>,
}

pub fn bench(s: &Settings) -> Result<BenchSummary> {
    let rows = run_benchmark(&bench_config(s)).context("running the retrieval benchmark")?;
    let bench_csv = s.out.join("bench.csv");
    write_atomic(&bench_csv, |w| {
        write_bench_csv(&rows, w)?;
        Ok(())
    })?;
    Ok(BenchSummary { bench_csv, rows })
}
