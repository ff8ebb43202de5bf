//! Desk-scale end-to-end run: build a database from synthetic templates,
//! train the filter on injected anomalies, and evaluate on held-out queries.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use raid_core::database::{build_database, DatabaseConfig};
use raid_core::evaluation::{evaluate_run, EvalConfig, EvalReport};
use raid_core::interchange::GroundTruthMask;
use raid_core::pipeline::{detect, RetrievalMode};
use raid_core::retrieval::{RetrievalParams, Retriever};
use raid_core::synthetic::{CorpusSpec, SyntheticCorpus};
use raid_core::training::{
    inject_anomaly, train_filter_with_donors, EpochStats, InjectionConfig, TrainConfig,
};

#[derive(Debug, Clone)]
pub struct E2eSetup {
    pub corpus: CorpusSpec,
    pub templates_per_class: usize,
    pub semantic_prototypes: usize,
    pub train: TrainConfig,
    pub held_out_normal: usize,
    pub held_out_anomalous: usize,
    /// Corpus classes used only as the anomaly source, never as templates.
    pub foreign_classes: usize,
}

impl E2eSetup {
    pub fn toy() -> Self {
        let mut corpus = CorpusSpec::new(16, 2, 6, 43);
        corpus.grid_height = 8;
        corpus.grid_width = 8;
        corpus.nuisance_rate = 0.15;
        corpus.nuisance_noise = 1.5;
        let train = TrainConfig {
            epochs: 50,
            lr: 3e-3,
            seed: 3,
            batch_size: 1,
            retrieval: RetrievalParams { k_prime: 2, k: 8 },
            ..TrainConfig::default()
        };
        Self {
            corpus,
            templates_per_class: 16,
            semantic_prototypes: 4,
            train,
            held_out_normal: 20,
            held_out_anomalous: 20,
            foreign_classes: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct E2eOutcome {
    pub filtered: EvalReport,
    pub baseline: EvalReport,
    pub history: Vec<EpochStats>,
    pub elapsed: Duration,
}

/// Token mask expanded to the source resolution, one block per token.
fn expand_mask(
    id: &str,
    gh: usize,
    gw: usize,
    sh: usize,
    sw: usize,
    tokens: &[u8],
) -> GroundTruthMask {
    let mut mask = vec![0u8; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            mask[y * sw + x] = tokens[(y * gh / sh) * gw + x * gw / sw];
        }
    }
    GroundTruthMask::new(id, sh, sw, mask).unwrap()
}

pub fn run(setup: &E2eSetup) -> E2eOutcome {
    let start = Instant::now();
    let classes = setup.corpus.classes;
    let mut spec = setup.corpus;
    spec.classes += setup.foreign_classes;
    let corpus = SyntheticCorpus::new(spec).unwrap();
    let templates: Vec<_> = corpus
        .images("t", setup.templates_per_class, 1)
        .into_iter()
        .filter(|t| {
            t.image_id()[1..]
                .split('_')
                .next()
                .unwrap()
                .parse::<usize>()
                .unwrap()
                < classes
        })
        .collect();
    let foreign: Vec<_> = (0..setup.foreign_classes * setup.templates_per_class)
        .map(|i| {
            corpus.image(
                format!("f{i}"),
                classes + i % setup.foreign_classes,
                5000 + i as u64,
            )
        })
        .collect();
    let db_config = DatabaseConfig {
        num_classes: setup.corpus.classes,
        num_semantic_prototypes: setup.semantic_prototypes,
        seed: 3,
    };
    let db = build_database(&templates, &db_config).unwrap().database;
    let run = train_filter_with_donors(&templates, &foreign, &db, &setup.train).unwrap();

    let retriever = Retriever::new(&db).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut maps, mut baselines, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let total = setup.held_out_normal + setup.held_out_anomalous;
    for i in 0..total {
        let class = i % classes;
        let image = corpus.image(format!("q{i}"), class, rng.random());
        let (query, token_mask) = if i < setup.held_out_normal {
            let n = image.num_patches();
            (image, vec![0u8; n])
        } else {
            let donor_class = if setup.foreign_classes > 0 {
                classes + rng.random_range(0..setup.foreign_classes)
            } else {
                (class + 1 + rng.random_range(0..classes.max(2) - 1)) % classes
            };
            let donor = corpus.image(format!("d{i}"), donor_class, rng.random());
            let s =
                inject_anomaly(&image, &donor, rng.random(), &InjectionConfig::default()).unwrap();
            (s.query, s.mask)
        };
        let det = detect(
            &retriever,
            &run.params,
            &query,
            RetrievalMode::Hierarchical,
            setup.train.retrieval,
        )
        .unwrap();
        masks.push(expand_mask(
            query.image_id(),
            query.grid_height(),
            query.grid_width(),
            query.source_height(),
            query.source_width(),
            &token_mask,
        ));
        maps.push(det.map);
        baselines.push(det.min_cost_map);
    }
    let cfg = EvalConfig::default();
    E2eOutcome {
        filtered: evaluate_run(&maps, &masks, &cfg).unwrap(),
        baseline: evaluate_run(&baselines, &masks, &cfg).unwrap(),
        history: run.history,
        elapsed: start.elapsed(),
    }
}
