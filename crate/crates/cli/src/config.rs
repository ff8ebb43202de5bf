//! Command-line flags, the optional `key=value` config file, and the merged
//! settings every command runs with.
//!
//! Precedence is flags, then the config file, then built-in defaults. Config
//! file keys are the long flag names without the leading dashes.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;

use raid_core::database::DEFAULT_SEMANTIC_PROTOTYPES;
use raid_core::evaluation::{DEFAULT_FPR_LIMIT, DEFAULT_SIGMA};
use raid_core::filter::{DEFAULT_EXPERTS, DEFAULT_TOP_K};
use raid_core::pipeline::RetrievalMode;
use raid_core::retrieval::{DEFAULT_K, DEFAULT_K_PRIME};
use raid_core::training::{FocalParams, DEFAULT_EPOCHS, DEFAULT_LAMBDA_BAL, DEFAULT_LEARNING_RATE};

/// Flags shared by all subcommands. Every field is optional so that unset
/// flags fall through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Flat `key=value` file supplying defaults for any flag below.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory of template embedding files.
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Directory of query embedding files.
    #[arg(long, global = true, value_name = "DIR")]
    pub queries: Option<PathBuf>,
    /// Directory of ground-truth PGM masks named `<image_id>.pgm`.
    #[arg(long, global = true, value_name = "DIR")]
    pub masks: Option<PathBuf>,
    /// Optional directory of embeddings used only as the anomaly source
    /// during training.
    #[arg(long, global = true, value_name = "DIR")]
    pub donors: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    pub db: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    pub filter: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Retrieval mode: `flat` or `hier`.
    #[arg(long, global = true)]
    pub mode: Option<RetrievalMode>,
    /// Semantic prototypes searched per patch.
    #[arg(long = "k-prime", global = true)]
    pub k_prime: Option<usize>,
    /// Instance tokens retrieved per patch.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long = "semantic-protos", global = true)]
    pub semantic_protos: Option<usize>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long = "lambda-bal", global = true)]
    pub lambda_bal: Option<f64>,
    #[arg(long = "batch-size", global = true)]
    pub batch_size: Option<usize>,
    /// Experts kept by the sparse stage-1 gate.
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    /// Experts per stage.
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Gaussian blur applied to upsampled maps; 0 disables it.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long = "fpr-limit", global = true)]
    pub fpr_limit: Option<f64>,
    /// Database sizes in tokens for `bench`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Query images timed per size in `bench`.
    #[arg(long = "bench-queries", global = true)]
    pub bench_queries: Option<usize>,
}

const KEYS: &[&str] = &[
    "templates",
    "queries",
    "masks",
    "donors",
    "db",
    "filter",
    "out",
    "mode",
    "k-prime",
    "k",
    "semantic-protos",
    "classes",
    "seed",
    "epochs",
    "lr",
    "lambda-bal",
    "batch-size",
    "top-k",
    "experts",
    "gamma",
    "alpha",
    "sigma",
    "fpr-limit",
    "sizes",
    "bench-queries",
];

/// Parsed `key=value` pairs. Blank lines and lines starting with `#` are
/// ignored.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    path: PathBuf,
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    n + 1
                );
            };
            let key = key.trim().trim_start_matches("--").to_string();
            ensure!(
                KEYS.contains(&key.as_str()),
                "{}:{}: unknown key {key:?}",
                path.display(),
                n + 1
            );
            values.insert(key, value.trim().to_string());
        }
        Ok(Self {
            path: path.to_path_buf(),
            values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(path, &text)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| {
                    anyhow::anyhow!("{}: bad value {v:?} for {key}: {e}", self.path.display())
                })
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().with_context(|| {
                            format!("{}: bad entry {s:?} in {key}", self.path.display())
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub templates: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub donors: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub filter: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: RetrievalMode,
    pub k_prime: usize,
    /// `None` means "not given"; commands that load a filter then take K from it.
    pub k: Option<usize>,
    /// `None` means "not given"; `build-db` and `bench` have their own defaults.
    pub semantic_protos: Option<usize>,
    pub classes: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_bal: f64,
    pub batch_size: usize,
    pub top_k: usize,
    pub experts: usize,
    pub focal: FocalParams,
    pub sigma: Option<f64>,
    pub fpr_limit: f64,
    pub sizes: Vec<usize>,
    pub bench_queries: usize,
}

impl Settings {
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        fn pick<T>(flag: &Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>>
        where
            T: FromStr + Clone,
            T::Err: Display,
        {
            match flag {
                Some(v) => Ok(Some(v.clone())),
                None => file.get(key),
            }
        }
        let focal_default = FocalParams::default();
        let sigma = pick(&flags.sigma, &file, "sigma")?.unwrap_or(DEFAULT_SIGMA);
        let settings = Self {
            templates: pick(&flags.templates, &file, "templates")?,
            queries: pick(&flags.queries, &file, "queries")?,
            masks: pick(&flags.masks, &file, "masks")?,
            donors: pick(&flags.donors, &file, "donors")?,
            db: pick(&flags.db, &file, "db")?,
            filter: pick(&flags.filter, &file, "filter")?,
            out: pick(&flags.out, &file, "out")?.unwrap_or_else(|| PathBuf::from("raid-out")),
            mode: pick(&flags.mode, &file, "mode")?.unwrap_or_default(),
            k_prime: pick(&flags.k_prime, &file, "k-prime")?.unwrap_or(DEFAULT_K_PRIME),
            k: pick(&flags.k, &file, "k")?,
            semantic_protos: pick(&flags.semantic_protos, &file, "semantic-protos")?,
            classes: pick(&flags.classes, &file, "classes")?,
            seed: pick(&flags.seed, &file, "seed")?.unwrap_or(0),
            epochs: pick(&flags.epochs, &file, "epochs")?.unwrap_or(DEFAULT_EPOCHS),
            lr: pick(&flags.lr, &file, "lr")?.unwrap_or(DEFAULT_LEARNING_RATE),
            lambda_bal: pick(&flags.lambda_bal, &file, "lambda-bal")?.unwrap_or(DEFAULT_LAMBDA_BAL),
            batch_size: pick(&flags.batch_size, &file, "batch-size")?.unwrap_or(4),
            top_k: pick(&flags.top_k, &file, "top-k")?.unwrap_or(DEFAULT_TOP_K),
            experts: pick(&flags.experts, &file, "experts")?.unwrap_or(DEFAULT_EXPERTS),
            focal: FocalParams {
                gamma: pick(&flags.gamma, &file, "gamma")?.unwrap_or(focal_default.gamma),
                alpha: pick(&flags.alpha, &file, "alpha")?.unwrap_or(focal_default.alpha),
            },
            sigma: (sigma > 0.0).then_some(sigma),
            fpr_limit: pick(&flags.fpr_limit, &file, "fpr-limit")?.unwrap_or(DEFAULT_FPR_LIMIT),
            sizes: match &flags.sizes {
                Some(v) => v.clone(),
                None => file
                    .list("sizes")?
                    .unwrap_or_else(|| vec![10_000, 50_000, 100_000]),
            },
            bench_queries: pick(&flags.bench_queries, &file, "bench-queries")?.unwrap_or(5),
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.k_prime >= 1, "--k-prime must be at least 1");
        ensure!(self.k != Some(0), "--k must be at least 1");
        ensure!(
            self.semantic_protos != Some(0),
            "--semantic-protos must be at least 1"
        );
        ensure!(self.classes != Some(0), "--classes must be at least 1");
        ensure!(self.experts >= 1, "--experts must be at least 1");
        ensure!(
            self.top_k >= 1 && self.top_k <= self.experts,
            "--top-k must be between 1 and --experts ({}), got {}",
            self.experts,
            self.top_k
        );
        ensure!(self.batch_size >= 1, "--batch-size must be at least 1");
        ensure!(
            self.lr.is_finite() && self.lr > 0.0,
            "--lr must be positive"
        );
        ensure!(
            self.lambda_bal.is_finite() && self.lambda_bal >= 0.0,
            "--lambda-bal must be non-negative"
        );
        ensure!(
            self.fpr_limit > 0.0 && self.fpr_limit <= 1.0,
            "--fpr-limit must be in (0, 1]"
        );
        ensure!(!self.sizes.is_empty(), "--sizes needs at least one entry");
        Ok(())
    }

    pub fn semantic_protos_or_default(&self) -> usize {
        self.semantic_protos.unwrap_or(DEFAULT_SEMANTIC_PROTOTYPES)
    }

    /// K for commands that have no filter file to take it from.
    pub fn k_or_default(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .with_context(|| format!("missing --{flag} (or `{flag}=` in the config file)"))
    }
}
