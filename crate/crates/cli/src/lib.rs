//! Command-line front end: `build-db`, `train`, `detect`, `eval` and `bench`.

pub mod commands;
pub mod config;
pub mod files;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{Flags, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "raid",
    version,
    about = "Retrieval-augmented anomaly detection over token embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build a hierarchical database from a directory of template embeddings.
    BuildDb,
    /// Train the filter on anomalies injected into the templates.
    Train,
    /// Write an anomaly map and an image score for every query.
    Detect,
    /// Score the maps written by `detect` against ground-truth masks.
    Eval,
    /// Time flat against hierarchical retrieval on synthetic databases.
    Bench,
}

fn fmt_counts(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Runs one command and prints its summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let settings = Settings::resolve(&cli.flags)?;
    match cli.command {
        Command::BuildDb => {
            let s = commands::build_db(&settings)?;
            println!(
                "wrote {}: {} templates, D={}, C={}, J per class [{}], tokens per class [{}]",
                s.path.display(),
                s.templates,
                s.dim,
                s.prototypes.len(),
                fmt_counts(&s.prototypes),
                fmt_counts(&s.tokens)
            );
        }
        Command::Train => {
            let s = commands::train(&settings)?;
            let (first, last) = (s.history.first(), s.history.last());
            println!(
                "wrote {} ({} parameters) and {}",
                s.filter.display(),
                s.parameters,
                s.loss_csv.display()
            );
            if let (Some(f), Some(l)) = (first, last) {
                println!(
                    "loss {:.6} -> {:.6} over {} epochs",
                    f.total,
                    l.total,
                    s.history.len()
                );
            }
        }
        Command::Detect => {
            let s = commands::detect(&settings)?;
            println!(
                "scored {} queries; maps in {}, scores in {}",
                s.rows.len(),
                s.maps_dir.display(),
                s.scores_csv.display()
            );
        }
        Command::Eval => {
            let s = commands::eval(&settings)?;
            for (name, value) in s.report.metrics() {
                println!("{name:<12} {value:.4}");
            }
            if s.unmasked > 0 {
                println!("{} maps had no mask and were treated as normal", s.unmasked);
            }
            println!("wrote {}", s.metrics_csv.display());
        }
        Command::Bench => {
            let s = commands::bench(&settings)?;
            println!(
                "{:<5} {:>8} {:>10} {:>10} {:>10} {:>14} {:>9}",
                "mode", "tokens", "mean_ms", "median_ms", "p95_ms", "comparisons", "agreement"
            );
            for r in &s.rows {
                println!(
                    "{:<5} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>14.0} {:>9.4}",
                    r.mode.to_string(),
                    r.tokens,
                    r.mean_ms,
                    r.median_ms,
                    r.p95_ms,
                    r.comparisons,
                    r.agreement
                );
            }
            println!("wrote {}", s.bench_csv.display());
        }
    }
    Ok(())
}
