//! Directory scanning, loading with per-file error context, and atomic
//! writes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tempfile::NamedTempFile;

use raid_core::interchange::{load_embedding_set, TokenEmbeddingSet};

/// Regular files in `dir`, sorted by name, skipping hidden files.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("reading directory {}", dir.display()))?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

/// Loads every embedding file in `dir`. Files that fail to load are all
/// reported together, and every set must share one embedding dimension.
pub fn load_embedding_dir(dir: &Path, what: &str) -> Result<Vec<(PathBuf, TokenEmbeddingSet)>> {
    let files = list_files(dir)?;
    if files.is_empty() {
        bail!("no {what} in {}", dir.display());
    }
    let mut sets = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for path in files {
        match open(&path).and_then(|r| Ok(load_embedding_set(r)?)) {
            Ok(set) => sets.push((path, set)),
            Err(e) => failures.push(format!("  {}: {e:#}", path.display())),
        }
    }
    if !failures.is_empty() {
        bail!(
            "{} unreadable {what} file(s):\n{}",
            failures.len(),
            failures.join("\n")
        );
    }
    let (first_path, first) = &sets[0];
    let dim = first.dim();
    for (path, set) in &sets[1..] {
        if set.dim() != dim {
            bail!(
                "{} has embedding dimension {} but {} has {dim}",
                path.display(),
                set.dim(),
                first_path.display()
            );
        }
    }
    Ok(sets)
}

/// Writes through a temporary file in the destination directory, renamed
/// into place once `fill` succeeds.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()
            .with_context(|| format!("writing {}", path.display()))?;
    }
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// A file-name-safe form of an image id.
pub fn file_stem_for(image_id: &str) -> String {
    let stem: String = image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if stem.is_empty() || stem.starts_with('.') {
        format!("_{stem}")
    } else {
        stem
    }
}
