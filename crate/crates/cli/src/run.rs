use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Name of the resolved-config JSON that also lists every output file.
pub const MANIFEST: &str = "resolved_config.json";

/// One file of a run and the schema it follows.
#[derive(Debug, Clone, Serialize)]
pub struct Entry {
    pub file: String,
    pub schema: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a ExperimentConfig,
    outputs: &'a [Entry],
}

/// A run directory under construction. Files go to a hidden staging sibling
/// that only replaces the target in [`RunDir::commit`], so a failed run leaves
/// nothing behind.
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    entries: Vec<Entry>,
    committed: bool,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() && !is_replaceable(target)? {
            bail!(
                "{} exists and is not a previous run directory; choose another --out",
                target.display()
            );
        }
        let name = target
            .file_name()
            .with_context(|| format!("{} has no directory name", target.display()))?
            .to_string_lossy();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            entries: Vec::new(),
            committed: false,
        })
    }

    /// Path for a new output `file` inside the staging directory.
    pub fn path(&mut self, file: &str, schema: &'static str) -> PathBuf {
        self.entries.push(Entry {
            file: file.to_string(),
            schema,
        });
        self.staging.join(file)
    }

    /// Registers a file written alongside another, such as a JSON sidecar.
    pub fn note(&mut self, file: &str, schema: &'static str) {
        self.entries.push(Entry {
            file: file.to_string(),
            schema,
        });
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        file: &str,
        schema: &'static str,
        value: &T,
    ) -> Result<()> {
        let path = self.path(file, schema);
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes the manifest and moves the run into place.
    pub fn commit(mut self, command: &str, config: &ExperimentConfig) -> Result<PathBuf> {
        let entries = std::mem::take(&mut self.entries);
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            outputs: &entries,
        };
        let path = self.staging.join(MANIFEST);
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        drop(w);
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results to {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Only an empty directory or an earlier run is overwritten.
fn is_replaceable(dir: &Path) -> Result<bool> {
    if !dir.is_dir() {
        return Ok(false);
    }
    Ok(dir.join(MANIFEST).is_file() || fs::read_dir(dir)?.next().is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_run_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("out");
        {
            let mut run = RunDir::create(&target).unwrap();
            fs::write(run.path("a.csv", "test"), "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_replaces_only_previous_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("out");
        let cfg = ExperimentConfig::default();
        for _ in 0..2 {
            let mut run = RunDir::create(&target).unwrap();
            fs::write(run.path("a.csv", "test"), "x").unwrap();
            run.commit("test", &cfg).unwrap();
        }
        assert!(target.join(MANIFEST).is_file());

        let foreign = tmp.path().join("mine");
        fs::create_dir(&foreign).unwrap();
        fs::write(foreign.join("notes.txt"), "keep").unwrap();
        assert!(RunDir::create(&foreign).is_err());
        assert!(foreign.join("notes.txt").is_file());
    }
}
