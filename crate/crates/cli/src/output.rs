//! Atomic output directories and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

/// A directory that is filled under a hidden sibling name and renamed into
/// place by [`StagedDir::commit`]. Dropping it uncommitted removes it.
pub struct StagedDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl StagedDir {
    /// Fails when `target` exists and is not an empty directory, unless
    /// `force` is set, in which case it is replaced on commit.
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() {
            if !target.is_dir() {
                bail!("{} exists and is not a directory", target.display());
            }
            if !force && fs::read_dir(target)?.next().is_some() {
                bail!(
                    "output directory {} is not empty; pass --force to replace it",
                    target.display()
                );
            }
        }
        let name = target
            .file_name()
            .with_context(|| format!("{} has no directory name", target.display()))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(
            ".{}.partial-{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(StagedDir {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest(path: &Path, label: String) -> Result<FileDigest> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        bytes += k as u64;
        hasher.update(&buf[..k]);
    }
    Ok(FileDigest {
        path: label,
        bytes,
        sha256: format!("{:x}", hasher.finalize()),
    })
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            out.push(
                p.strip_prefix(root)
                    .expect("walk stays under root")
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}

/// Everything needed to rerun a command: the resolved configuration, its
/// hash, the seed, crate and format versions, and digests of every input
/// and output file. Holds no paths or timestamps, so reruns produce the
/// same bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = format!("{:x}", Sha256::digest(serde_json::to_vec(&config)?));
        let versions = [
            ("tscan", env!("CARGO_PKG_VERSION")),
            ("checkpoint", tscan::autodiff::CHECKPOINT_FORMAT),
            ("episodes", tscan::pipeline::episode::EPISODE_FORMAT),
            ("dataset", tscan::pipeline::prepared::PREPARED_FORMAT),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Ok(RunManifest {
            command: command.to_string(),
            config,
            config_hash,
            seed,
            versions,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input file under `label`, which should not depend on
    /// where the file lives.
    pub fn input(&mut self, path: &Path, label: &str) -> Result<()> {
        self.inputs.push(digest(path, label.to_string())?);
        Ok(())
    }

    /// Checks that every declared output exists and is non-empty, digests
    /// every file in the directory, writes `run.json` and commits.
    pub fn finish(mut self, dir: StagedDir, declared: &[&str]) -> Result<PathBuf> {
        for name in declared {
            let p = dir.path().join(name);
            let ok = if p.is_dir() {
                fs::read_dir(&p)?.next().is_some()
            } else {
                p.metadata().map(|m| m.len() > 0).unwrap_or(false)
            };
            if !ok {
                bail!("declared output {name} is missing or empty");
            }
        }
        let mut files = Vec::new();
        walk(dir.path(), dir.path(), &mut files)?;
        for rel in files {
            let label = rel.to_string_lossy().replace('\\', "/");
            self.outputs.push(digest(&dir.path().join(&rel), label)?);
        }
        fs::write(
            dir.path().join(RUN_MANIFEST),
            serde_json::to_string_pretty(&self)? + "\n",
        )?;
        dir.commit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_staging_is_removed() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        let staged = StagedDir::create(&target, false).unwrap();
        let staging = staged.path().to_path_buf();
        fs::write(staging.join("x"), "1").unwrap();
        drop(staged);
        assert!(!staging.exists() && !target.exists());
    }

    #[test]
    fn non_empty_target_needs_force() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("old"), "1").unwrap();
        assert!(StagedDir::create(&target, false).is_err());
        let staged = StagedDir::create(&target, true).unwrap();
        fs::write(staged.path().join("new"), "2").unwrap();
        staged.commit().unwrap();
        assert!(!target.join("old").exists() && target.join("new").exists());
    }

    #[test]
    fn missing_declared_output_fails() {
        let root = tempfile::tempdir().unwrap();
        let staged = StagedDir::create(&root.path().join("out"), false).unwrap();
        let m = RunManifest::new("t", &1, None).unwrap();
        assert!(m.finish(staged, &["absent.csv"]).is_err());
        assert!(!root.path().join("out").exists());
    }
}
