//! Append-only store of search results.
//!
//! ```text
//! <store>/<sha256 of input>/manifest.json
//! <store>/<sha256 of input>/best.sass
//! <store>/<sha256 of input>/<seed>/{candidate.sass, history.jsonl, verdict.json}
//! ```
//!
//! A seed directory is never rewritten once present. The manifest's best entry
//! only moves to a strictly faster candidate that is eligible (passed its tests,
//! or no tests were configured). Every file lands via write-then-rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn input_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub time: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub seed: u64,
    pub time: f64,
    /// Relative to the manifest's directory.
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_hash: String,
    pub unit: String,
    pub baseline: f64,
    pub best: Option<BestEntry>,
    pub runs: Vec<RunEntry>,
}

/// One chain's result as handed to the store.
pub struct Record<'a> {
    pub seed: u64,
    pub time: f64,
    pub status: &'a str,
    pub eligible: bool,
    pub candidate: &'a str,
    pub history: &'a str,
    pub verdict: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stored {
    /// Written, and now the best candidate.
    NewBest,
    Written,
    /// A result for this seed already existed and was kept.
    Kept,
}

pub struct Store {
    dir: PathBuf,
    manifest: Manifest,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Store(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| io_err(dir, e))?;
    tmp.write_all(contents).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

impl Store {
    /// Opens (creating if needed) the store entry for `input`.
    pub fn open(root: &Path, input: &str, unit: &str, baseline: f64) -> Result<Store, CliError> {
        let hash = input_hash(input);
        let dir = root.join(&hash);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join("manifest.json");
        let manifest = match std::fs::read_to_string(&path) {
            Ok(text) => {
                let m: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
                if m.unit != unit {
                    return Err(io_err(
                        &path,
                        format!("holds results in {}, this run measures {unit}", m.unit),
                    ));
                }
                m
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest {
                input_hash: hash,
                unit: unit.to_string(),
                baseline,
                best: None,
                runs: Vec::new(),
            },
            Err(e) => return Err(io_err(&path, e)),
        };
        Ok(Store { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    #[cfg(test)]
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn record(&mut self, r: &Record) -> Result<Stored, CliError> {
        let seed_dir = self.dir.join(r.seed.to_string());
        if seed_dir.exists() {
            return Ok(Stored::Kept);
        }
        let tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempdir_in(&self.dir)
            .map_err(|e| io_err(&self.dir, e))?;
        for (name, body) in [
            ("candidate.sass", r.candidate),
            ("history.jsonl", r.history),
            ("verdict.json", r.verdict),
        ] {
            let p = tmp.path().join(name);
            std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        }
        std::fs::rename(tmp.path(), &seed_dir).map_err(|e| io_err(&seed_dir, e))?;

        self.manifest.runs.push(RunEntry {
            seed: r.seed,
            time: r.time,
            status: r.status.to_string(),
        });
        let better = r.eligible && self.manifest.best.as_ref().is_none_or(|b| r.time < b.time);
        if better {
            write_atomic(&self.dir.join("best.sass"), r.candidate.as_bytes())?;
            self.manifest.best = Some(BestEntry {
                seed: r.seed,
                time: r.time,
                candidate: format!("{}/candidate.sass", r.seed),
            });
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.dir.join("manifest.json"), format!("{json}\n").as_bytes())?;
        Ok(if better { Stored::NewBest } else { Stored::Written })
    }
}
