//! Checksummed record of what every stage read and wrote.
//!
//! Each stage entry stores the digest of the configuration it ran with and
//! the SHA-256 of every input and output file. Before a stage runs, its
//! inputs must match the outputs recorded by their producers, and every
//! producer must itself still be fresh, so editing the config or an artifact
//! upstream invalidates everything downstream of it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    /// Artifact key to SHA-256 of the bytes read.
    pub inputs: BTreeMap<String, String>,
    /// Artifact key to SHA-256 of the bytes written.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock time of the stage.
    pub seconds: f64,
}

/// Artifact keys are paths relative to the output directory with `/` separators.
pub fn key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(crate::hex_digest(&crate::sha256(&bytes)))
}

fn provenance_error(stage: Stage, message: impl Into<String>) -> Error {
    Error::Provenance {
        stage: stage.name().to_string(),
        message: message.into(),
    }
}

impl Provenance {
    /// Reads the record; a missing file is an empty record.
    pub fn load(path: &Path) -> Result<Provenance> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Provenance::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file so a crash never leaves a torn record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }

    /// Which stage recorded `key` as an output.
    fn producer_of(&self, key: &str) -> Option<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|s| self.record(*s).is_some_and(|r| r.outputs.contains_key(key)))
    }

    /// Output keys of `stage` under a directory key.
    pub fn outputs_under(&self, stage: Stage, dir: &str) -> Vec<String> {
        let prefix = format!("{dir}/");
        self.record(stage)
            .map(|r| {
                r.outputs
                    .keys()
                    .filter(|k| k.starts_with(&prefix))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Checks that `stage` ran with the current configuration and that its
    /// inputs still match their producers, recursively upstream.
    pub fn check_fresh(&self, stage: Stage, digest_of: &dyn Fn(Stage) -> String) -> Result<()> {
        let mut seen = BTreeSet::new();
        self.check_fresh_inner(stage, digest_of, &mut seen)
    }

    fn check_fresh_inner(
        &self,
        stage: Stage,
        digest_of: &dyn Fn(Stage) -> String,
        seen: &mut BTreeSet<Stage>,
    ) -> Result<()> {
        if !seen.insert(stage) {
            return Ok(());
        }
        let rec = self.record(stage).ok_or_else(|| {
            provenance_error(
                stage,
                "missing upstream artifact: the stage has not been run in this output directory",
            )
        })?;
        if rec.config_digest != digest_of(stage) {
            return Err(provenance_error(
                stage,
                "the configuration changed since the stage ran",
            ));
        }
        for (k, sha) in &rec.inputs {
            let producer = self.producer_of(k).ok_or_else(|| {
                provenance_error(stage, format!("input {k} has no producing stage on record"))
            })?;
            let current = &self.stages[producer.name()].outputs[k];
            if current != sha {
                return Err(provenance_error(
                    stage,
                    format!(
                        "input {k} was rewritten by stage `{}` after this stage ran",
                        producer.name()
                    ),
                ));
            }
            self.check_fresh_inner(producer, digest_of, seen)?;
        }
        Ok(())
    }

    /// Verifies an input file on disk against the digest its producer
    /// recorded, and that the producer is fresh. Returns the digest.
    pub fn verify_input(
        &self,
        producer: Stage,
        out_dir: &Path,
        rel: &Path,
        digest_of: &dyn Fn(Stage) -> String,
    ) -> Result<String> {
        self.check_fresh(producer, digest_of)?;
        let k = key(rel);
        let rec = self.record(producer).expect("checked above");
        let recorded = rec
            .outputs
            .get(&k)
            .ok_or_else(|| provenance_error(producer, format!("missing upstream artifact {k}")))?;
        let path: PathBuf = out_dir.join(rel);
        let actual = file_digest(&path).map_err(|_| {
            provenance_error(
                producer,
                format!("missing upstream artifact {}", path.display()),
            )
        })?;
        if &actual != recorded {
            return Err(provenance_error(
                producer,
                format!("{k} was modified after the stage wrote it"),
            ));
        }
        Ok(actual)
    }
}
