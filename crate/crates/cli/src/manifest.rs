use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nep_core::util::hash_bytes;
use nep_core::NepError;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Per-stage record of the config hash, seed and the content hashes of every
/// file read and written. Downstream stages check their inputs against it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.manifest.json"))
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(hash_bytes(&fs::read(path)?))
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_hash: String) -> Self {
        Self {
            stage: stage.into(),
            seed,
            config_hash,
            ..Self::default()
        }
    }

    pub fn load(dir: &Path, stage: &str) -> Result<Self, CliError> {
        let path = manifest_path(dir, stage);
        let text = fs::read_to_string(&path).map_err(|_| {
            NepError::Provenance(format!(
                "{} is missing; run `nep {stage}` first",
                path.display()
            ))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn output(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        self.outputs
            .insert(name.into(), file_hash(&dir.join(name))?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.into(),
            serde_json::to_value(value).expect("summary values serialize"),
        );
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(
            manifest_path(dir, &self.stage),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }
}

/// Checks that `dir/name` is exactly what `stage` wrote and records it as an
/// input of `consumer`.
pub fn require(
    dir: &Path,
    stage: &str,
    name: &str,
    consumer: &mut Manifest,
) -> Result<PathBuf, CliError> {
    let upstream = Manifest::load(dir, stage)?;
    let path = dir.join(name);
    let expected = upstream
        .outputs
        .get(name)
        .ok_or_else(|| NepError::Provenance(format!("stage `{stage}` did not record `{name}`")))?;
    let actual = file_hash(&path)
        .map_err(|_| NepError::Provenance(format!("{} is missing", path.display())))?;
    if &actual != expected {
        return Err(NepError::Provenance(format!(
            "{} changed since `nep {stage}` wrote it (hash {actual}, expected {expected})",
            path.display()
        ))
        .into());
    }
    consumer.inputs.insert(name.into(), actual);
    Ok(path)
}
