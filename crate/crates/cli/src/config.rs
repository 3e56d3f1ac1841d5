use std::path::{Path, PathBuf};

use nep_core::evaluator::{HeadConfig, SweepConfig};
use nep_core::util::{content_hash, stage, sub_seed};
use nep_core::{
    AttentionMaskMode, CohortSpec, EmbedConfig, ModelConfig, SamplingConfig, TrainConfig,
    WindowConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Outcome to evaluate: `high_risk` (binary) or `survival`.
    pub tasks: Vec<String>,
    pub k: usize,
    pub n_boot: usize,
    pub head: HeadConfig,
    pub sweep_sizes: Vec<usize>,
    /// Task used for the label-efficiency sweep.
    pub sweep_task: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec!["high_risk".into(), "survival".into()],
            k: 5,
            n_boot: 1000,
            head: HeadConfig::default(),
            sweep_sizes: vec![100, 500, 2000],
            sweep_task: "survival".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Codes seen fewer times than this are replaced by UNK.
    pub min_code_count: usize,
    /// Fraction of patients kept out of NEP training for held-out loss.
    pub holdout_fraction: f64,
    /// Training objective: causal next-event prediction or masked-token prediction.
    pub mask_mode: AttentionMaskMode,
    /// Size of the separate downstream cohort drawn from the same process.
    pub eval_patients: usize,
    pub synth: CohortSpec,
    pub sampling: SamplingConfig,
    pub serializer: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            min_code_count: 50,
            holdout_fraction: 0.1,
            mask_mode: AttentionMaskMode::Causal,
            eval_patients: 3000,
            synth: CohortSpec::default(),
            sampling: SamplingConfig::default(),
            serializer: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embed: EmbedConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Replaces the value at a dotted path, creating intermediate tables.
fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    // TOML literal if it parses as one, otherwise a bare string.
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty override path `{path}`")))?;
    let mut table = root;
    for k in keys {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies `key=value` overrides, then
    /// validates every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let tag = |section: &'static str| {
            move |e: nep_core::NepError| CliError::Config(format!("[{section}] {e}"))
        };
        self.synth.validate().map_err(tag("synth"))?;
        self.sampling.validate().map_err(tag("sampling"))?;
        self.serializer.validate().map_err(tag("serializer"))?;
        self.train.validate().map_err(tag("train"))?;
        self.eval.head.validate().map_err(tag("eval.head"))?;
        let model = ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model.clone()
        };
        model.validate().map_err(tag("model"))?;
        if self.model.max_tokens < self.serializer.max_tokens {
            return Err(CliError::Config(format!(
                "model.max_tokens ({}) must be >= serializer.max_tokens ({})",
                self.model.max_tokens, self.serializer.max_tokens
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(CliError::Config(
                "holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.eval_patients < self.eval.k {
            return Err(CliError::Config("eval_patients must be >= eval.k".into()));
        }
        if self.eval.k < 2 {
            return Err(CliError::Config("eval.k must be >= 2".into()));
        }
        for t in self.eval.tasks.iter().chain([&self.eval.sweep_task]) {
            if t != "high_risk" && t != "survival" {
                return Err(CliError::Config(format!("unknown eval task `{t}`")));
            }
        }
        Ok(())
    }

    /// Per-stage seed derived from the global seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        sub_seed(self.seed, stage)
    }

    pub fn synth_spec(&self) -> CohortSpec {
        CohortSpec {
            seed: self.stage_seed(stage::SYNTH),
            ..self.synth.clone()
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            seed: self.stage_seed(stage::SAMPLING),
            ..self.sampling.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stage::TRAIN),
            ..self.train.clone()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            sizes: self.eval.sweep_sizes.clone(),
            k: self.eval.k,
            seed: self.stage_seed(stage::EVAL),
            n_boot: self.eval.n_boot,
        }
    }

    pub fn serializer_hash(&self) -> String {
        content_hash(&self.serializer)
    }

    /// Hash of the sections a stage depends on.
    pub fn hash_of<T: Serialize>(&self, parts: &T) -> String {
        content_hash(&(self.seed, parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.total_steps=7".into(),
                "seed=9".into(),
                "out_dir=x/y".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("x/y"));
        assert!(matches!(
            RunConfig::load(None, &["train.bogus=1".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["train.warmup_fraction=2.0".into()]),
            Err(CliError::Config(_))
        ));
    }
}
