//! Temperature-controlled choice of training targets.
//!
//! An event type is drawn with probability `f_i^alpha / sum_j f_j^alpha`, then
//! a target event of that type is drawn uniformly among all eligible events in
//! the cohort. Eligible means the event has at least one predecessor and its
//! code survived the rare-code filter.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::event_model::{EventType, FrequencyTable, PatientRecord};
use crate::util::{rng_from, sub_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub alpha: f64,
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n_instances: 20_000,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(NepError::InvalidConfig(format!(
                "sampling.alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.n_instances == 0 {
            return Err(NepError::InvalidConfig(
                "sampling.n_instances must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    entries: Vec<(EventType, f64)>,
}

impl SamplingDistribution {
    pub fn entries(&self) -> &[(EventType, f64)] {
        &self.entries
    }

    pub fn prob(&self, t: EventType) -> f64 {
        self.entries
            .iter()
            .find(|(et, _)| *et == t)
            .map_or(0.0, |&(_, p)| p)
    }
}

/// `p_i = f_i^alpha / sum_j f_j^alpha`.
pub fn type_distribution(freqs: &FrequencyTable, alpha: f64) -> Result<SamplingDistribution> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(NepError::InvalidConfig(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let weights: Vec<(EventType, f64)> = freqs
        .entries()
        .iter()
        .map(|&(t, f)| (t, (f as f64).powf(alpha)))
        .collect();
    let z: f64 = weights.iter().map(|&(_, w)| w).sum();
    Ok(SamplingDistribution {
        entries: weights.into_iter().map(|(t, w)| (t, w / z)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub patient_id: String,
    pub target_index: usize,
    pub event_type: EventType,
}

/// Eligible (patient, event) positions grouped per event type.
#[derive(Debug, Clone)]
pub struct EligibleTargets {
    by_type: Vec<(EventType, Vec<(usize, usize)>)>,
}

impl EligibleTargets {
    pub fn new(cohort: &[PatientRecord]) -> Self {
        let mut by_type: Vec<(EventType, Vec<(usize, usize)>)> =
            EventType::ALL.iter().map(|&t| (t, Vec::new())).collect();
        for (p, r) in cohort.iter().enumerate() {
            for (i, e) in r.events.iter().enumerate().skip(1) {
                if !e.is_unk() {
                    by_type[e.event_type.index()].1.push((p, i));
                }
            }
        }
        Self { by_type }
    }

    pub fn count(&self, t: EventType) -> usize {
        self.by_type[t.index()].1.len()
    }

    fn of(&self, t: EventType) -> &[(usize, usize)] {
        &self.by_type[t.index()].1
    }
}

/// Draws `config.n_instances` targets with replacement.
///
/// Draw `i` uses its own generator seeded with `sub_seed(config.seed, i)`, so
/// any sharding of the draw indices across workers reproduces the sequential
/// output.
pub fn sample_training_positions(
    cohort: &[PatientRecord],
    dist: &SamplingDistribution,
    config: &SamplingConfig,
) -> Result<Vec<TargetSelection>> {
    config.validate()?;
    let eligible = EligibleTargets::new(cohort);
    // Types with mass but no eligible events are dropped and the rest renormalized.
    let live: Vec<(EventType, f64)> = dist
        .entries()
        .iter()
        .copied()
        .filter(|&(t, p)| p > 0.0 && eligible.count(t) > 0)
        .collect();
    if live.is_empty() {
        return Err(NepError::NoEligibleTargets);
    }
    let chooser = WeightedIndex::new(live.iter().map(|&(_, p)| p)).expect("positive weights");
    let selections = (0..config.n_instances as u64)
        .map(|i| {
            let mut rng = rng_from(sub_seed(config.seed, i));
            let t = live[chooser.sample(&mut rng)].0;
            let pool = eligible.of(t);
            let (p, idx) = pool[rng.random_range(0..pool.len())];
            TargetSelection {
                patient_id: cohort[p].patient_id.clone(),
                target_index: idx,
                event_type: t,
            }
        })
        .collect();
    Ok(selections)
}

pub fn write_selections(path: &Path, selections: &[TargetSelection]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in selections {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_selections(path: &Path) -> Result<Vec<TargetSelection>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| NepError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
