//! Downstream heads and metrics over frozen features.

mod baseline;
mod cv;
mod logistic;
mod metrics;
mod sweep;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::event_model::PatientRecord;

pub use baseline::bag_of_events_baseline;
pub use cv::{bootstrap_ci, cross_validate, fold_assignment, FoldAssignment, MetricReport};
pub use logistic::{logistic_objective, train_logistic, HeadConfig, LogisticModel};
pub use metrics::{auroc, c_index};
pub use sweep::{
    label_efficiency_sweep, sweep_csv, sweep_pools, write_sweep_csv, SweepConfig, SweepRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Binary(Vec<bool>),
    Survival { times: Vec<u32>, events: Vec<bool> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary(y) => y.len(),
            Labels::Survival { times, .. } => times.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Labels::Binary(_) => "auroc",
            Labels::Survival { .. } => "c_index",
        }
    }

    /// Labels the head is trained on: binary labels as-is, survival as
    /// "event observed within `horizon_days`".
    pub fn head_targets(&self, horizon_days: u32) -> Vec<bool> {
        match self {
            Labels::Binary(y) => y.clone(),
            Labels::Survival { times, events } => times
                .iter()
                .zip(events)
                .map(|(&t, &e)| e && t <= horizon_days)
                .collect(),
        }
    }

    /// Labels used for fold stratification.
    pub fn strata(&self) -> Vec<bool> {
        match self {
            Labels::Binary(y) => y.clone(),
            Labels::Survival { events, .. } => events.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Binary(y) => Labels::Binary(idx.iter().map(|&i| y[i]).collect()),
            Labels::Survival { times, events } => Labels::Survival {
                times: idx.iter().map(|&i| times[i]).collect(),
                events: idx.iter().map(|&i| events[i]).collect(),
            },
        }
    }

    /// AUROC for binary labels, C-index for survival, with `scores` as risk.
    pub fn score(&self, scores: &[f64]) -> Result<f64> {
        match self {
            Labels::Binary(y) => auroc(scores, y),
            Labels::Survival { times, events } => {
                let t: Vec<f64> = times.iter().map(|&t| t as f64).collect();
                c_index(scores, &t, events)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub patient_ids: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Labels,
}

impl LabeledDataset {
    pub fn new(patient_ids: Vec<String>, features: Array2<f64>, labels: Labels) -> Result<Self> {
        if features.nrows() != labels.len() || patient_ids.len() != labels.len() {
            return Err(NepError::Validation(format!(
                "{} feature rows, {} ids, {} labels",
                features.nrows(),
                patient_ids.len(),
                labels.len()
            )));
        }
        if let Labels::Survival { times, .. } = &labels {
            if times.contains(&0) {
                return Err(NepError::Validation("survival times must be > 0".into()));
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(NepError::Validation(
                "features contain NaN or infinite values".into(),
            ));
        }
        Ok(Self {
            patient_ids,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            patient_ids: idx.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            features: self.features.select(Axis(0), idx),
            labels: self.labels.select(idx),
        }
    }
}

/// Outcome `task` of every patient, in cohort order.
pub fn cohort_labels(cohort: &[PatientRecord], task: &str) -> Result<Labels> {
    let missing =
        |id: &str| NepError::Validation(format!("patient `{id}` has no `{task}` outcome"));
    let first = cohort.first().ok_or(NepError::EmptyCohort)?;
    let survival = first
        .outcomes
        .get(task)
        .ok_or_else(|| missing(&first.patient_id))?
        .as_survival()
        .is_some();
    if survival {
        let mut times = Vec::with_capacity(cohort.len());
        let mut events = Vec::with_capacity(cohort.len());
        for r in cohort {
            let (t, e) = r
                .outcomes
                .get(task)
                .and_then(|o| o.as_survival())
                .ok_or_else(|| missing(&r.patient_id))?;
            times.push(t);
            events.push(e);
        }
        Ok(Labels::Survival { times, events })
    } else {
        cohort
            .iter()
            .map(|r| {
                r.outcomes
                    .get(task)
                    .and_then(|o| o.as_binary())
                    .ok_or_else(|| missing(&r.patient_id))
            })
            .collect::<Result<_>>()
            .map(Labels::Binary)
    }
}
