use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{bootstrap_ci, fit_and_score, fold_assignment};
use super::logistic::HeadConfig;
use super::{LabeledDataset, Labels};
use crate::error::{NepError, Result};
use crate::util::{median, rng_from, sub_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub n_boot: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100, 1000, 5000, 10000, 20000],
            k: 5,
            seed: 0,
            n_boot: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub feature_source: String,
    pub size: usize,
    pub metric: String,
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub per_fold: Vec<f64>,
}

/// Per-fold row lists.
pub type FoldRows = Vec<Vec<usize>>;

/// For each fold, its training rows in the fixed random order from which
/// every training subset is a prefix.
pub fn sweep_pools(labels: &Labels, cfg: &SweepConfig) -> Result<(FoldRows, FoldRows)> {
    let folds = fold_assignment(&labels.strata(), cfg.k, sub_seed(cfg.seed, 0))?;
    let mut pools = Vec::with_capacity(cfg.k);
    let mut tests = Vec::with_capacity(cfg.k);
    for f in 0..cfg.k {
        let mut pool = folds.train_indices(f);
        pool.shuffle(&mut rng_from(sub_seed(cfg.seed, 100 + f as u64)));
        pools.push(pool);
        tests.push(folds.test_indices(f));
    }
    Ok((pools, tests))
}

/// Trains a head on nested subsets of each fold's training rows (the first
/// `size` rows of a fixed permutation) and scores it on that fold's held-out
/// rows, for every feature source. The folds and subsets are shared by all
/// sources, so rows differ only in the features.
pub fn label_efficiency_sweep(
    sources: &[(String, Array2<f64>)],
    labels: &Labels,
    patient_ids: &[String],
    head: &HeadConfig,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    head.validate()?;
    let (pools, tests) = sweep_pools(labels, cfg)?;
    let available = pools.iter().map(Vec::len).min().unwrap_or(0);
    if let Some(&s) = cfg.sizes.iter().find(|&&s| s > available || s == 0) {
        return Err(NepError::InvalidConfig(format!(
            "sweep size {s} is outside 1..={available} (rows available for training in every fold)"
        )));
    }
    let datasets: Vec<LabeledDataset> = sources
        .iter()
        .map(|(_, x)| LabeledDataset::new(patient_ids.to_vec(), x.clone(), labels.clone()))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|s| cfg.sizes.iter().map(move |&size| (s, size)))
        .collect();
    jobs.par_iter()
        .map(|&(s, size)| {
            let ds = &datasets[s];
            let mut per_fold = Vec::with_capacity(cfg.k);
            let mut pooled_idx = Vec::with_capacity(labels.len());
            let mut pooled_scores = Vec::with_capacity(labels.len());
            for f in 0..cfg.k {
                let scores = fit_and_score(ds, &pools[f][..size], &tests[f], head)?;
                per_fold.push(labels.select(&tests[f]).score(&scores)?);
                pooled_idx.extend_from_slice(&tests[f]);
                pooled_scores.extend(scores);
            }
            let (ci_lo, ci_hi) = bootstrap_ci(
                &labels.select(&pooled_idx),
                &pooled_scores,
                cfg.n_boot,
                sub_seed(cfg.seed, 1000 + size as u64),
            )?;
            Ok(SweepRow {
                feature_source: sources[s].0.clone(),
                size,
                metric: labels.metric_name().into(),
                median: median(&per_fold),
                ci_lo,
                ci_hi,
                per_fold,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("feature_source,size,metric,median,ci_lo,ci_hi\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.feature_source, r.size, r.metric, r.median, r.ci_lo, r.ci_hi
        );
    }
    s
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::write(path, sweep_csv(rows))?;
    Ok(())
}
