use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{train_logistic, HeadConfig};
use super::{LabeledDataset, Labels};
use crate::error::{NepError, Result};
use crate::util::{content_hash, median, rng_from, sub_seed};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Fold of each row.
    pub folds: Vec<usize>,
    pub k: usize,
    pub stratified: bool,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] != fold)
            .collect()
    }
}

/// Deals rows into `k` folds. Each class is shuffled and dealt round-robin
/// when both classes have at least `k` members; otherwise all rows are
/// shuffled together and `stratified` is false.
pub fn fold_assignment(strata: &[bool], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = strata.len();
    if k < 2 || n < k {
        return Err(NepError::InvalidConfig(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut rng = rng_from(seed);
    let n_pos = strata.iter().filter(|&&s| s).count();
    let stratified = n_pos >= k && n - n_pos >= k;
    let order: Vec<usize> = if stratified {
        let mut pos: Vec<usize> = (0..n).filter(|&i| strata[i]).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| !strata[i]).collect();
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.into_iter().chain(neg).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut folds = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        folds[i] = slot % k;
    }
    Ok(FoldAssignment {
        folds,
        k,
        stratified,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile 95% interval of the metric over `n_boot` resamples of
/// `(labels, scores)` rows. Resamples on which the metric is undefined (one
/// class, no comparable pair) are skipped.
pub fn bootstrap_ci(
    labels: &Labels,
    scores: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = labels.len();
    let values: Vec<Option<f64>> = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(sub_seed(seed, b));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            match labels.select(&idx).score(&s) {
                Ok(v) => Ok(Some(v)),
                Err(NepError::SingleClass | NepError::NoComparablePairs) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return Err(NepError::Validation(
            "metric undefined on every bootstrap resample".into(),
        ));
    }
    v.sort_by(f64::total_cmp);
    Ok((percentile(&v, 0.025), percentile(&v, 0.975)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Metric of the pooled out-of-fold predictions.
    pub point: f64,
    pub per_fold: Vec<f64>,
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub k: usize,
    pub n: usize,
    pub n_boot: usize,
    /// Folds fell back to unstratified because a class had fewer than `k` rows.
    pub unstratified_warning: bool,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let folds: Vec<String> = self.per_fold.iter().map(|v| format!("{v:.4}")).collect();
        let mut s = format!(
            "metric: {}\nn: {}\nk: {}\nmedian: {:.4}\npoint: {:.4}\nci95: [{:.4}, {:.4}] ({} bootstrap resamples)\nper_fold: {}\nconfig_hash: {}\n",
            self.metric,
            self.n,
            self.k,
            self.median,
            self.point,
            self.ci_lo,
            self.ci_hi,
            self.n_boot,
            folds.join(", "),
            self.config_hash
        );
        if self.unstratified_warning {
            s.push_str(
                "warning: too few members of one class to stratify; folds are unstratified\n",
            );
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "metric,n,k,median,point,ci_lo,ci_hi,per_fold,unstratified,config_hash"
    }

    pub fn to_csv_row(&self) -> String {
        let folds: Vec<String> = self.per_fold.iter().map(|v| v.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.metric,
            self.n,
            self.k,
            self.median,
            self.point,
            self.ci_lo,
            self.ci_hi,
            folds.join(";"),
            self.unstratified_warning,
            self.config_hash
        )
    }
}

/// Head scores for `test` rows after fitting on `train` rows.
pub(crate) fn fit_and_score(
    ds: &LabeledDataset,
    train: &[usize],
    test: &[usize],
    head: &HeadConfig,
) -> Result<Vec<f64>> {
    let targets = ds.labels.select(train).head_targets(head.horizon_days);
    let x_train = ds.features.select(ndarray::Axis(0), train);
    let model = train_logistic(x_train.view(), &targets, head)?;
    let x_test = ds.features.select(ndarray::Axis(0), test);
    Ok(model.predict_proba(x_test.view()).to_vec())
}

/// k-fold cross-validation of a logistic head. Folds run in parallel; every
/// random choice comes from `seed`, so the report is reproducible.
pub fn cross_validate(
    ds: &LabeledDataset,
    head: &HeadConfig,
    k: usize,
    seed: u64,
    n_boot: usize,
) -> Result<MetricReport> {
    head.validate()?;
    let folds = fold_assignment(&ds.labels.strata(), k, sub_seed(seed, 0))?;
    let results: Vec<(Vec<usize>, Vec<f64>, f64)> = (0..k)
        .into_par_iter()
        .map(|f| {
            let test = folds.test_indices(f);
            let scores = fit_and_score(ds, &folds.train_indices(f), &test, head)?;
            let metric = ds.labels.select(&test).score(&scores)?;
            Ok((test, scores, metric))
        })
        .collect::<Result<_>>()?;
    let mut oof = vec![0.0; ds.len()];
    let mut per_fold = Vec::with_capacity(k);
    for (test, scores, metric) in results {
        for (i, s) in test.into_iter().zip(scores) {
            oof[i] = s;
        }
        per_fold.push(metric);
    }
    let point = ds.labels.score(&oof)?;
    let (lo, hi) = bootstrap_ci(&ds.labels, &oof, n_boot, sub_seed(seed, 1))?;
    Ok(MetricReport {
        metric: ds.labels.metric_name().into(),
        point,
        median: median(&per_fold),
        per_fold,
        ci_lo: lo.min(point),
        ci_hi: hi.max(point),
        k,
        n: ds.len(),
        n_boot,
        unstratified_warning: !folds.stratified,
        config_hash: content_hash(&(head, k, seed, n_boot)),
    })
}
