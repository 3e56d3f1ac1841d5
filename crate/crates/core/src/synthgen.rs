//! Synthetic cohorts drawn from a known first-order Markov process with
//! latent risk groups, plus the exact oracles that process implies.
//!
//! Every risk group uses a doubly stochastic transition matrix, so all groups
//! share the uniform stationary distribution (and therefore the same static
//! code frequencies) while differing in which codes follow which. Order carries
//! the group signal; counts do not.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::event_model::{ClinicalEvent, EventKey, EventType, Outcome, PatientRecord};
use crate::util::rng_from;

pub const HIGH_RISK_TASK: &str = "high_risk";
pub const SURVIVAL_TASK: &str = "survival";

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSpec {
    /// Each group's matrix mixes a few random permutation matrices with a
    /// uniform floor: `T = (1 - smoothing) * sum_m w_m P_m + smoothing / V`.
    Permutation {
        branch_weights: Vec<f64>,
        smoothing: f64,
    },
    /// Fully specified chain; `transitions[g][i][j]`.
    Explicit {
        initial: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
    },
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec::Permutation {
            branch_weights: vec![0.6, 0.25, 0.15],
            smoothing: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_patients: usize,
    /// Number of distinct codes per event type, in type order.
    pub vocab_per_type: BTreeMap<EventType, usize>,
    pub n_risk_groups: usize,
    pub group_weights: Vec<f64>,
    pub chain: ChainSpec,
    /// Exponential survival hazard per group, 1/days.
    pub hazards: Vec<f64>,
    /// Mean gap (days) preceding an event of each type.
    pub mean_gap_days: BTreeMap<EventType, f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub horizon_days: u32,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let vocab_per_type = BTreeMap::from([
            (EventType::Diagnosis, 12),
            (EventType::Medication, 10),
            (EventType::Lab, 14),
            (EventType::Vital, 8),
            (EventType::Procedure, 6),
        ]);
        let mean_gap_days = BTreeMap::from([
            (EventType::Diagnosis, 20.0),
            (EventType::Medication, 7.0),
            (EventType::Lab, 3.0),
            (EventType::Vital, 1.0),
            (EventType::Procedure, 45.0),
        ]);
        Self {
            n_patients: 2000,
            vocab_per_type,
            n_risk_groups: 2,
            group_weights: vec![0.5, 0.5],
            chain: ChainSpec::default(),
            hazards: vec![2f64.ln() / 900.0, 2f64.ln() / 180.0],
            mean_gap_days,
            min_len: 20,
            max_len: 80,
            horizon_days: 730,
            seed: 0,
            id_prefix: "P".into(),
        }
    }
}

fn code_prefix(t: EventType) -> &'static str {
    match t {
        EventType::Diagnosis => "DX",
        EventType::Medication => "RX",
        EventType::Lab => "LB",
        EventType::Vital => "VS",
        EventType::Procedure => "PR",
        EventType::Death => "DEATH",
    }
}

fn check_stochastic(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(NepError::InvalidConfig(format!(
            "{what} has invalid entries"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(NepError::InvalidConfig(format!(
            "{what} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

impl CohortSpec {
    pub fn codes(&self) -> Vec<EventKey> {
        let mut codes = Vec::new();
        for (&t, &n) in &self.vocab_per_type {
            for i in 1..=n {
                codes.push(EventKey::new(t, format!("{}{:03}", code_prefix(t), i)));
            }
        }
        codes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NepError::InvalidConfig(m));
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if self
            .vocab_per_type
            .get(&EventType::Death)
            .copied()
            .unwrap_or(0)
            > 0
        {
            return bad("death codes cannot appear inside generated trajectories".into());
        }
        let v: usize = self.vocab_per_type.values().sum();
        if v == 0 {
            return bad("vocab_per_type is empty".into());
        }
        for t in self
            .vocab_per_type
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(t, _)| t)
        {
            match self.mean_gap_days.get(t) {
                Some(&m) if m.is_finite() && m >= 0.0 => {}
                _ => return bad(format!("mean_gap_days missing or invalid for {t}")),
            }
        }
        if self.n_risk_groups == 0 {
            return bad("n_risk_groups must be >= 1".into());
        }
        if self.group_weights.len() != self.n_risk_groups {
            return bad("group_weights length must equal n_risk_groups".into());
        }
        check_stochastic(&self.group_weights, "group_weights")?;
        if self.hazards.len() != self.n_risk_groups {
            return bad("hazards length must equal n_risk_groups".into());
        }
        if self.hazards.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return bad("hazards must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "sequence length range [{}, {}] invalid",
                self.min_len, self.max_len
            ));
        }
        if self.horizon_days == 0 {
            return bad("horizon_days must be positive".into());
        }
        match &self.chain {
            ChainSpec::Permutation {
                branch_weights,
                smoothing,
            } => {
                check_stochastic(branch_weights, "branch_weights")?;
                if !(0.0..=1.0).contains(smoothing) {
                    return bad("smoothing must lie in [0, 1]".into());
                }
            }
            ChainSpec::Explicit {
                initial,
                transitions,
            } => {
                if initial.len() != v {
                    return bad(format!(
                        "initial has {} entries, vocab is {v}",
                        initial.len()
                    ));
                }
                check_stochastic(initial, "initial")?;
                if transitions.len() != self.n_risk_groups {
                    return bad("one transition matrix per group required".into());
                }
                for (g, m) in transitions.iter().enumerate() {
                    if m.len() != v {
                        return bad(format!("transition matrix {g} must be {v}x{v}"));
                    }
                    for (i, row) in m.iter().enumerate() {
                        if row.len() != v {
                            return bad(format!("transition matrix {g} must be {v}x{v}"));
                        }
                        check_stochastic(row, &format!("transition[{g}][{i}]"))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// The generating process of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovOracle {
    pub codes: Vec<EventKey>,
    pub initial: Vec<f64>,
    /// `transitions[g][i][j] = P(next = j | current = i, group = g)`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub group_weights: Vec<f64>,
    pub hazards: Vec<f64>,
    pub mean_gap_days: BTreeMap<EventType, f64>,
    pub horizon_days: u32,
    pub assignments: BTreeMap<String, usize>,
}

fn permutation_chain(
    v: usize,
    weights: &[f64],
    smoothing: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut t = vec![vec![smoothing / v as f64; v]; v];
    for &w in weights {
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(rng);
        for (i, &j) in perm.iter().enumerate() {
            t[i][j] += (1.0 - smoothing) * w;
        }
    }
    t
}

impl MarkovOracle {
    /// Builds the chain structure (no patients yet). Structure randomness uses
    /// stream 0 of the master seed; patients use stream 1.
    pub fn from_spec(spec: &CohortSpec) -> Result<Self> {
        spec.validate()?;
        let codes = spec.codes();
        let v = codes.len();
        let (initial, transitions) = match &spec.chain {
            ChainSpec::Explicit {
                initial,
                transitions,
            } => (initial.clone(), transitions.clone()),
            ChainSpec::Permutation {
                branch_weights,
                smoothing,
            } => {
                let mut rng = rng_from(spec.seed);
                let transitions = (0..spec.n_risk_groups)
                    .map(|_| permutation_chain(v, branch_weights, *smoothing, &mut rng))
                    .collect();
                // Doubly stochastic: uniform start is already stationary.
                (vec![1.0 / v as f64; v], transitions)
            }
        };
        Ok(Self {
            codes,
            initial,
            transitions,
            group_weights: spec.group_weights.clone(),
            hazards: spec.hazards.clone(),
            mean_gap_days: spec.mean_gap_days.clone(),
            horizon_days: spec.horizon_days,
            assignments: BTreeMap::new(),
        })
    }

    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }

    pub fn n_groups(&self) -> usize {
        self.transitions.len()
    }

    pub fn code_index(&self, key: &EventKey) -> Option<usize> {
        self.codes.iter().position(|c| c == key)
    }

    /// Groups whose hazard exceeds the smallest hazard are labelled high risk.
    pub fn is_high_risk(&self, group: usize) -> bool {
        let min = self.hazards.iter().copied().fold(f64::INFINITY, f64::min);
        self.hazards[group] > min
    }

    pub fn group_of(&self, patient_id: &str) -> Result<usize> {
        self.assignments
            .get(patient_id)
            .copied()
            .ok_or_else(|| NepError::Validation(format!("patient `{patient_id}` not in oracle")))
    }

    /// Exact next-event distribution for a given group and history.
    pub fn next_event_dist_for_group(
        &self,
        group: usize,
        history: &[ClinicalEvent],
    ) -> Result<Vec<f64>> {
        let last = history
            .last()
            .ok_or_else(|| NepError::Validation("history is empty".into()))?;
        if group >= self.n_groups() {
            return Err(NepError::Validation(format!("group {group} out of range")));
        }
        let j = self
            .code_index(&last.key())
            .ok_or_else(|| NepError::UnknownToken(format!("{}:{}", last.event_type, last.value)))?;
        Ok(self.transitions[group][j].clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Draws a patient from this process with its own sub-seeded stream.
    pub fn sample_patient(
        &self,
        patient_id: String,
        rng: &mut ChaCha8Rng,
        min_len: usize,
        max_len: usize,
    ) -> (PatientRecord, usize) {
        let group = WeightedIndex::new(&self.group_weights)
            .expect("validated group weights")
            .sample(rng);
        let len = rng.random_range(min_len..=max_len);
        let start = WeightedIndex::new(&self.initial).expect("validated initial");
        let rows: Vec<WeightedIndex<f64>> = self.transitions[group]
            .iter()
            .map(|row| WeightedIndex::new(row).expect("validated row"))
            .collect();

        let mut events = Vec::with_capacity(len);
        let mut ts: u32 = 0;
        let mut state = start.sample(rng);
        for i in 0..len {
            if i > 0 {
                state = rows[state].sample(rng);
            }
            let key = &self.codes[state];
            let mean = self.mean_gap_days[&key.event_type];
            let gap = Geometric::new(1.0 / (1.0 + mean))
                .expect("valid geometric parameter")
                .sample(rng);
            ts = ts.saturating_add(gap.min(u32::MAX as u64) as u32);
            events.push(ClinicalEvent {
                event_type: key.event_type,
                value: key.value.clone(),
                ts,
            });
        }

        // Survival runs from the end of the observed history.
        let t = Exp::new(self.hazards[group])
            .expect("positive hazard")
            .sample(rng);
        let days = t.ceil().max(1.0);
        let survival = if days > self.horizon_days as f64 {
            Outcome::survival(self.horizon_days, false)
        } else {
            Outcome::survival(days as u32, true)
        };
        let outcomes = BTreeMap::from([
            (
                HIGH_RISK_TASK.to_string(),
                Outcome::binary(self.is_high_risk(group)),
            ),
            (SURVIVAL_TASK.to_string(), survival),
        ]);
        (
            PatientRecord {
                patient_id,
                events,
                outcomes,
            },
            group,
        )
    }

    /// Samples `n` patients, sub-seeding patient `i` with `seed ^ i` on
    /// stream 1. Parallel and sequential generation agree bit for bit.
    pub fn sample_cohort(
        &mut self,
        n: usize,
        seed: u64,
        id_prefix: &str,
        min_len: usize,
        max_len: usize,
    ) -> Vec<PatientRecord> {
        let width = n.to_string().len().max(4);
        let drawn: Vec<(PatientRecord, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = patient_rng(seed, i as u64);
                self.sample_patient(
                    format!("{id_prefix}{i:0width$}"),
                    &mut rng,
                    min_len,
                    max_len,
                )
            })
            .collect();
        let mut cohort = Vec::with_capacity(n);
        for (record, group) in drawn {
            self.assignments.insert(record.patient_id.clone(), group);
            cohort.push(record);
        }
        cohort
    }
}

pub fn patient_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = rng_from(seed ^ index);
    rng.set_stream(1);
    rng
}

/// Generates a cohort and the oracle that produced it. Deterministic in `spec.seed`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<(Vec<PatientRecord>, MarkovOracle)> {
    let mut oracle = MarkovOracle::from_spec(spec)?;
    let cohort = oracle.sample_cohort(
        spec.n_patients,
        spec.seed,
        &spec.id_prefix,
        spec.min_len,
        spec.max_len,
    );
    Ok((cohort, oracle))
}

/// `P(e_{t+1} | e_1..e_t)` for a patient of the cohort the oracle generated.
pub fn oracle_next_event_dist(
    oracle: &MarkovOracle,
    patient_id: &str,
    history: &[ClinicalEvent],
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(NepError::Validation("history is empty".into()));
    }
    let group = oracle.group_of(patient_id)?;
    oracle.next_event_dist_for_group(group, history)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// States reachable from `start` through positive-probability transitions.
fn reachable(t: &[Vec<f64>], start: usize, forward: bool) -> Vec<bool> {
    let n = t.len();
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let edge = if forward { t[i][j] } else { t[j][i] };
            if edge > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Closed communicating classes of the chain.
fn closed_classes(t: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = t.len();
    let fwd: Vec<Vec<bool>> = (0..n).map(|i| reachable(t, i, true)).collect();
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&j| fwd[i][j] && fwd[j][i]).collect();
        for &j in &class {
            assigned[j] = true;
        }
        // Closed iff nothing outside the class is reachable.
        let closed = (0..n).all(|j| !fwd[i][j] || class.contains(&j));
        if closed {
            classes.push(class);
        }
    }
    classes
}

/// Stationary distribution by power iteration on the lazy chain `(I + T) / 2`,
/// which shares the stationary law of `T` and converges for periodic chains.
pub fn stationary_distribution(t: &[Vec<f64>], tol: f64) -> Vec<f64> {
    let n = t.len();
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..10_000_000 {
        next.iter_mut().zip(&mu).for_each(|(x, m)| *x = 0.5 * m);
        for i in 0..n {
            let w = 0.5 * mu[i];
            if w == 0.0 {
                continue;
            }
            for (x, p) in next.iter_mut().zip(&t[i]) {
                *x += w * p;
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let delta: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if delta < tol {
            break;
        }
    }
    mu
}

fn restrict(t: &[Vec<f64>], class: &[usize]) -> Vec<Vec<f64>> {
    class
        .iter()
        .map(|&i| class.iter().map(|&j| t[i][j]).collect())
        .collect()
}

fn entropy_rate(t: &[Vec<f64>], mu: &[f64]) -> f64 {
    mu.iter().zip(t).map(|(m, row)| m * entropy(row)).sum()
}

/// Stationary-weighted entropy of the next event given the current one,
/// mixed over groups: `sum_g w_g sum_j mu_g[j] H(T_g[j, .])`. This is the
/// floor for the next-event cross-entropy once the group is identified.
pub fn oracle_conditional_entropy(oracle: &MarkovOracle) -> Result<f64> {
    let mut total = 0.0;
    for (g, t) in oracle.transitions.iter().enumerate() {
        let irreducible =
            reachable(t, 0, true).iter().all(|&x| x) && reachable(t, 0, false).iter().all(|&x| x);
        if !irreducible {
            let components = closed_classes(t)
                .into_iter()
                .map(|class| {
                    let sub = restrict(t, &class);
                    let mu = stationary_distribution(&sub, 1e-10);
                    let h = entropy_rate(&sub, &mu);
                    (class, h)
                })
                .collect();
            return Err(NepError::NonErgodic { components });
        }
        let mu = stationary_distribution(t, 1e-10);
        total += oracle.group_weights[g] * entropy_rate(t, &mu);
    }
    Ok(total)
}

/// Mean oracle entropy of the actual next events at the given positions,
/// i.e. the expected cross-entropy of a predictor that knows each patient's
/// group, evaluated on exactly these targets.
pub fn oracle_position_entropy(
    oracle: &MarkovOracle,
    cohort: &[PatientRecord],
    positions: &[(usize, usize)],
) -> Result<f64> {
    let mut sum = 0.0;
    for &(p, idx) in positions {
        let record = &cohort[p];
        let dist = oracle_next_event_dist(oracle, &record.patient_id, &record.events[..idx])?;
        sum += entropy(&dist);
    }
    Ok(sum / positions.len().max(1) as f64)
}

/// Empirical transition counts `[g][i][j]` over a generated cohort.
pub fn transition_counts(
    oracle: &MarkovOracle,
    cohort: &[PatientRecord],
) -> Result<Vec<Vec<Vec<u64>>>> {
    let v = oracle.n_codes();
    let mut counts = vec![vec![vec![0u64; v]; v]; oracle.n_groups()];
    for r in cohort {
        let g = oracle.group_of(&r.patient_id)?;
        let idx: Vec<usize> = r
            .events
            .iter()
            .map(|e| {
                oracle
                    .code_index(&e.key())
                    .ok_or_else(|| NepError::UnknownToken(e.value.clone()))
            })
            .collect::<Result<_>>()?;
        for w in idx.windows(2) {
            counts[g][w[0]][w[1]] += 1;
        }
    }
    Ok(counts)
}

/// Monte-Carlo draw of `n` transitions from the stationary chain of a group;
/// returns the mean negative log-probability (an entropy-rate estimate).
pub fn monte_carlo_entropy(t: &[Vec<f64>], n: usize, rng: &mut impl RngCore) -> f64 {
    let rows: Vec<WeightedIndex<f64>> = t.iter().map(|r| WeightedIndex::new(r).unwrap()).collect();
    let mut state = 0usize;
    for _ in 0..1000 {
        state = rows[state].sample(rng);
    }
    let mut sum = 0.0;
    for _ in 0..n {
        let next = rows[state].sample(rng);
        sum -= t[state][next].ln();
        state = next;
    }
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(chain: ChainSpec, v: usize) -> CohortSpec {
        CohortSpec {
            n_patients: 20,
            vocab_per_type: BTreeMap::from([(EventType::Lab, v)]),
            n_risk_groups: 1,
            group_weights: vec![1.0],
            chain,
            hazards: vec![0.01],
            mean_gap_days: BTreeMap::from([(EventType::Lab, 2.0)]),
            min_len: 5,
            max_len: 10,
            horizon_days: 365,
            seed: 3,
            id_prefix: "S".into(),
        }
    }

    #[test]
    fn identity_chain_is_absorbing() {
        let v = 4;
        let identity: Vec<Vec<f64>> = (0..v)
            .map(|i| (0..v).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let spec = small_spec(
            ChainSpec::Explicit {
                initial: vec![1.0, 0.0, 0.0, 0.0],
                transitions: vec![identity],
            },
            v,
        );
        let (cohort, oracle) = generate_cohort(&spec).unwrap();
        for r in &cohort {
            assert!(r.events.iter().all(|e| e.value == oracle.codes[0].value));
            r.validate().unwrap();
        }
        assert!(matches!(
            oracle_conditional_entropy(&oracle),
            Err(NepError::NonErgodic { ref components }) if components.len() == 4 && components.iter().all(|(_, h)| *h == 0.0)
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = CohortSpec {
            n_patients: 50,
            ..CohortSpec::default()
        };
        let (a, oa) = generate_cohort(&spec).unwrap();
        let (b, ob) = generate_cohort(&spec).unwrap();
        assert_eq!(
            crate::event_model::cohort_to_string(&a),
            crate::event_model::cohort_to_string(&b)
        );
        assert_eq!(
            serde_json::to_string(&oa).unwrap(),
            serde_json::to_string(&ob).unwrap()
        );
    }

    #[test]
    fn parallel_equals_sequential() {
        let spec = CohortSpec {
            n_patients: 40,
            ..CohortSpec::default()
        };
        let (cohort, oracle) = generate_cohort(&spec).unwrap();
        for (i, r) in cohort.iter().enumerate() {
            let mut rng = patient_rng(spec.seed, i as u64);
            let (seq, g) =
                oracle.sample_patient(r.patient_id.clone(), &mut rng, spec.min_len, spec.max_len);
            assert_eq!(&seq, r);
            assert_eq!(oracle.assignments[&r.patient_id], g);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let (_, oracle) = generate_cohort(&CohortSpec {
            n_patients: 1,
            ..CohortSpec::default()
        })
        .unwrap();
        assert!((oracle.initial.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for t in &oracle.transitions {
            for row in t {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn next_event_dist_is_transition_row() {
        let (cohort, oracle) = generate_cohort(&CohortSpec {
            n_patients: 5,
            ..CohortSpec::default()
        })
        .unwrap();
        let r = &cohort[2];
        let g = oracle.group_of(&r.patient_id).unwrap();
        let hist = &r.events[..4];
        let j = oracle.code_index(&hist[3].key()).unwrap();
        let dist = oracle_next_event_dist(&oracle, &r.patient_id, hist).unwrap();
        assert_eq!(dist, oracle.transitions[g][j]);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let unknown = ClinicalEvent::new(EventType::Lab, "NOPE", 0).unwrap();
        assert!(matches!(
            oracle_next_event_dist(&oracle, &r.patient_id, &[unknown]),
            Err(NepError::UnknownToken(_))
        ));
        assert!(oracle_next_event_dist(&oracle, &r.patient_id, &[]).is_err());
    }

    #[test]
    fn uniform_chain_entropy_is_log_k() {
        let v = 7;
        let uniform = vec![vec![1.0 / v as f64; v]; v];
        let spec = small_spec(
            ChainSpec::Explicit {
                initial: vec![1.0 / v as f64; v],
                transitions: vec![uniform],
            },
            v,
        );
        let (cohort, oracle) = generate_cohort(&spec).unwrap();
        let h = oracle_conditional_entropy(&oracle).unwrap();
        assert!((h - (v as f64).ln()).abs() < 1e-12);
        let dist =
            oracle_next_event_dist(&oracle, &cohort[0].patient_id, &cohort[0].events[..1]).unwrap();
        assert!(dist.iter().all(|&p| (p - 1.0 / v as f64).abs() < 1e-15));
    }

    #[test]
    fn cyclic_permutation_entropy_is_zero() {
        let v = 5;
        let cycle: Vec<Vec<f64>> = (0..v)
            .map(|i| {
                (0..v)
                    .map(|j| if j == (i + 1) % v { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let spec = small_spec(
            ChainSpec::Explicit {
                initial: vec![0.2; 5],
                transitions: vec![cycle],
            },
            v,
        );
        let oracle = MarkovOracle::from_spec(&spec).unwrap();
        assert_eq!(oracle_conditional_entropy(&oracle).unwrap(), 0.0);
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        // Random 10-token chain; the Monte-Carlo estimate is independent of
        // the power-iteration path.
        let v = 10;
        let mut rng = rng_from(99);
        let t: Vec<Vec<f64>> = (0..v)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let spec = small_spec(
            ChainSpec::Explicit {
                initial: vec![0.1; 10],
                transitions: vec![t.clone()],
            },
            v,
        );
        let oracle = MarkovOracle::from_spec(&spec).unwrap();
        let exact = oracle_conditional_entropy(&oracle).unwrap();
        let mc = monte_carlo_entropy(&t, 1_000_000, &mut rng_from(5));
        assert!((exact - mc).abs() < 0.005, "exact {exact} mc {mc}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = CohortSpec {
            hazards: vec![0.0, 0.1],
            ..CohortSpec::default()
        };
        assert!(s.validate().is_err());
        let s = CohortSpec {
            min_len: 10,
            max_len: 5,
            ..CohortSpec::default()
        };
        assert!(s.validate().is_err());
        let s = CohortSpec {
            chain: ChainSpec::Permutation {
                branch_weights: vec![0.5, 0.4],
                smoothing: 0.0,
            },
            ..CohortSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn timestamps_and_invariants_hold() {
        let (cohort, _) = generate_cohort(&CohortSpec {
            n_patients: 200,
            ..CohortSpec::default()
        })
        .unwrap();
        for r in &cohort {
            r.validate().unwrap();
            assert!(r.events.windows(2).all(|w| w[0].ts <= w[1].ts));
        }
    }
}
