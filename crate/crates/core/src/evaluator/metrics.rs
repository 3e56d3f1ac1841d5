use crate::error::{NepError, Result};

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NepError::Validation(format!(
            "{what} contain NaN or infinite values"
        )))
    }
}

/// Area under the ROC curve: `P(s+ > s-) + 0.5 P(s+ = s-)`, via midranks.
///
/// The Mann-Whitney statistic is accumulated in half-units as an integer, so
/// the result is the exact pair-count ratio.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(NepError::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores, "scores")?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(NepError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their (1-based) midrank.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let twice_mid = (start + end + 2) as u64;
        let pos_in_block = order[start..=end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_block;
        start = end + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. Pairs `(i, j)` with `time_i < time_j` and an
/// observed event at `i` are comparable; higher risk at `i` is concordant and
/// equal risk earns half credit. Equal times are never comparable.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(NepError::Validation(format!(
            "c_index inputs differ in length: {n} risks, {} times, {} events",
            times.len(),
            events.len()
        )));
    }
    check_finite(risks, "risk scores")?;
    check_finite(times, "times")?;

    // Dense risk ranks.
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && risks[by_risk[w]] != risks[by_risk[w - 1]] {
            r += 1;
        }
        rank[by_risk[w]] = r;
    }
    let n_ranks = r + 1;

    // Walk times from largest to smallest; the tree holds everyone with a
    // strictly later time than the current block.
    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick::new(n_ranks);
    let mut inserted: u64 = 0;
    let (mut twice_num, mut comparable) = (0u64, 0u64);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && times[by_time[end + 1]] == times[by_time[start]] {
            end += 1;
        }
        for &i in &by_time[start..=end] {
            if events[i] {
                let below = tree.below(rank[i]);
                let equal = tree.below(rank[i] + 1) - below;
                twice_num += 2 * below + equal;
                comparable += inserted;
            }
        }
        for &i in &by_time[start..=end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end + 1;
    }
    if comparable == 0 {
        return Err(NepError::NoComparablePairs);
    }
    Ok(twice_num as f64 / (2 * comparable) as f64)
}
