//! Evaluation metrics: cents errors, gross error rate with optimal
//! one-to-one matching, 1-D Wasserstein-2 distance between spectra, and
//! empirical CDFs.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Signed pitch error in cents: `1200 * log2(f_est / f_true)`.
pub fn cents_error(f_est: f64, f_true: f64) -> f64 {
    1200.0 * (f_est / f_true).log2()
}

/// Gross-error threshold: a quarter tone.
pub const GROSS_ERROR_CENTS: f64 = 50.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitchMatchReport {
    /// (true f0, estimated f0, signed cents error) per matched pair.
    pub pairs: Vec<(f64, f64, f64)>,
    pub unmatched_true: usize,
    pub unmatched_est: usize,
}

/// Matches estimates to true pitches one-to-one, minimizing the total
/// absolute cents error, and scores the gross error rate: matched pairs off
/// by more than 50 cents plus unmatched true pitches, over the number of
/// true pitches.
///
/// The optimal matching for this cost is order-preserving on the sorted
/// lists, so a sequence-alignment pass finds it; tests check it against
/// exhaustive enumeration.
pub fn match_and_ger(true_f0s: &[f64], est_f0s: &[f64]) -> Result<(PitchMatchReport, f64)> {
    if true_f0s.is_empty() {
        return Err(CoreError::invalid("need at least one true pitch"));
    }
    if true_f0s.iter().chain(est_f0s).any(|&f| f <= 0.0) {
        return Err(CoreError::invalid("frequencies must be positive"));
    }
    let mut t_sorted = true_f0s.to_vec();
    t_sorted.sort_by(f64::total_cmp);
    let mut e_sorted = est_f0s.to_vec();
    e_sorted.sort_by(f64::total_cmp);

    let k = t_sorted.len();
    let n = e_sorted.len();

    let report = if n == 0 {
        PitchMatchReport {
            pairs: Vec::new(),
            unmatched_true: k,
            unmatched_est: 0,
        }
    } else if n >= k {
        // Match every true pitch to a distinct estimate.
        let (pairs, used_est) = align(&t_sorted, &e_sorted);
        PitchMatchReport {
            unmatched_true: 0,
            unmatched_est: n - used_est,
            pairs,
        }
    } else {
        // Fewer estimates than true pitches: match every estimate.
        let (swapped, used) = align(&e_sorted, &t_sorted);
        PitchMatchReport {
            pairs: swapped.into_iter().map(|(e, t, _)| {
                let c = cents_error(e, t);
                (t, e, c)
            }).collect(),
            unmatched_true: k - used,
            unmatched_est: 0,
        }
    };

    let gross = report
        .pairs
        .iter()
        .filter(|(_, _, c)| c.abs() > GROSS_ERROR_CENTS)
        .count()
        + report.unmatched_true;
    let ger = gross as f64 / k as f64;
    Ok((report, ger))
}

/// Injective monotone alignment of all `short` items into `long` minimizing
/// total |cents|; both inputs sorted ascending, `short.len() <= long.len()`.
/// Returns ((short_i, long_j, cents) pairs, number of matched pairs).
fn align(short: &[f64], long: &[f64]) -> (Vec<(f64, f64, f64)>, usize) {
    let k = short.len();
    let n = long.len();
    let cost = |i: usize, j: usize| cents_error(long[j], short[i]).abs();
    // d[i][j]: min cost matching short[..i] into long[..j].
    let inf = f64::INFINITY;
    let mut d = vec![vec![inf; n + 1]; k + 1];
    for j in 0..=n {
        d[0][j] = 0.0;
    }
    for i in 1..=k {
        for j in i..=n {
            let skip = d[i][j - 1];
            let take = d[i - 1][j - 1] + cost(i - 1, j - 1);
            d[i][j] = skip.min(take);
        }
    }
    // Backtrack.
    let mut pairs = Vec::with_capacity(k);
    let (mut i, mut j) = (k, n);
    while i > 0 {
        if j > i && d[i][j] == d[i][j - 1] {
            j -= 1;
        } else {
            pairs.push((short[i - 1], long[j - 1], cents_error(long[j - 1], short[i - 1])));
            i -= 1;
            j -= 1;
        }
    }
    pairs.reverse();
    let matched = pairs.len();
    (pairs, matched)
}

/// Exact 1-D Wasserstein-2 distance between two nonnegative discrete
/// spectra given as (position, mass) atoms on the line; both are normalized
/// to unit total mass, then coupled by quantiles.
pub fn wasserstein2_1d(spec_a: &[(f64, f64)], spec_b: &[(f64, f64)]) -> Result<f64> {
    let prep = |spec: &[(f64, f64)], name: &str| -> Result<Vec<(f64, f64)>> {
        if spec.iter().any(|&(_, m)| m < 0.0) {
            return Err(CoreError::invalid(format!("{name}: masses must be >= 0")));
        }
        let total: f64 = spec.iter().map(|&(_, m)| m).sum();
        if total <= 0.0 {
            return Err(CoreError::invalid(format!("{name}: total mass must be positive")));
        }
        let mut atoms: Vec<(f64, f64)> = spec
            .iter()
            .filter(|&&(_, m)| m > 0.0)
            .map(|&(p, m)| (p, m / total))
            .collect();
        atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(atoms)
    };
    let a = prep(spec_a, "spec_a")?;
    let b = prep(spec_b, "spec_b")?;

    // Quantile coupling: walk both atom lists transporting the smaller
    // remaining mass at each step.
    let mut cost = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    loop {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(cost.max(0.0).sqrt())
}

/// Empirical CDF samples: sorted `(value, fraction <= value)` steps.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n as f64))
        .collect()
}

/// Median of a sample (mean of middle two for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
