//! Frequency and pitch-candidate grids, and the harmonic ground costs.
//!
//! The unnormalized cost of assigning spectral mass at frequency `omega` to a
//! pitch candidate `omega0` is the squared distance from `omega` to the
//! closest positive harmonic `k * omega0`. The normalized cost divides by
//! `omega0^2`, which removes the systematic preference for sub-octave
//! candidates: a pitch at `omega0` is then preferred over `omega0 / 2`
//! whenever the inharmonic deviation stays below `omega0 / 3`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::mat::MatF64;
use crate::Result;

/// Uniform grid of analysis frequencies in `[0, pi)` rad/sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    freqs: Vec<f64>,
}

impl FrequencyGrid {
    /// Builds a grid from explicit frequencies; must be strictly increasing
    /// and contained in `[0, pi)`.
    pub fn from_freqs(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(CoreError::invalid("frequency grid must be nonempty"));
        }
        if freqs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::invalid(
                "frequency grid must be strictly increasing",
            ));
        }
        if freqs[0] < 0.0 || *freqs.last().unwrap() >= PI {
            return Err(CoreError::invalid("frequency grid must lie in [0, pi)"));
        }
        Ok(Self { freqs })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Grid of fundamental-frequency candidates in rad/sample, strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchGrid {
    pitches: Vec<f64>,
}

impl PitchGrid {
    pub fn from_pitches(pitches: Vec<f64>) -> Result<Self> {
        if pitches.is_empty() {
            return Err(CoreError::invalid("pitch grid must be nonempty"));
        }
        if pitches.iter().any(|&p| p <= 0.0) {
            return Err(CoreError::invalid("pitch candidates must be positive"));
        }
        if pitches.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::invalid("pitch grid must be strictly increasing"));
        }
        Ok(Self { pitches })
    }

    pub fn pitches(&self) -> &[f64] {
        &self.pitches
    }

    pub fn len(&self) -> usize {
        self.pitches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitches.is_empty()
    }

    /// Spacing between adjacent candidates; zero for a single-point grid.
    pub fn cell_width(&self) -> f64 {
        if self.pitches.len() < 2 {
            0.0
        } else {
            self.pitches[1] - self.pitches[0]
        }
    }

    /// Restriction to a subset of candidate indices (used for debiasing).
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let pitches: Vec<f64> = indices.iter().map(|&g| self.pitches[g]).collect();
        Self::from_pitches(pitches)
    }
}

/// `F` equally spaced points on `[lo, hi)`.
pub fn uniform_frequency_grid(count: usize, lo: f64, hi: f64) -> Result<FrequencyGrid> {
    if count < 2 {
        return Err(CoreError::invalid("frequency grid needs at least 2 points"));
    }
    if !(0.0 <= lo && lo < hi && hi <= PI) {
        return Err(CoreError::invalid(format!(
            "invalid frequency range [{lo}, {hi}); need 0 <= lo < hi <= pi"
        )));
    }
    let step = (hi - lo) / count as f64;
    FrequencyGrid::from_freqs((0..count).map(|k| lo + k as f64 * step).collect())
}

/// `G` equally spaced pitch candidates on `[lo_hz, hi_hz]` (inclusive ends),
/// converted to rad/sample.
pub fn uniform_pitch_grid(
    count: usize,
    lo_hz: f64,
    hi_hz: f64,
    sample_rate: f64,
) -> Result<PitchGrid> {
    if count == 0 {
        return Err(CoreError::invalid("pitch grid needs at least 1 point"));
    }
    if !(0.0 < lo_hz && lo_hz <= hi_hz) || sample_rate <= 0.0 {
        return Err(CoreError::invalid("invalid pitch range"));
    }
    let to_rad = 2.0 * PI / sample_rate;
    let pitches = if count == 1 {
        vec![lo_hz * to_rad]
    } else {
        let step = (hi_hz - lo_hz) / (count - 1) as f64;
        (0..count)
            .map(|k| (lo_hz + k as f64 * step) * to_rad)
            .collect()
    };
    PitchGrid::from_pitches(pitches)
}

/// Nearest positive harmonic index of `omega` relative to `omega0`.
///
/// The squared distance `(omega - k*omega0)^2` is quadratic and unimodal in
/// `k`, so the minimizer over positive integers is `floor(omega/omega0)` or
/// `ceil(omega/omega0)`, floored at 1.
#[inline]
pub fn nearest_harmonic(omega: f64, omega0: f64) -> usize {
    let q = omega / omega0;
    let k_lo = q.floor().max(1.0);
    let k_hi = q.ceil().max(1.0);
    if (omega - k_lo * omega0).abs() <= (omega - k_hi * omega0).abs() {
        k_lo as usize
    } else {
        k_hi as usize
    }
}

/// Squared distance (rad^2) from `omega` to its closest positive harmonic of
/// `omega0`: `min_{k >= 1} (omega - k*omega0)^2`.
pub fn ground_cost_unnormalized(omega: f64, omega0: f64) -> Result<f64> {
    if omega0 <= 0.0 {
        return Err(CoreError::invalid("omega0 must be positive"));
    }
    let k = nearest_harmonic(omega, omega0) as f64;
    let d = omega - k * omega0;
    Ok(d * d)
}

/// Normalized (unitless) harmonic ground cost: the unnormalized cost divided
/// by `omega0^2`, i.e. `min_{k >= 1} (omega/omega0 - k)^2`.
pub fn ground_cost(omega: f64, omega0: f64) -> Result<f64> {
    Ok(ground_cost_unnormalized(omega, omega0)? / (omega0 * omega0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostKind {
    Normalized,
    Unnormalized,
}

/// Dense ground-cost matrix over a frequency grid (rows) and pitch grid
/// (columns), with cached per-row minima and a cached transpose (the
/// solvers stream over pitch-major data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMatrix {
    entries: MatF64,
    entries_t: MatF64,
    c_min: Vec<f64>,
    kind: CostKind,
}

impl CostMatrix {
    pub fn entries(&self) -> &MatF64 {
        &self.entries
    }

    /// Transposed entries (G x F).
    pub fn entries_t(&self) -> &MatF64 {
        &self.entries_t
    }

    /// Per-row minimum cost, `c_min[f] = min_g C[f, g]`.
    pub fn c_min(&self) -> &[f64] {
        &self.c_min
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn n_freqs(&self) -> usize {
        self.entries.rows()
    }

    pub fn n_pitches(&self) -> usize {
        self.entries.cols()
    }

    /// Writes the matrix as CSV: one row per frequency, one column per pitch
    /// candidate, values only.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for r in 0..self.entries.rows() {
            let line: Vec<String> = self.entries.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Builds the cost matrix `C[f, g] = cost(omega_f, omega0_g)` for the given
/// kind, caching row minima.
pub fn cost_matrix(
    freq_grid: &FrequencyGrid,
    pitch_grid: &PitchGrid,
    kind: CostKind,
) -> Result<CostMatrix> {
    let cost_fn = match kind {
        CostKind::Normalized => ground_cost,
        CostKind::Unnormalized => ground_cost_unnormalized,
    };
    let f = freq_grid.len();
    let g = pitch_grid.len();
    let mut entries = MatF64::zeros(f, g);
    let mut c_min = vec![f64::INFINITY; f];
    for (fi, &omega) in freq_grid.freqs().iter().enumerate() {
        let row = entries.row_mut(fi);
        for (gi, &omega0) in pitch_grid.pitches().iter().enumerate() {
            let c = cost_fn(omega, omega0)?;
            row[gi] = c;
            if c < c_min[fi] {
                c_min[fi] = c;
            }
        }
    }
    let entries_t = MatF64::from_fn(g, f, |gi, fi| entries.get(fi, gi));
    Ok(CostMatrix {
        entries,
        entries_t,
        c_min,
        kind,
    })
}

/// Closed-form single-pitch score: total normalized cost of transporting the
/// mass distribution onto the harmonic set of `omega0`,
/// `S = sum_f c(omega_f, omega0) * m_f`.
pub fn single_pitch_score(masses: &[f64], freq_grid: &FrequencyGrid, omega0: f64) -> Result<f64> {
    if masses.len() != freq_grid.len() {
        return Err(CoreError::DimensionMismatch {
            expected: freq_grid.len(),
            got: masses.len(),
            context: "single_pitch_score masses",
        });
    }
    if masses.iter().any(|&m| m < 0.0) {
        return Err(CoreError::invalid("masses must be nonnegative"));
    }
    let mut s = 0.0;
    for (&m, &omega) in masses.iter().zip(freq_grid.freqs()) {
        s += ground_cost(omega, omega0)? * m;
    }
    Ok(s)
}

/// Bins spectral mass to harmonic indices of `omega0`: harmonic `k >= 1`
/// collects the mass on `((k - 1/2) omega0, (k + 1/2) omega0]`. Mass exactly
/// on an interval edge goes to the lower harmonic; mass at or below
/// `omega0 / 2` is dropped (no harmonic below the fundamental).
pub fn implied_harmonic_spectrum(
    masses: &[f64],
    freq_grid: &FrequencyGrid,
    omega0: f64,
) -> Result<BTreeMap<usize, f64>> {
    if omega0 <= 0.0 {
        return Err(CoreError::invalid("omega0 must be positive"));
    }
    if masses.len() != freq_grid.len() {
        return Err(CoreError::DimensionMismatch {
            expected: freq_grid.len(),
            got: masses.len(),
            context: "implied_harmonic_spectrum masses",
        });
    }
    let mut bins = BTreeMap::new();
    for (&m, &omega) in masses.iter().zip(freq_grid.freqs()) {
        if m == 0.0 {
            continue;
        }
        // Edge mass to the lower bin: k is the smallest integer with
        // omega <= (k + 1/2) omega0.
        let k = (omega / omega0 - 0.5).ceil() as i64;
        if k >= 1 {
            *bins.entry(k as usize).or_insert(0.0) += m;
        }
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn uniform_grid_three_points() {
        let g = uniform_frequency_grid(3, 0.0, PI).unwrap();
        assert_eq!(g.len(), 3);
        approx(g.freqs()[0], 0.0, 0.0);
        approx(g.freqs()[1], PI / 3.0, 1e-15);
        approx(g.freqs()[2], 2.0 * PI / 3.0, 1e-15);
    }

    #[test]
    fn uniform_grid_default_experiment_size() {
        let g = uniform_frequency_grid(2260, 0.0, PI).unwrap();
        assert_eq!(g.len(), 2260);
        // Spacing constant to within a couple of ulps of the grid values.
        let step = g.freqs()[1] - g.freqs()[0];
        let ulp = f64::EPSILON * PI;
        for w in g.freqs().windows(2) {
            assert!(((w[1] - w[0]) - step).abs() <= 2.0 * ulp);
        }
    }

    #[test]
    fn uniform_grid_rejects_bad_range() {
        assert!(uniform_frequency_grid(8, 1.0, 0.5).is_err());
        assert!(uniform_frequency_grid(8, -0.1, 1.0).is_err());
        assert!(uniform_frequency_grid(1, 0.0, 1.0).is_err());
        assert!(uniform_frequency_grid(8, 0.0, PI + 0.1).is_err());
    }

    #[test]
    fn unnormalized_cost_on_and_between_harmonics() {
        let w0 = 0.21;
        approx(ground_cost_unnormalized(3.0 * w0, w0).unwrap(), 0.0, 1e-30);
        // Midpoint between k=1 and k=2.
        approx(
            ground_cost_unnormalized(1.5 * w0, w0).unwrap(),
            (0.5 * w0).powi(2),
            1e-16,
        );
    }

    #[test]
    fn normalized_cost_examples() {
        let w0 = 0.3;
        for k in 1..=5 {
            approx(ground_cost(k as f64 * w0, w0).unwrap(), 0.0, 1e-28);
        }
        // Below the first harmonic the k=1 branch applies.
        approx(ground_cost(0.5 * w0, w0).unwrap(), 0.25, 1e-15);
    }

    #[test]
    fn normalized_is_unnormalized_over_w0_squared_exactly() {
        let freqs: Vec<f64> = (1..200).map(|i| i as f64 * PI / 200.0).collect();
        for &w0 in &[0.037, 0.11, 0.39] {
            for &w in &freqs {
                let a = ground_cost(w, w0).unwrap();
                let b = ground_cost_unnormalized(w, w0).unwrap() / (w0 * w0);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn argmin_matches_brute_force_scan() {
        let freqs: Vec<f64> = (0..300).map(|i| i as f64 * PI / 300.0).collect();
        for &w0 in &[0.021, 0.093, 0.2, 0.41] {
            for &w in &freqs {
                let fast = ground_cost_unnormalized(w, w0).unwrap();
                let k_max = (w / w0).ceil() as usize + 1;
                let brute = (1..=k_max.max(2))
                    .map(|k| (w - k as f64 * w0).powi(2))
                    .fold(f64::INFINITY, f64::min);
                approx(fast, brute, 1e-18);
            }
        }
    }

    #[test]
    fn sub_octave_monotonicity_of_unnormalized_cost() {
        let grid = uniform_frequency_grid(500, 0.0, PI).unwrap();
        for &w0 in &[0.08, 0.17, 0.35] {
            for &w in grid.freqs() {
                let half = ground_cost_unnormalized(w, w0 / 2.0).unwrap();
                let full = ground_cost_unnormalized(w, w0).unwrap();
                assert!(half <= full + 1e-18, "w={w} w0={w0}");
            }
        }
    }

    #[test]
    fn normalized_cost_prefers_w0_iff_deviation_below_third() {
        // c(k w0 + d, w0) < c(k w0 + d, w0/2) exactly when |d| < w0/3.
        let w0 = 0.2;
        for k in 1..=6 {
            for i in 1..100 {
                let frac = i as f64 / 200.0; // |d|/w0 in (0, 0.5)
                if (frac - 1.0 / 3.0).abs() < 1e-9 {
                    continue;
                }
                for sign in [-1.0, 1.0] {
                    let w = k as f64 * w0 + sign * frac * w0;
                    let at_w0 = ground_cost(w, w0).unwrap();
                    let at_half = ground_cost(w, w0 / 2.0).unwrap();
                    if frac < 1.0 / 3.0 {
                        assert!(at_w0 < at_half, "k={k} frac={frac}");
                    } else {
                        assert!(at_w0 >= at_half, "k={k} frac={frac}");
                    }
                }
            }
        }
    }

    #[test]
    fn cost_matrix_matches_scalar_calls_and_caches_minima() {
        let fg = FrequencyGrid::from_freqs(vec![0.05, 0.21, 0.33, 0.49, 0.82, 1.77]).unwrap();
        let pg = PitchGrid::from_pitches(vec![0.11, 0.21, 0.37]).unwrap();
        for kind in [CostKind::Normalized, CostKind::Unnormalized] {
            let cm = cost_matrix(&fg, &pg, kind).unwrap();
            for (fi, &w) in fg.freqs().iter().enumerate() {
                let mut row_min = f64::INFINITY;
                for (gi, &w0) in pg.pitches().iter().enumerate() {
                    let want = match kind {
                        CostKind::Normalized => ground_cost(w, w0).unwrap(),
                        CostKind::Unnormalized => ground_cost_unnormalized(w, w0).unwrap(),
                    };
                    assert_eq!(cm.entries().get(fi, gi), want);
                    row_min = row_min.min(want);
                }
                assert_eq!(cm.c_min()[fi], row_min);
            }
        }
    }

    #[test]
    fn cost_matrix_trivial_1x1() {
        let fg = FrequencyGrid::from_freqs(vec![0.2]).unwrap();
        let pg = PitchGrid::from_pitches(vec![0.2]).unwrap();
        let cm = cost_matrix(&fg, &pg, CostKind::Normalized).unwrap();
        assert_eq!(cm.entries().get(0, 0), 0.0);
        assert_eq!(cm.c_min(), &[0.0]);
    }

    #[test]
    fn single_pitch_score_cases() {
        let fg = FrequencyGrid::from_freqs(vec![0.2, 0.4, 0.6, 0.7]).unwrap();
        // Mass only on harmonics of 0.2 scores zero.
        let s = single_pitch_score(&[1.0, 2.0, 3.0, 0.0], &fg, 0.2).unwrap();
        approx(s, 0.0, 1e-24);
        // Zero mass scores zero.
        let s = single_pitch_score(&[0.0; 4], &fg, 0.17).unwrap();
        assert_eq!(s, 0.0);
        // Random masses equal the explicit dot product.
        let masses = [0.3, 0.1, 0.7, 0.2];
        let s = single_pitch_score(&masses, &fg, 0.13).unwrap();
        let want: f64 = masses
            .iter()
            .zip(fg.freqs())
            .map(|(&m, &w)| m * ground_cost(w, 0.13).unwrap())
            .sum();
        approx(s, want, 1e-15);
    }

    #[test]
    fn implied_spectrum_binning_and_ties() {
        let w0 = 0.25;
        let fg = FrequencyGrid::from_freqs(vec![0.6 * w0, 1.5 * w0, 2.4 * w0]).unwrap();
        let bins = implied_harmonic_spectrum(&[1.0, 2.0, 4.0], &fg, w0).unwrap();
        // 0.6 w0 -> k=1; 1.5 w0 is the 1/2 edge between 1 and 2 -> lower k=1;
        // 2.4 w0 -> k=2.
        assert_eq!(bins.get(&1), Some(&3.0));
        assert_eq!(bins.get(&2), Some(&4.0));
        assert_eq!(bins.len(), 2);
    }

    #[test]
    fn implied_spectrum_conserves_mass_above_half_w0() {
        let w0 = 0.21;
        let freqs: Vec<f64> = (1..150).map(|i| i as f64 * PI / 150.1).collect();
        let masses: Vec<f64> = freqs.iter().map(|w| (w * 7.3).sin().abs()).collect();
        let fg = FrequencyGrid::from_freqs(freqs.clone()).unwrap();
        let bins = implied_harmonic_spectrum(&masses, &fg, w0).unwrap();
        let binned: f64 = bins.values().sum();
        let above: f64 = freqs
            .iter()
            .zip(&masses)
            .filter(|(&w, _)| w > 0.5 * w0)
            .map(|(_, &m)| m)
            .sum();
        approx(binned, above, 1e-12);
    }

    #[test]
    fn cost_matrix_csv_export() {
        let fg = FrequencyGrid::from_freqs(vec![0.2, 0.4]).unwrap();
        let pg = PitchGrid::from_pitches(vec![0.1, 0.2]).unwrap();
        let cm = cost_matrix(&fg, &pg, CostKind::Unnormalized).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: Vec<f64> = text
            .lines()
            .next()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first.len(), 2);
        assert_eq!(first[0], cm.entries().get(0, 0));
    }

    #[test]
    fn pitch_grid_validation() {
        assert!(PitchGrid::from_pitches(vec![]).is_err());
        assert!(PitchGrid::from_pitches(vec![0.0, 0.1]).is_err());
        assert!(PitchGrid::from_pitches(vec![0.2, 0.1]).is_err());
        let pg = uniform_pitch_grid(451, 50.0, 500.0, 8000.0).unwrap();
        assert_eq!(pg.len(), 451);
        approx(pg.pitches()[0], 2.0 * PI * 50.0 / 8000.0, 1e-15);
        approx(
            *pg.pitches().last().unwrap(),
            2.0 * PI * 500.0 / 8000.0,
            1e-15,
        );
    }
}
