//! Transport-plan machinery: entropy, mixed norms, the sorted water-filling
//! column subproblem, the Wright omega function, and the two
//! block-coordinate-descent dual solvers behind the proximal steps.
//!
//! Both solvers minimize a smooth dual in a frequency-margin variable
//! `lambda` (length F) and a sparsity variable `Psi` (F x G, constrained to
//! `||Psi||_{1,inf} <= eta`), alternating an exact closed-form `lambda`
//! update with exact per-column `Psi` updates. All exponentials are handled
//! in the log domain; `epsilon` down to 1e-7 is routine.
//!
//! Internally `Psi` and the cost matrix live transposed (G x F) so that both
//! the per-row log-sum-exp pass and the per-column water-filling pass stream
//! over contiguous memory; exponentials below the f64 underflow point are
//! skipped outright.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::grids::CostMatrix;
use crate::mat::MatF64;
use crate::{Result, C64};

/// Exponent cap; exp(700) is near the f64 overflow boundary.
const EXP_CLAMP: f64 = 700.0;
/// Exponents below this underflow to zero; skip the exp call.
const EXP_UNDERFLOW: f64 = -745.0;
/// Terms this far under a row max contribute nothing to a log-sum-exp.
const LSE_CUTOFF: f64 = -45.0;

/// Relative slack used when counting dual-objective monotonicity violations;
/// exact block minimization guarantees descent up to floating-point noise.
pub const MONOTONICITY_SLACK: f64 = 1e-10;

#[inline]
fn exp_fast(e: f64) -> f64 {
    if e < EXP_UNDERFLOW {
        0.0
    } else {
        e.min(EXP_CLAMP).exp()
    }
}

/// Nonnegative F x G coupling between the frequency grid (rows) and the
/// pitch-candidate grid (columns).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportPlan {
    entries: MatF64,
}

impl TransportPlan {
    pub fn new(entries: MatF64) -> Result<Self> {
        if entries.as_slice().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(CoreError::invalid("transport plan entries must be >= 0"));
        }
        Ok(Self { entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            entries: MatF64::zeros(rows, cols),
        }
    }

    pub fn entries(&self) -> &MatF64 {
        &self.entries
    }

    /// Row sums: the frequency-margin vector `M 1_G`.
    pub fn row_margins(&self) -> Vec<f64> {
        self.entries.row_sums()
    }

    /// Column sums: mass per pitch candidate, `M^T 1_F`.
    pub fn pitch_mass(&self) -> Vec<f64> {
        self.entries.col_sums()
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.as_slice().iter().sum()
    }
}

/// Mass per pitch candidate for a plan.
pub fn pitch_mass(plan: &TransportPlan) -> Vec<f64> {
    plan.pitch_mass()
}

/// Dual variables of a prox subproblem. `Psi` is stored transposed; the
/// exponential images `v = exp(lambda/eps)`, `K = exp(-C/eps)` and
/// `W = exp(psi/eps)` are materialized on demand and are finite in f64 only
/// for moderate exponents (the solvers themselves stay in the log domain).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    /// G x F (transposed) Psi with `||Psi||_{1,inf} <= eta`.
    psi_t: MatF64,
    pub epsilon: f64,
}

impl DualState {
    /// Psi in standard F x G orientation.
    pub fn psi_matrix(&self) -> MatF64 {
        MatF64::from_fn(self.psi_t.cols(), self.psi_t.rows(), |f, g| {
            self.psi_t.get(g, f)
        })
    }

    pub fn v(&self) -> Vec<f64> {
        self.lambda
            .iter()
            .map(|&l| (l / self.epsilon).exp())
            .collect()
    }

    pub fn k_matrix(&self, cost: &CostMatrix) -> MatF64 {
        let c = cost.entries();
        MatF64::from_fn(c.rows(), c.cols(), |f, g| {
            (-c.get(f, g) / self.epsilon).exp()
        })
    }

    pub fn w_matrix(&self) -> MatF64 {
        MatF64::from_fn(self.psi_t.cols(), self.psi_t.rows(), |f, g| {
            (self.psi_t.get(g, f) / self.epsilon).exp()
        })
    }

    /// The plan `M = diag(v) (K ⊙ W)` implied by the duals, from a single
    /// clamped exponent per entry.
    pub fn plan(&self, cost: &CostMatrix) -> TransportPlan {
        let ct = cost.entries_t();
        let f_n = ct.cols();
        let g_n = ct.rows();
        let mut entries = MatF64::zeros(f_n, g_n);
        for g in 0..g_n {
            let cost_row = ct.row(g);
            let psi_row = self.psi_t.row(g);
            for f in 0..f_n {
                let e = (self.lambda[f] + psi_row[f] - cost_row[f]) / self.epsilon;
                let v = exp_fast(e);
                if v != 0.0 {
                    entries.set(f, g, v);
                }
            }
        }
        TransportPlan { entries }
    }
}

/// Weights of one prox subproblem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProxParams {
    /// Outer step size.
    pub gamma: f64,
    /// Transport regularization weight.
    pub zeta: f64,
    /// Mixed-norm budget (>= 0).
    pub eta: f64,
    /// l1 weight; used by the deterministic prox (the stochastic loop folds
    /// its beta term into the gradient vector instead).
    pub beta: f64,
    /// Entropic regularization weight.
    pub epsilon: f64,
    pub max_inner_iters: usize,
    /// Relative dual-decrease stopping threshold.
    pub inner_tol: f64,
}

impl ProxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.epsilon > 0.0) {
            return Err(CoreError::invalid("gamma and epsilon must be positive"));
        }
        if self.zeta < 0.0 || self.eta < 0.0 || self.beta < 0.0 {
            return Err(CoreError::invalid("weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Runtime knobs for one prox call.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxControl<'a> {
    /// Warm-start duals from a previous call on the same cost matrix.
    pub warm: Option<&'a DualState>,
    /// Abort sweeps past this instant (best iterate is still returned).
    pub deadline: Option<Instant>,
    /// Record per-sweep (dual objective, margin residual) rows.
    pub collect_trace: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub sweep: usize,
    pub dual_objective: f64,
    pub margin_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxDiagnostics {
    pub sweeps: usize,
    pub converged: bool,
    /// Last relative dual decrement observed.
    pub last_decrement: f64,
    pub dual_objective: f64,
    /// Sweeps where the dual objective increased beyond MONOTONICITY_SLACK.
    pub monotonicity_violations: usize,
    pub max_relative_increase: f64,
    /// Stochastic: max |(M 1_G)_f - nu_f| / max nu. Deterministic: max
    /// violation of (M 1_G)_f >= |mu_f|.
    pub margin_residual: f64,
    /// Deterministic solver only: lambda entries clamped to 0.
    pub clamping_events: usize,
    pub timed_out: bool,
    pub trace: Option<Vec<TraceRow>>,
}

impl ProxDiagnostics {
    fn new() -> Self {
        ProxDiagnostics {
            sweeps: 0,
            converged: false,
            last_decrement: f64::INFINITY,
            dual_objective: f64::NAN,
            monotonicity_violations: 0,
            max_relative_increase: 0.0,
            margin_residual: 0.0,
            clamping_events: 0,
            timed_out: false,
            trace: None,
        }
    }
}

/// Writes a collected iteration trace as CSV
/// (`sweep,dual_objective,margin_residual`).
pub fn write_trace_csv<W: std::io::Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "sweep,dual_objective,margin_residual")?;
    for row in trace {
        writeln!(
            w,
            "{},{},{}",
            row.sweep, row.dual_objective, row.margin_residual
        )?;
    }
    Ok(())
}

/// Entropic regularizer `D(M) = sum m log m - m + 1`, with `0 log 0 = 0`.
/// Nonnegative, zero exactly when every entry is 1.
pub fn entropy_d(plan: &MatF64) -> Result<f64> {
    let mut acc = 0.0;
    for &m in plan.as_slice() {
        if m < 0.0 {
            return Err(CoreError::invalid("entropy_d requires nonnegative entries"));
        }
        acc += if m == 0.0 { 1.0 } else { m * m.ln() - m + 1.0 };
    }
    Ok(acc)
}

/// Mixed norm `||M||_{inf,1} = sum_g max_f |M_{f,g}|`.
pub fn mixed_norm_inf1(m: &MatF64) -> f64 {
    let mut col_max = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (cm, &v) in col_max.iter_mut().zip(m.row(r)) {
            *cm = cm.max(v.abs());
        }
    }
    col_max.iter().sum()
}

/// Dual norm `||Psi||_{1,inf} = max_g sum_f |Psi_{f,g}|`.
pub fn dual_norm_1inf(psi: &MatF64) -> f64 {
    let mut col_sum = vec![0.0f64; psi.cols()];
    for r in 0..psi.rows() {
        for (cs, &v) in col_sum.iter_mut().zip(psi.row(r)) {
            *cs += v.abs();
        }
    }
    col_sum.iter().fold(0.0, |a, &b| a.max(b))
}

/// Water-filling in the log domain. Given `b_f = eps * ln(a_f)`, returns the
/// minimizer of `sum_f a_f exp(psi_f / eps)` subject to `sum_f |psi_f| <= eta`:
/// `psi_f = -max(0, b_f - kappa*)` with the threshold `kappa*` spending the
/// budget exactly. Only entries within `eta` of `max b` can be active, so the
/// sort runs over that usually tiny candidate set.
pub fn psi_column_update_log(b: &[f64], eta: f64) -> Vec<f64> {
    let mut psi = vec![0.0; b.len()];
    let mut scratch = Vec::new();
    psi_column_update_log_into(b, eta, &mut psi, &mut scratch);
    psi
}

/// In-place variant used by the solvers' inner loop.
pub fn psi_column_update_log_into(
    b: &[f64],
    eta: f64,
    psi: &mut [f64],
    candidates: &mut Vec<(usize, f64)>,
) {
    debug_assert_eq!(b.len(), psi.len());
    psi.fill(0.0);
    if eta <= 0.0 || b.is_empty() {
        return;
    }
    let b_max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !b_max.is_finite() {
        return;
    }
    let floor = b_max - eta;
    candidates.clear();
    for (idx, &v) in b.iter().enumerate() {
        if v > floor {
            candidates.push((idx, v));
        }
    }
    candidates.sort_unstable_by(|x, y| y.1.total_cmp(&x.1));

    let mut prefix = 0.0;
    let mut kappa = b_max;
    for m in 0..candidates.len() {
        prefix += candidates[m].1;
        let k = (prefix - eta) / (m + 1) as f64;
        let next = candidates.get(m + 1).map_or(f64::NEG_INFINITY, |c| c.1);
        if k >= next {
            kappa = k;
            break;
        }
    }
    for &(idx, v) in candidates.iter() {
        let s = v - kappa;
        if s > 0.0 {
            psi[idx] = -s;
        }
    }
}

/// Water-filling on raw positive weights: the argmin of
/// `sum_f a_f exp(psi_f / eps)` over the `eta` budget ball.
pub fn psi_column_update(a: &[f64], eta: f64, epsilon: f64) -> Vec<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert!(a.iter().all(|&v| v > 0.0), "weights must be positive");
    let b: Vec<f64> = a.iter().map(|&v| epsilon * v.ln()).collect();
    psi_column_update_log(&b, eta)
}

/// Wright omega function: the unique `w > 0` with `w + log w = x`, by Newton
/// iteration from a piecewise initial guess. The residual satisfies
/// `|w + log w - x| <= 1e-12 * max(1, |x|)` throughout the working range;
/// for x below about -700 the value underflows and `exp(x)` is returned
/// (callers needing `log w` should use the identity `log w = x - w`).
pub fn wright_omega(x: f64) -> f64 {
    assert!(x.is_finite(), "wright_omega needs finite input");
    if x < -700.0 {
        return x.exp();
    }
    // Both branches satisfy log w0 < 1 + x, keeping the first Newton step
    // positive.
    let mut w = if x < 1.0 { x.exp() } else { x - x.ln() };
    let tol = 1e-13 * x.abs().max(1.0);
    for _ in 0..100 {
        let resid = w + w.ln() - x;
        if resid.abs() <= tol {
            break;
        }
        let step = resid * w / (w + 1.0);
        let mut next = w - step;
        if next <= 0.0 {
            next = w / 2.0;
        }
        w = next;
    }
    w
}

/// Equal-split limit plan: row `f` distributes `nu_f` uniformly over the
/// columns attaining the row minimum of the cost (ties within 1e-12).
pub fn zero_eta_limit_plan(nu: &[f64], cost: &CostMatrix) -> Result<TransportPlan> {
    if nu.len() != cost.n_freqs() {
        return Err(CoreError::DimensionMismatch {
            expected: cost.n_freqs(),
            got: nu.len(),
            context: "zero_eta_limit_plan margin",
        });
    }
    if nu.iter().any(|&v| v < 0.0) {
        return Err(CoreError::invalid("margin must be nonnegative"));
    }
    const TIE_TOL: f64 = 1e-12;
    let c = cost.entries();
    let mut entries = MatF64::zeros(c.rows(), c.cols());
    for f in 0..c.rows() {
        let row = c.row(f);
        let min = cost.c_min()[f];
        let ties: Vec<usize> = (0..row.len())
            .filter(|&g| row[g] - min <= TIE_TOL)
            .collect();
        let share = nu[f] / ties.len() as f64;
        for g in ties {
            entries.set(f, g, share);
        }
    }
    TransportPlan::new(entries)
}

/// Reusable block-coordinate-descent solver bound to one cost matrix and
/// one epsilon. The dual state persists across calls, so an outer loop gets
/// warm starts for free; everything hot streams over pitch-major (G x F)
/// buffers holding the already-scaled quantity `work = (Psi - C)/eps`.
pub struct BcdSolver {
    epsilon: f64,
    /// -C/eps, transposed (G x F).
    neg_c_scaled_t: MatF64,
    /// (Psi - C)/eps, transposed (G x F).
    work_t: MatF64,
    /// log xi_f = logsumexp_g work[f, g].
    log_xi: Vec<f64>,
    lam_scaled: Vec<f64>,
    /// Per-column water-filling thresholds (scaled units), warm-started
    /// across sweeps.
    kappa: Vec<f64>,
    scratch_max: Vec<f64>,
}

impl BcdSolver {
    pub fn new(cost: &CostMatrix, epsilon: f64) -> Self {
        assert!(epsilon > 0.0);
        let ct = cost.entries_t();
        let (g_n, f_n) = (ct.rows(), ct.cols());
        let mut neg_c_scaled_t = MatF64::zeros(g_n, f_n);
        for g in 0..g_n {
            let src = ct.row(g);
            let dst = neg_c_scaled_t.row_mut(g);
            for f in 0..f_n {
                dst[f] = -src[f] / epsilon;
            }
        }
        let work_t = neg_c_scaled_t.clone();
        BcdSolver {
            epsilon,
            neg_c_scaled_t,
            work_t,
            log_xi: vec![0.0; f_n],
            lam_scaled: vec![0.0; f_n],
            kappa: vec![f64::NEG_INFINITY; g_n],
            scratch_max: vec![0.0; f_n],
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.neg_c_scaled_t.cols()
    }

    pub fn n_pitches(&self) -> usize {
        self.neg_c_scaled_t.rows()
    }

    /// Resets Psi to zero.
    pub fn reset(&mut self) {
        self.work_t = self.neg_c_scaled_t.clone();
        self.kappa.fill(f64::NEG_INFINITY);
    }

    /// Imports an external Psi (F x G, budget-feasible).
    fn import_psi(&mut self, state: &DualState, eta: f64) -> Result<()> {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        if state.psi_t.rows() != g_n || state.psi_t.cols() != f_n {
            return Err(CoreError::DimensionMismatch {
                expected: f_n * g_n,
                got: state.psi_t.rows() * state.psi_t.cols(),
                context: "warm psi shape",
            });
        }
        let worst = (0..g_n)
            .map(|g| state.psi_t.row(g).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        if worst > eta + 1e-9 {
            return Err(CoreError::invalid("warm psi violates the eta budget"));
        }
        for g in 0..g_n {
            let psi_row = state.psi_t.row(g);
            let negc = self.neg_c_scaled_t.row(g);
            let dst = self.work_t.row_mut(g);
            for f in 0..f_n {
                dst[f] = psi_row[f] / self.epsilon + negc[f];
            }
        }
        self.kappa.fill(f64::NEG_INFINITY);
        Ok(())
    }

    fn refresh_log_xi(&mut self) {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        self.scratch_max.fill(f64::NEG_INFINITY);
        for g in 0..g_n {
            let row = self.work_t.row(g);
            for f in 0..f_n {
                if row[f] > self.scratch_max[f] {
                    self.scratch_max[f] = row[f];
                }
            }
        }
        self.log_xi.fill(0.0);
        for g in 0..g_n {
            let row = self.work_t.row(g);
            for f in 0..f_n {
                let e = row[f] - self.scratch_max[f];
                if e > LSE_CUTOFF {
                    self.log_xi[f] += e.exp();
                }
            }
        }
        for f in 0..f_n {
            self.log_xi[f] = self.scratch_max[f] + self.log_xi[f].ln();
        }
    }

    /// Exact per-column Psi minimization given lambda (natural units); all
    /// internal arithmetic stays in eps-scaled units. The budget threshold
    /// `kappa` solves the piecewise-linear equation
    /// `sum_f (b_f - kappa)_+ = eta/eps` with `b_f = (lambda_f - C_fg)/eps`;
    /// Newton from below identifies it exactly in a few passes (warm-started
    /// per column), after which active cells satisfy `work = kappa - lambda/eps`
    /// and inactive ones keep `work = -C/eps`.
    fn update_psi(&mut self, lambda: &[f64], eta: f64) {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        let eta_scaled = eta / self.epsilon;
        for f in 0..f_n {
            self.lam_scaled[f] = lambda[f] / self.epsilon;
        }
        if eta_scaled <= 0.0 {
            for g in 0..g_n {
                let negc = self.neg_c_scaled_t.row(g);
                self.work_t.row_mut(g).copy_from_slice(negc);
            }
            return;
        }
        let lam = &self.lam_scaled;
        for g in 0..g_n {
            let negc = self.neg_c_scaled_t.row(g);
            let mut b_max = f64::NEG_INFINITY;
            for f in 0..f_n {
                let b = lam[f] + negc[f];
                if b > b_max {
                    b_max = b;
                }
            }
            // Start below the root: T(b_max - eta_scaled) >= eta_scaled.
            let mut kappa = b_max - eta_scaled;
            let warm = self.kappa[g];
            if warm > kappa && warm < b_max {
                // Use the previous threshold when it is still below the root.
                let spend: f64 = (0..f_n)
                    .map(|f| (lam[f] + negc[f] - warm).max(0.0))
                    .sum();
                if spend >= eta_scaled {
                    kappa = warm;
                }
            }
            for _ in 0..128 {
                let mut spend = 0.0;
                let mut active = 0u32;
                for f in 0..f_n {
                    let d = lam[f] + negc[f] - kappa;
                    if d > 0.0 {
                        spend += d;
                        active += 1;
                    }
                }
                if active == 0 {
                    break;
                }
                let step = (spend - eta_scaled) / active as f64;
                if step <= f64::EPSILON * (kappa.abs() + eta_scaled.max(1.0)) {
                    break;
                }
                kappa += step;
            }
            self.kappa[g] = kappa;
            let dst = self.work_t.row_mut(g);
            for f in 0..f_n {
                let b = lam[f] + negc[f];
                dst[f] = if b > kappa { kappa - lam[f] } else { negc[f] };
            }
        }
    }

    /// Materializes the plan for a given lambda.
    pub fn plan(&self, lambda: &[f64]) -> TransportPlan {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        let mut entries = MatF64::zeros(f_n, g_n);
        for g in 0..g_n {
            let row = self.work_t.row(g);
            for f in 0..f_n {
                let v = exp_fast(lambda[f] / self.epsilon + row[f]);
                if v != 0.0 {
                    entries.set(f, g, v);
                }
            }
        }
        TransportPlan { entries }
    }

    /// Column sums of the plan without materializing it.
    pub fn pitch_mass(&self, lambda: &[f64]) -> Vec<f64> {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        let mut mass = vec![0.0; g_n];
        for g in 0..g_n {
            let row = self.work_t.row(g);
            let mut acc = 0.0;
            for f in 0..f_n {
                acc += exp_fast(lambda[f] / self.epsilon + row[f]);
            }
            mass[g] = acc;
        }
        mass
    }

    /// `<C, M> + eps D(M) + eta ||M||_{inf,1}` in one streaming pass.
    pub fn transport_term(&self, lambda: &[f64], eta: f64) -> f64 {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        let eps = self.epsilon;
        let mut lin = 0.0;
        let mut ent = 0.0; // sum over nonzero cells of m ln m - m
        let mut max_sum = 0.0;
        for g in 0..g_n {
            let row = self.work_t.row(g);
            let negc = self.neg_c_scaled_t.row(g);
            let mut col_max = 0.0f64;
            for f in 0..f_n {
                let e = lambda[f] / eps + row[f];
                if e <= EXP_UNDERFLOW {
                    continue;
                }
                let m = e.min(EXP_CLAMP).exp();
                lin += m * (-eps * negc[f]);
                ent += m * m.ln() - m;
                if m > col_max {
                    col_max = m;
                }
            }
            max_sum += col_max;
        }
        // Every cell contributes +1 to D.
        lin + eps * (ent + (f_n * g_n) as f64) + eta * max_sum
    }

    /// Materializes the dual state (Psi recovered from the work buffer).
    pub fn dual_state(&self, lambda: &[f64]) -> DualState {
        let f_n = self.n_freqs();
        let g_n = self.n_pitches();
        let mut psi_t = MatF64::zeros(g_n, f_n);
        for g in 0..g_n {
            let row = self.work_t.row(g);
            let negc = self.neg_c_scaled_t.row(g);
            let dst = psi_t.row_mut(g);
            for f in 0..f_n {
                let v = (row[f] - negc[f]) * self.epsilon;
                // Water-filling keeps Psi <= 0; clip float dust.
                dst[f] = if v.abs() < 1e-18 { 0.0 } else { v };
            }
        }
        DualState {
            lambda: lambda.to_vec(),
            psi_t,
            epsilon: self.epsilon,
        }
    }

    /// Row margins `M 1_G = exp(lambda/eps + log xi)` via the identity.
    fn margins_from_log_xi(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.n_freqs())
            .map(|f| exp_fast(lambda[f] / self.epsilon + self.log_xi[f]))
            .collect()
    }

    /// One Bregman prox solve for the covariance-domain estimator; the
    /// internal Psi state is the warm start and is left at the final point.
    pub fn run_stochastic(
        &mut self,
        log_nu0: &[f64],
        params: &ProxParams,
        deadline: Option<Instant>,
        collect_trace: bool,
    ) -> (Vec<f64>, Vec<f64>, ProxDiagnostics) {
        let f_n = self.n_freqs();
        debug_assert_eq!(log_nu0.len(), f_n);
        let eps = self.epsilon;
        let gz = params.gamma * params.zeta;
        let coef = eps / (1.0 + gz * eps);
        let mut lambda = vec![0.0; f_n];
        let mut trace = collect_trace.then(Vec::new);
        let mut diagnostics = ProxDiagnostics::new();

        let dual_objective = |lambda: &[f64], log_xi: &[f64]| -> f64 {
            let mut transport = 0.0;
            let mut linear = 0.0;
            for f in 0..f_n {
                transport += exp_fast(lambda[f] / eps + log_xi[f]);
                linear += exp_fast(log_nu0[f] - gz * lambda[f]);
            }
            gz * eps * transport + linear
        };

        let mut h_prev = f64::INFINITY;
        let mut have_lambda = false;
        for sweep in 1..=params.max_inner_iters.max(1) {
            if let Some(deadline) = deadline {
                if Instant::now() >= deadline {
                    diagnostics.timed_out = true;
                    break;
                }
            }
            self.refresh_log_xi();

            if have_lambda {
                let h = dual_objective(&lambda, &self.log_xi);
                diagnostics.dual_objective = h;
                let scale = h_prev.abs().max(1.0);
                if h > h_prev + MONOTONICITY_SLACK * scale {
                    diagnostics.monotonicity_violations += 1;
                    diagnostics.max_relative_increase =
                        diagnostics.max_relative_increase.max((h - h_prev) / scale);
                }
                let decrement = (h_prev - h) / scale;
                diagnostics.last_decrement = decrement;
                if let Some(t) = trace.as_mut() {
                    t.push(TraceRow {
                        sweep,
                        dual_objective: h,
                        margin_residual: 0.0,
                    });
                }
                if decrement.abs() < params.inner_tol {
                    diagnostics.converged = true;
                    diagnostics.sweeps = sweep;
                    break;
                }
                h_prev = h;
            }

            for f in 0..f_n {
                lambda[f] = coef * (log_nu0[f] - self.log_xi[f]);
            }
            have_lambda = true;
            self.update_psi(&lambda, params.eta);
            diagnostics.sweeps = sweep;
        }

        // Final lambda refresh keeps the margin identity nu = M 1_G exact.
        self.refresh_log_xi();
        for f in 0..f_n {
            lambda[f] = coef * (log_nu0[f] - self.log_xi[f]);
        }
        diagnostics.dual_objective = dual_objective(&lambda, &self.log_xi);

        let nu: Vec<f64> = (0..f_n)
            .map(|f| exp_fast(log_nu0[f] - gz * lambda[f]))
            .collect();
        let nu_max = nu.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-300);
        let margins = self.margins_from_log_xi(&lambda);
        diagnostics.margin_residual = margins
            .iter()
            .zip(&nu)
            .map(|(m, n)| (m - n).abs())
            .fold(0.0, f64::max)
            / nu_max;
        if let Some(t) = trace.as_mut() {
            if let Some(last) = t.last_mut() {
                last.margin_residual = diagnostics.margin_residual;
            }
        }
        diagnostics.trace = trace;
        (nu, lambda, diagnostics)
    }

    /// One prox solve for the waveform-domain estimator (magnitudes only;
    /// the caller re-attaches phases). Returns (rho, lambda, diagnostics).
    pub fn run_deterministic(
        &mut self,
        w: &[f64],
        params: &ProxParams,
        deadline: Option<Instant>,
        collect_trace: bool,
    ) -> (Vec<f64>, Vec<f64>, ProxDiagnostics) {
        let f_n = self.n_freqs();
        debug_assert_eq!(w.len(), f_n);
        let eps = self.epsilon;
        let gb = params.gamma * params.beta;
        let gz = params.gamma * params.zeta;
        let gze = gz * eps;
        let log_gze = gze.ln();
        let base: Vec<f64> = w.iter().map(|&m| (m - gb) / gze).collect();

        let mut lambda = vec![0.0; f_n];
        let mut trace = collect_trace.then(Vec::new);
        let mut diagnostics = ProxDiagnostics::new();

        let dual_objective = |lambda: &[f64], log_xi: &[f64]| -> f64 {
            let mut transport = 0.0;
            let mut quad = 0.0;
            for f in 0..f_n {
                transport += exp_fast(lambda[f] / eps + log_xi[f]);
                let r = (w[f] - gb - gz * lambda[f]).max(0.0);
                quad += 0.5 * r * r;
            }
            gze * transport + quad
        };

        let update_lambda = |lambda: &mut [f64], log_xi: &[f64]| -> usize {
            let mut clamped = 0;
            for f in 0..f_n {
                let x = log_xi[f] + base[f] - log_gze;
                let omega = wright_omega(x);
                // lambda = eps (log omega + log(gamma zeta eps) - log xi),
                // with log omega = x - omega avoiding cancellation.
                let l = eps * ((x - omega) + log_gze - log_xi[f]);
                if l < 0.0 {
                    lambda[f] = 0.0;
                    clamped += 1;
                } else {
                    lambda[f] = l;
                }
            }
            clamped
        };

        let mut h_prev = f64::INFINITY;
        let mut have_lambda = false;
        for sweep in 1..=params.max_inner_iters.max(1) {
            if let Some(deadline) = deadline {
                if Instant::now() >= deadline {
                    diagnostics.timed_out = true;
                    break;
                }
            }
            self.refresh_log_xi();

            if have_lambda {
                let h = dual_objective(&lambda, &self.log_xi);
                diagnostics.dual_objective = h;
                let scale = h_prev.abs().max(1.0);
                if h > h_prev + MONOTONICITY_SLACK * scale {
                    diagnostics.monotonicity_violations += 1;
                    diagnostics.max_relative_increase =
                        diagnostics.max_relative_increase.max((h - h_prev) / scale);
                }
                let decrement = (h_prev - h) / scale;
                diagnostics.last_decrement = decrement;
                if let Some(t) = trace.as_mut() {
                    t.push(TraceRow {
                        sweep,
                        dual_objective: h,
                        margin_residual: 0.0,
                    });
                }
                if decrement.abs() < params.inner_tol {
                    diagnostics.converged = true;
                    diagnostics.sweeps = sweep;
                    break;
                }
                h_prev = h;
            }

            diagnostics.clamping_events += update_lambda(&mut lambda, &self.log_xi);
            have_lambda = true;
            self.update_psi(&lambda, params.eta);
            diagnostics.sweeps = sweep;
        }

        self.refresh_log_xi();
        diagnostics.clamping_events += update_lambda(&mut lambda, &self.log_xi);
        diagnostics.dual_objective = dual_objective(&lambda, &self.log_xi);

        let rho: Vec<f64> = (0..f_n)
            .map(|f| (w[f] - gb - gz * lambda[f]).max(0.0))
            .collect();
        let margins = self.margins_from_log_xi(&lambda);
        diagnostics.margin_residual = margins
            .iter()
            .zip(&rho)
            .map(|(m, r)| (r - m).max(0.0))
            .fold(0.0, f64::max);
        if let Some(t) = trace.as_mut() {
            if let Some(last) = t.last_mut() {
                last.margin_residual = diagnostics.margin_residual;
            }
        }
        diagnostics.trace = trace;
        (rho, lambda, diagnostics)
    }
}

pub struct StochasticProxOutput {
    pub nu: Vec<f64>,
    pub plan: TransportPlan,
    pub dual: DualState,
    pub diagnostics: ProxDiagnostics,
}

/// Bregman (KL) proximal step for the covariance-domain estimator.
///
/// Solves `min_{nu >= 0} gamma <u, nu> + KL(nu, nu_prev) + gamma zeta S_c(nu)`
/// through its dual in `(lambda, Psi)`, alternating the closed-form lambda
/// update `lambda = eps/(1 + gamma zeta eps) (log nu0 - log xi)` (with
/// `nu0 = nu_prev ⊙ exp(-gamma u)`) and sorted water-filling per column.
/// The returned primal is `nu = nu0 ⊙ exp(-gamma zeta lambda)` with plan
/// `M = diag(v)(K ⊙ W)`; the margin identity `nu = M 1_G` holds by
/// construction at every lambda-consistent point.
pub fn stochastic_prox(
    nu_prev: &[f64],
    u: &[f64],
    cost: &CostMatrix,
    params: &ProxParams,
    control: ProxControl<'_>,
) -> Result<StochasticProxOutput> {
    params.validate()?;
    let f_n = cost.n_freqs();
    if nu_prev.len() != f_n || u.len() != f_n {
        return Err(CoreError::DimensionMismatch {
            expected: f_n,
            got: nu_prev.len().min(u.len()),
            context: "stochastic_prox inputs",
        });
    }
    if nu_prev.iter().any(|&v| !(v > 0.0)) {
        return Err(CoreError::invalid(
            "stochastic_prox requires strictly positive nu_prev (KL interior)",
        ));
    }
    let log_nu0: Vec<f64> = nu_prev
        .iter()
        .zip(u)
        .map(|(&n, &uf)| n.ln() - params.gamma * uf)
        .collect();
    let mut solver = BcdSolver::new(cost, params.epsilon);
    if let Some(warm) = control.warm {
        solver.import_psi(warm, params.eta)?;
    }
    let (nu, lambda, diagnostics) =
        solver.run_stochastic(&log_nu0, params, control.deadline, control.collect_trace);
    let plan = solver.plan(&lambda);
    let dual = solver.dual_state(&lambda);
    Ok(StochasticProxOutput {
        nu,
        plan,
        dual,
        diagnostics,
    })
}

pub struct DeterministicProxOutput {
    pub mu: Vec<C64>,
    pub plan: TransportPlan,
    pub dual: DualState,
    pub diagnostics: ProxDiagnostics,
}

/// Proximal operator for the waveform-domain estimator:
/// `prox_{gamma beta ||.||_1 + gamma zeta S(.)}(u)`.
///
/// The output is `e^{i angle(u)} ⊙ (|u| - gamma beta - gamma zeta lambda)_+`
/// where `lambda >= 0` solves the dual by BCD, alternating a Wright-omega
/// lambda update with water-filling Psi columns; lambda entries whose
/// unconstrained update goes negative are clamped to 0 (the exact coordinate
/// minimization under dual feasibility) and counted.
///
/// With `zeta = 0` the operator reduces to complex soft-thresholding.
pub fn deterministic_prox(
    u: &[C64],
    cost: &CostMatrix,
    params: &ProxParams,
    control: ProxControl<'_>,
) -> Result<DeterministicProxOutput> {
    params.validate()?;
    let f_n = cost.n_freqs();
    if u.len() != f_n {
        return Err(CoreError::DimensionMismatch {
            expected: f_n,
            got: u.len(),
            context: "deterministic_prox input",
        });
    }
    let g_n = cost.n_pitches();
    let w: Vec<f64> = u.iter().map(|c| c.norm()).collect();
    let phase: Vec<C64> = u
        .iter()
        .zip(&w)
        .map(|(c, &m)| if m > 0.0 { c / m } else { C64::new(1.0, 0.0) })
        .collect();

    if params.zeta == 0.0 {
        // Plain complex soft-thresholding; the transport term is off.
        let gb = params.gamma * params.beta;
        let mu: Vec<C64> = w
            .iter()
            .zip(&phase)
            .map(|(&m, &p)| p * (m - gb).max(0.0))
            .collect();
        let mut diagnostics = ProxDiagnostics::new();
        diagnostics.converged = true;
        diagnostics.last_decrement = 0.0;
        diagnostics.dual_objective = 0.0;
        return Ok(DeterministicProxOutput {
            mu,
            plan: TransportPlan::zeros(f_n, g_n),
            dual: DualState {
                lambda: vec![0.0; f_n],
                psi_t: MatF64::zeros(g_n, f_n),
                epsilon: params.epsilon,
            },
            diagnostics,
        });
    }

    let mut solver = BcdSolver::new(cost, params.epsilon);
    if let Some(warm) = control.warm {
        solver.import_psi(warm, params.eta)?;
    }
    let (rho, lambda, diagnostics) =
        solver.run_deterministic(&w, params, control.deadline, control.collect_trace);
    let mu: Vec<C64> = rho.iter().zip(&phase).map(|(&r, &p)| p * r).collect();
    let plan = solver.plan(&lambda);
    let dual = solver.dual_state(&lambda);
    Ok(DeterministicProxOutput {
        mu,
        plan,
        dual,
        diagnostics,
    })
}

/// Transport-term value `<C, M> + eps D(M) + eta ||M||_{inf,1}` at a plan.
pub fn transport_term(plan: &TransportPlan, cost: &CostMatrix, epsilon: f64, eta: f64) -> f64 {
    let m = plan.entries();
    cost.entries().frobenius_dot(m)
        + epsilon * entropy_d(m).expect("plan entries are nonnegative")
        + eta * mixed_norm_inf1(m)
}


#[cfg(test)]
mod duality_tests {
    use super::*;
    use crate::grids::{cost_matrix, CostKind, FrequencyGrid, PitchGrid};
    use crate::oracles::{primal_value_deterministic, primal_value_stochastic};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strong_duality_gap_vanishes_at_convergence() {
        // F=4, G=2 random instances: the primal value at the returned plan
        // agrees with the dual objective mapped back to the primal scale.
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let fg = FrequencyGrid::from_freqs(vec![0.21, 0.55, 0.93, 1.4]).unwrap();
        let pg = PitchGrid::from_pitches(vec![0.11, 0.27]).unwrap();
        let cm = cost_matrix(&fg, &pg, CostKind::Normalized).unwrap();
        for _ in 0..10 {
            let params = ProxParams {
                gamma: r.random_range(0.2..0.8),
                zeta: r.random_range(0.3..1.5),
                eta: r.random_range(0.0..0.5),
                beta: r.random_range(0.05..0.3),
                epsilon: 1e-2,
                max_inner_iters: 60_000,
                inner_tol: 0.0,
            };
            let fg_n = 4.0 * 2.0;
            let gz = params.gamma * params.zeta;

            let nu_prev: Vec<f64> = (0..4).map(|_| r.random_range(0.1..2.0)).collect();
            let u: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let out = stochastic_prox(&nu_prev, &u, &cm, &params, ProxControl::default()).unwrap();
            let primal = primal_value_stochastic(&nu_prev, &u, &cm, &params, out.plan.entries());
            // P* = -h + gamma zeta eps F G + sum nu_prev.
            let dual_primal = -out.diagnostics.dual_objective
                + gz * params.epsilon * fg_n
                + nu_prev.iter().sum::<f64>();
            assert!(
                (primal - dual_primal).abs() <= 1e-6 * primal.abs().max(1.0),
                "stochastic gap: {primal} vs {dual_primal}"
            );

            let uc: Vec<C64> = (0..4)
                .map(|_| C64::new(r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)))
                .collect();
            let w: Vec<f64> = uc.iter().map(|c| c.norm()).collect();
            let out = deterministic_prox(&uc, &cm, &params, ProxControl::default()).unwrap();
            let rho: Vec<f64> = out.mu.iter().map(|c| c.norm()).collect();
            let primal = primal_value_deterministic(&w, &cm, &params, &rho, out.plan.entries());
            // P* = -h + gamma zeta eps F G + 1/2 ||w||^2.
            let dual_primal = -out.diagnostics.dual_objective
                + gz * params.epsilon * fg_n
                + 0.5 * w.iter().map(|v| v * v).sum::<f64>();
            assert!(
                (primal - dual_primal).abs() <= 1e-6 * primal.abs().max(1.0),
                "deterministic gap: {primal} vs {dual_primal}"
            );
        }
    }

    #[test]
    fn trace_dump_writes_csv() {
        let fg = FrequencyGrid::from_freqs(vec![0.2, 0.5]).unwrap();
        let pg = PitchGrid::from_pitches(vec![0.1]).unwrap();
        let cm = cost_matrix(&fg, &pg, CostKind::Normalized).unwrap();
        let params = ProxParams {
            gamma: 0.5,
            zeta: 1.0,
            eta: 0.1,
            beta: 0.0,
            epsilon: 1e-2,
            max_inner_iters: 50,
            inner_tol: 1e-12,
        };
        let out = stochastic_prox(
            &[0.5, 0.8],
            &[0.1, -0.1],
            &cm,
            &params,
            ProxControl {
                collect_trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let trace = out.diagnostics.trace.as_ref().unwrap();
        assert!(!trace.is_empty());
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sweep,dual_objective,margin_residual\n"));
        assert_eq!(text.lines().count(), trace.len() + 1);
    }
}
