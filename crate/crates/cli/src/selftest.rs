//! Fast end-to-end sanity checks, printed as one PASS/FAIL line each.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otpitch_core::estimators::{
    estimate_deterministic, estimate_stochastic, pitches_to_hz, EstimateOptions, Hyperparams,
};
use otpitch_core::evaluation::{cents_error, wasserstein2_1d};
use otpitch_core::grids::{
    cost_matrix, uniform_frequency_grid, uniform_pitch_grid, CostKind, FrequencyGrid, PitchGrid,
};
use otpitch_core::oracles::{
    min_cost_matching_sq, primal_value_stochastic, waterfill_bisection, waterfill_objective,
};
use otpitch_core::ot::{psi_column_update, stochastic_prox, wright_omega, ProxControl, ProxParams};
use otpitch_core::signal::{model_covariance, normalize_unit_variance, PitchComponent};
use otpitch_core::C64;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("PASS {name}");
        } else {
            println!("FAIL {name}: {detail}");
            self.failures += 1;
        }
    }
}

/// Runs the self-test suite; returns the number of failed checks.
pub fn run_selftest() -> usize {
    let mut report = Report { failures: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);

    // Water-filling against the bisection oracle.
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=30usize);
        let eps = rng.random_range(0.05..1.0);
        let eta = rng.random_range(0.0..2.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let b: Vec<f64> = a.iter().map(|&v| eps * v.ln()).collect();
        let fast = psi_column_update(&a, eta, eps);
        let oracle = waterfill_bisection(&b, eta);
        let gap = waterfill_objective(&a, &fast, eps) - waterfill_objective(&a, &oracle, eps);
        worst = worst.max(gap.abs());
    }
    report.check("waterfill-vs-bisection", worst < 1e-8, format!("gap {worst:.2e}"));

    // Wright omega residuals on a coarse grid.
    let mut worst: f64 = 0.0;
    for i in 0..=1000 {
        let x = -30.0 + 60.0 * i as f64 / 1000.0;
        let w = wright_omega(x);
        worst = worst.max((w + w.ln() - x).abs() / x.abs().max(1.0));
    }
    report.check("wright-omega-residual", worst <= 1e-12, format!("residual {worst:.2e}"));

    // 1-D Wasserstein-2 against the matching oracle.
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=4usize);
        let mut left = Vec::new();
        let mut right = Vec::new();
        for _ in 0..n {
            left.push(rng.random_range(0.0..3.0));
            right.push(rng.random_range(0.0..3.0));
        }
        let a: Vec<(f64, f64)> = left.iter().map(|&p| (p, 1.0)).collect();
        let b: Vec<(f64, f64)> = right.iter().map(|&p| (p, 1.0)).collect();
        let fast = wasserstein2_1d(&a, &b).unwrap();
        let oracle = (min_cost_matching_sq(&left, &right) / n as f64).sqrt();
        worst = worst.max((fast - oracle).abs());
    }
    report.check("wasserstein-vs-matching", worst < 1e-9, format!("gap {worst:.2e}"));

    // Tiny prox strong-duality style check against the primal value at the
    // returned plan.
    let fg = FrequencyGrid::from_freqs(vec![0.21, 0.55, 0.93, 1.4]).unwrap();
    let pg = PitchGrid::from_pitches(vec![0.11, 0.27]).unwrap();
    let cm = cost_matrix(&fg, &pg, CostKind::Normalized).unwrap();
    let params = ProxParams {
        gamma: 0.5,
        zeta: 1.0,
        eta: 0.2,
        beta: 0.0,
        epsilon: 1e-2,
        max_inner_iters: 50_000,
        inner_tol: 0.0,
    };
    let nu_prev = vec![0.5, 1.0, 0.7, 0.3];
    let u = vec![0.1, -0.2, 0.3, 0.0];
    let out = stochastic_prox(&nu_prev, &u, &cm, &params, ProxControl::default()).unwrap();
    let primal = primal_value_stochastic(&nu_prev, &u, &cm, &params, out.plan.entries());
    let margin_ok = out.diagnostics.margin_residual < 1e-9;
    report.check(
        "stochastic-prox-sanity",
        margin_ok && out.diagnostics.monotonicity_violations == 0 && primal.is_finite(),
        format!(
            "margin {:.2e}, violations {}",
            out.diagnostics.margin_residual, out.diagnostics.monotonicity_violations
        ),
    );

    // Clean single-pitch fixtures end to end (small grids).
    let fs = 8000.0;
    let fg = uniform_frequency_grid(200, 1e-3, std::f64::consts::PI).unwrap();
    let pg = uniform_pitch_grid(41, 150.0, 550.0, fs).unwrap();
    let snap = |w: f64| -> f64 {
        *fg.freqs()
            .iter()
            .min_by(|a, b| (*a - w).abs().total_cmp(&(*b - w).abs()))
            .unwrap()
    };
    let w0 = TAU * 200.0 / fs;
    let partials: Vec<f64> = (1..=3).map(|l| snap(l as f64 * w0)).collect();
    let comp = PitchComponent {
        f0_hz: 200.0,
        order: 3,
        amplitudes: vec![
            C64::new(0.5f64.sqrt(), 0.0),
            C64::new(0.3f64.sqrt(), 0.0),
            C64::new(0.2f64.sqrt(), 0.0),
        ],
        partial_freqs: partials.clone(),
        deviations: partials
            .iter()
            .enumerate()
            .map(|(i, &w)| w - (i + 1) as f64 * w0)
            .collect(),
        sample_rate: fs,
    };
    let r_hat = model_covariance(std::slice::from_ref(&comp), 166);
    let hyper = Hyperparams {
        max_outer_iters: 600,
        max_inner_iters: 300,
        inner_tol: 1e-8,
        ..Hyperparams::stochastic_sim_default()
    };
    let mut res =
        estimate_stochastic(&r_hat, &fg, &pg, &hyper, EstimateOptions::default()).unwrap();
    pitches_to_hz(&mut res.active_pitches, fs);
    let ok = res.active_pitches.len() == 1
        && cents_error(res.active_pitches[0].f0_hz, 200.0).abs() < 50.0;
    report.check(
        "stochastic-clean-fixture",
        ok,
        format!("pitches {:?}", res.estimated_f0s_hz()),
    );

    let y: Vec<C64> = comp.waveform(250);
    let (y, _) = normalize_unit_variance(&y).unwrap();
    let hyper = Hyperparams {
        max_outer_iters: 400,
        max_inner_iters: 300,
        inner_tol: 1e-8,
        ..Hyperparams::deterministic_sim_default()
    };
    let mut res = estimate_deterministic(&y, &fg, &pg, &hyper, EstimateOptions::default()).unwrap();
    pitches_to_hz(&mut res.active_pitches, fs);
    let found = res
        .active_pitches
        .iter()
        .any(|p| cents_error(p.f0_hz, 200.0).abs() < 50.0);
    report.check(
        "deterministic-clean-fixture",
        found && res.diagnostics.monotonicity_violations == 0,
        format!(
            "pitches {:?}, violations {} max_inc {:.3e}",
            res.estimated_f0s_hz(),
            res.diagnostics.monotonicity_violations,
            res.diagnostics.max_relative_increase
        ),
    );

    report.failures
}
