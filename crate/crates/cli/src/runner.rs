//! Monte-Carlo sweep execution and single-run estimation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use otpitch_core::dictionary::DictionaryMode;
use otpitch_core::estimators::{
    estimate_deterministic_with, estimate_stochastic_with, pitches_to_hz, EstimateOptions,
    EstimationResult, EstimatorContext,
};
use otpitch_core::evaluation::{match_and_ger, wasserstein2_1d};
use otpitch_core::io::{write_signal_csv, GroundTruth};
use otpitch_core::signal::{
    add_noise, generate_multipitch, normalize_unit_variance, sample_autocovariance,
    MultiPitchSignal,
};

use crate::config::{trial_seed, ExperimentConfig, Method, Scenario};
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    /// Sweep point value (SNR dB, kappa, or grid count).
    pub point: f64,
    pub trial: usize,
    pub method: String,
    pub seed: u64,
    pub ger: f64,
    /// Wasserstein-2 distance of the debiased spectrum to the ground truth;
    /// absent when the debiased spectrum carries no mass.
    pub w2: Option<f64>,
    pub runtime_sec: f64,
    pub outer_iters: usize,
    pub converged: bool,
    pub timed_out: bool,
    pub est_count: usize,
    pub monotonicity_violations: usize,
    pub inner_monotonicity_violations: usize,
}

/// Everything needed to recompute a row's GER and W2 bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub scenario: String,
    pub point: f64,
    pub trial: usize,
    pub method: String,
    pub true_f0s_hz: Vec<f64>,
    /// Ground-truth spectral atoms (rad/sample, mass); powers for the
    /// covariance method, amplitudes for the waveform method.
    pub true_atoms: Vec<(f64, f64)>,
    pub est_f0s_hz: Vec<f64>,
    pub est_masses: Vec<f64>,
    /// Nonzero debiased-spectrum atoms (rad/sample, mass).
    pub spectrum_atoms: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultTable {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_record([
            "scenario",
            "point",
            "trial",
            "method",
            "seed",
            "ger",
            "w2",
            "runtime_sec",
            "outer_iters",
            "converged",
            "timed_out",
            "est_count",
            "monotonicity_violations",
            "inner_monotonicity_violations",
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.point.to_string(),
                r.trial.to_string(),
                r.method.clone(),
                r.seed.to_string(),
                r.ger.to_string(),
                r.w2.map(|v| v.to_string()).unwrap_or_default(),
                r.runtime_sec.to_string(),
                r.outer_iters.to_string(),
                r.converged.to_string(),
                r.timed_out.to_string(),
                r.est_count.to_string(),
                r.monotonicity_violations.to_string(),
                r.inner_monotonicity_violations.to_string(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(())
    }
}

/// A sweep plus the raw per-trial estimates backing it.
pub struct SweepOutput {
    pub table: ResultTable,
    pub raw: Vec<RawRecord>,
}

impl SweepOutput {
    /// Persists results.csv, results.json, raw.json and config.json.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        self.table.write_csv(&out_dir.join("results.csv"))?;
        write_json(&out_dir.join("results.json"), &self.table)?;
        write_json(&out_dir.join("raw.json"), &self.raw)?;
        write_json(&out_dir.join("config.json"), &self.table.config)?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(
        File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
    );
    serde_json::from_reader(r).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Per-point immutable state shared by all trials of that point.
struct PointContext {
    point: f64,
    snr_db: f64,
    kappa: f64,
    stoch: Option<EstimatorContext>,
    det: Option<EstimatorContext>,
}

fn point_params(scenario: Scenario, config: &ExperimentConfig, value: f64) -> (f64, f64, usize) {
    // Returns (snr_db, kappa, f_count) for a sweep point.
    match scenario {
        Scenario::SnrSweep => (value, config.signal.kappa, config.grids.f_count),
        Scenario::InharmonicitySweep => (config.signal.snr_db, value, config.grids.f_count),
        Scenario::GridpointSweep => (config.signal.snr_db, config.signal.kappa, value as usize),
        Scenario::SingleRun | Scenario::AudioFrames => {
            (config.signal.snr_db, config.signal.kappa, config.grids.f_count)
        }
    }
}

fn build_point_context(
    config: &ExperimentConfig,
    methods: &[Method],
    value: f64,
) -> Result<PointContext> {
    let (snr_db, kappa, f_count) = point_params(config.scenario, config, value);
    let fg = config.frequency_grid(f_count)?;
    let pg = config.pitch_grid()?;
    let stoch = if methods.contains(&Method::Stochastic) {
        Some(EstimatorContext::new(
            &fg,
            &pg,
            config.n_lags(),
            DictionaryMode::Lag,
        )?)
    } else {
        None
    };
    let det = if methods.contains(&Method::Deterministic) {
        Some(EstimatorContext::new(
            &fg,
            &pg,
            config.signal.n_samples,
            DictionaryMode::Time,
        )?)
    } else {
        None
    };
    Ok(PointContext {
        point: value,
        snr_db,
        kappa,
        stoch,
        det,
    })
}

/// Generates the trial signal (deterministic in the trial seed), runs the
/// requested estimators, and scores them.
fn run_trial(
    config: &ExperimentConfig,
    ctx: &PointContext,
    methods: &[Method],
    trial: usize,
) -> Result<(Vec<ResultRow>, Vec<RawRecord>)> {
    let seed = trial_seed(config.master_seed, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mp_config = config.multipitch_config(ctx.kappa)?;
    let signal = generate_multipitch(&mp_config, &mut rng).map_err(CliError::from)?;
    let noisy = add_noise(
        &signal.samples,
        ctx.snr_db,
        signal.total_amplitude_power(),
        &mut rng,
    );
    let (y, _) = normalize_unit_variance(&noisy).map_err(CliError::from)?;
    let deadline = Instant::now() + Duration::from_secs_f64(config.trial_timeout_secs);
    let options = EstimateOptions {
        deadline: Some(deadline),
        skip_debias: false,
    };

    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for &method in methods {
        let started = Instant::now();
        let mut result = match method {
            Method::Stochastic => {
                let r_hat =
                    sample_autocovariance(&y, config.n_lags()).map_err(CliError::from)?;
                let hyper = config.resolve_hyper(method);
                estimate_stochastic_with(ctx.stoch.as_ref().unwrap(), &r_hat, &hyper, options)
                    .map_err(CliError::from)?
            }
            Method::Deterministic => {
                let hyper = config.resolve_hyper(method);
                estimate_deterministic_with(ctx.det.as_ref().unwrap(), &y, &hyper, options)
                    .map_err(CliError::from)?
            }
        };
        let runtime = started.elapsed().as_secs_f64();
        pitches_to_hz(&mut result.active_pitches, config.signal.sample_rate);
        let (row, record) = score_trial(config, ctx, method, trial, seed, &signal, &result, runtime);
        rows.push(row);
        raw.push(record);
    }
    Ok((rows, raw))
}

#[allow(clippy::too_many_arguments)]
fn score_trial(
    config: &ExperimentConfig,
    ctx: &PointContext,
    method: Method,
    trial: usize,
    seed: u64,
    signal: &MultiPitchSignal,
    result: &EstimationResult,
    runtime_sec: f64,
) -> (ResultRow, RawRecord) {
    let truth = signal.true_f0s_hz();
    let est = result.estimated_f0s_hz();
    let (_, ger) = match_and_ger(&truth, &est).expect("truth is nonempty");

    let true_atoms = match method {
        Method::Stochastic => signal.power_atoms(),
        Method::Deterministic => signal.amplitude_atoms(),
    };
    let estimator_ctx = match method {
        Method::Stochastic => ctx.stoch.as_ref().unwrap(),
        Method::Deterministic => ctx.det.as_ref().unwrap(),
    };
    let spectrum_atoms = result.spectrum.atoms(&estimator_ctx.freq_grid);
    let w2 = if spectrum_atoms.is_empty() {
        None
    } else {
        wasserstein2_1d(&spectrum_atoms, &true_atoms).ok()
    };

    let row = ResultRow {
        scenario: config.scenario.name().to_string(),
        point: ctx.point,
        trial,
        method: method.name().to_string(),
        seed,
        ger,
        w2,
        runtime_sec,
        outer_iters: result.diagnostics.outer_iters,
        converged: result.diagnostics.converged,
        timed_out: result.diagnostics.timed_out,
        est_count: est.len(),
        monotonicity_violations: result.diagnostics.monotonicity_violations,
        inner_monotonicity_violations: result.diagnostics.inner_monotonicity_violations,
    };
    let record = RawRecord {
        scenario: config.scenario.name().to_string(),
        point: ctx.point,
        trial,
        method: method.name().to_string(),
        true_f0s_hz: truth,
        true_atoms,
        est_f0s_hz: est,
        est_masses: result.active_pitches.iter().map(|p| p.mass).collect(),
        spectrum_atoms,
    };
    (row, record)
}

/// Runs a Monte-Carlo sweep: for each sweep point and trial, generate,
/// corrupt, normalize, estimate with the requested methods, and score.
/// Trials run in parallel; outputs are index-ordered and bit-identical
/// across reruns and worker counts.
pub fn run_sweep(config: &ExperimentConfig, methods: &[Method]) -> Result<SweepOutput> {
    config.validate()?;
    let trials = config.trials();
    let points = config.sweep_values();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for &value in &points {
        let ctx = build_point_context(config, methods, value)?;
        let results: Vec<Result<(Vec<ResultRow>, Vec<RawRecord>)>> = pool.install(|| {
            (0..trials)
                .into_par_iter()
                .map(|trial| run_trial(config, &ctx, methods, trial))
                .collect()
        });
        for r in results {
            let (mut trial_rows, mut trial_raw) = r?;
            rows.append(&mut trial_rows);
            raw.append(&mut trial_raw);
        }
    }
    Ok(SweepOutput {
        table: ResultTable {
            config: config.clone(),
            rows,
        },
        raw,
    })
}

/// Generates one signal, writes it with its ground-truth sidecar, runs the
/// requested estimators, and writes estimates, spectra, and a summary.
pub fn run_simulate(config: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let seed = trial_seed(config.master_seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mp_config = config.multipitch_config(config.signal.kappa)?;
    let signal = generate_multipitch(&mp_config, &mut rng).map_err(CliError::from)?;
    let noisy = add_noise(
        &signal.samples,
        config.signal.snr_db,
        signal.total_amplitude_power(),
        &mut rng,
    );

    write_signal_csv(&out_dir.join("signal.csv"), &noisy).map_err(CliError::from)?;
    GroundTruth::from_signal(&signal, Some(config.signal.snr_db))
        .write_json(&out_dir.join("ground_truth.json"))
        .map_err(CliError::from)?;

    let (y, _) = normalize_unit_variance(&noisy).map_err(CliError::from)?;
    let fg = config.frequency_grid(config.grids.f_count)?;
    let pg = config.pitch_grid()?;
    let deadline = Instant::now() + Duration::from_secs_f64(config.trial_timeout_secs);
    let options = EstimateOptions {
        deadline: Some(deadline),
        skip_debias: false,
    };

    let mut summary = serde_json::Map::new();
    summary.insert(
        "true_f0s_hz".into(),
        serde_json::to_value(signal.true_f0s_hz()).unwrap(),
    );
    summary.insert("seed".into(), serde_json::to_value(seed).unwrap());

    for &method in methods {
        let hyper = config.resolve_hyper(method);
        let mut result = match method {
            Method::Stochastic => {
                let ctx = EstimatorContext::new(&fg, &pg, config.n_lags(), DictionaryMode::Lag)
                    .map_err(CliError::from)?;
                let r_hat =
                    sample_autocovariance(&y, config.n_lags()).map_err(CliError::from)?;
                estimate_stochastic_with(&ctx, &r_hat, &hyper, options).map_err(CliError::from)?
            }
            Method::Deterministic => {
                let ctx = EstimatorContext::new(
                    &fg,
                    &pg,
                    config.signal.n_samples,
                    DictionaryMode::Time,
                )
                .map_err(CliError::from)?;
                estimate_deterministic_with(&ctx, &y, &hyper, options).map_err(CliError::from)?
            }
        };
        pitches_to_hz(&mut result.active_pitches, config.signal.sample_rate);
        write_json(
            &out_dir.join(format!("estimate_{}.json", method.name())),
            &result,
        )?;
        let spectrum_csv = File::create(out_dir.join(format!("spectrum_{}.csv", method.name())))?;
        result
            .spectrum
            .write_csv(&fg, BufWriter::new(spectrum_csv))
            .map_err(CliError::from)?;
        let mut trace = csv::Writer::from_path(
            out_dir.join(format!("outer_objective_{}.csv", method.name())),
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        trace
            .write_record(["iter", "objective"])
            .map_err(|e| CliError::Data(e.to_string()))?;
        for (i, obj) in result.diagnostics.objective_trace.iter().enumerate() {
            trace
                .write_record([(i + 1).to_string(), obj.to_string()])
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
        trace.flush().map_err(|e| CliError::Data(e.to_string()))?;

        let (_, ger) = match_and_ger(&signal.true_f0s_hz(), &result.estimated_f0s_hz())
            .map_err(CliError::from)?;
        let atoms = result.spectrum.atoms(&fg);
        let true_atoms = match method {
            Method::Stochastic => signal.power_atoms(),
            Method::Deterministic => signal.amplitude_atoms(),
        };
        let w2 = if atoms.is_empty() {
            None
        } else {
            wasserstein2_1d(&atoms, &true_atoms).ok()
        };
        summary.insert(
            method.name().into(),
            serde_json::json!({
                "estimated_f0s_hz": result.estimated_f0s_hz(),
                "ger": ger,
                "w2": w2,
                "outer_iters": result.diagnostics.outer_iters,
                "converged": result.diagnostics.converged,
            }),
        );
    }
    write_json(&out_dir.join("summary.json"), &serde_json::Value::Object(summary))?;
    Ok(())
}
