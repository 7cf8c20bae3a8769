//! Synthetic inharmonic multi-pitch signals, noise injection, analytic
//! signals, and autocovariance estimation.
//!
//! All generation is pure given an explicit RNG; values are immutable after
//! construction. Parallel Monte-Carlo trials each own an independent seeded
//! RNG.

use std::f64::consts::{PI, TAU};

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::{Result, C64};

/// What to do when a drawn partial lands at or above Nyquist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AliasingPolicy {
    /// Redraw the offending partial's deviation, hard failure after 100 tries.
    Resample,
    /// Fail immediately.
    Fail,
}

const MAX_ALIASING_ATTEMPTS: usize = 100;

/// One pitch: a truncated, approximately harmonic series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitchComponent {
    /// Fundamental frequency in Hz.
    pub f0_hz: f64,
    /// Harmonic count L.
    pub order: usize,
    /// Complex amplitude per partial (length L).
    pub amplitudes: Vec<C64>,
    /// Partial frequencies in rad/sample (length L), `l*w0 + deviation[l]`.
    pub partial_freqs: Vec<f64>,
    /// Inharmonicity offsets in rad/sample (length L).
    pub deviations: Vec<f64>,
    /// Sample rate the rad/sample values refer to.
    pub sample_rate: f64,
}

impl PitchComponent {
    /// Fundamental in rad/sample.
    pub fn omega0(&self) -> f64 {
        TAU * self.f0_hz / self.sample_rate
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(CoreError::invalid("order must be >= 1"));
        }
        if self.amplitudes.len() != self.order
            || self.partial_freqs.len() != self.order
            || self.deviations.len() != self.order
        {
            return Err(CoreError::invalid("component field lengths must equal order"));
        }
        let w0 = self.omega0();
        for (l, (&w, &d)) in self.partial_freqs.iter().zip(&self.deviations).enumerate() {
            let nominal = (l + 1) as f64 * w0;
            if (w - (nominal + d)).abs() > 1e-12 {
                return Err(CoreError::invalid("partial_freqs must equal l*w0 + deviation"));
            }
            if d.abs() >= w0 / 2.0 {
                return Err(CoreError::invalid(format!(
                    "deviation {d} of partial {} exceeds w0/2",
                    l + 1
                )));
            }
            if !(0.0..PI).contains(&w) {
                return Err(CoreError::Aliasing { omega: w, attempts: 0 });
            }
        }
        Ok(())
    }

    /// Time-domain waveform over `t = 0..n_samples-1`.
    pub fn waveform(&self, n_samples: usize) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); n_samples];
        for (&alpha, &w) in self.amplitudes.iter().zip(&self.partial_freqs) {
            // Incremental rotation is fast but drifts; direct evaluation keeps
            // partials exact at every t.
            for (t, y) in out.iter_mut().enumerate() {
                *y += alpha * Complex::from_polar(1.0, w * t as f64);
            }
        }
        out
    }

    /// Total amplitude power `sum_l |alpha_l|^2`.
    pub fn amplitude_power(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

/// A generated multi-pitch signal together with its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiPitchSignal {
    pub components: Vec<PitchComponent>,
    pub samples: Vec<C64>,
    pub sample_rate: f64,
    pub n_samples: usize,
}

impl MultiPitchSignal {
    pub fn true_f0s_hz(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.f0_hz).collect()
    }

    /// Total amplitude power across all components, `sum_k sum_l |alpha|^2`.
    pub fn total_amplitude_power(&self) -> f64 {
        self.components.iter().map(|c| c.amplitude_power()).sum()
    }

    /// Ground-truth spectral atoms as (rad/sample position, |amplitude|) pairs.
    pub fn amplitude_atoms(&self) -> Vec<(f64, f64)> {
        let mut atoms = Vec::new();
        for c in &self.components {
            for (&w, a) in c.partial_freqs.iter().zip(&c.amplitudes) {
                atoms.push((w, a.norm()));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    }

    /// Ground-truth power atoms as (rad/sample position, |amplitude|^2) pairs.
    pub fn power_atoms(&self) -> Vec<(f64, f64)> {
        self.amplitude_atoms()
            .into_iter()
            .map(|(w, a)| (w, a * a))
            .collect()
    }
}

/// Sample autocovariance lags `r(0..T-1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceSequence {
    pub lags: Vec<C64>,
}

impl CovarianceSequence {
    pub fn n_lags(&self) -> usize {
        self.lags.len()
    }

    pub fn r0(&self) -> f64 {
        self.lags[0].re
    }
}

/// Draws one inharmonic component. Each partial frequency is uniform on
/// `[l*w0*(1-kappa), l*w0*(1+kappa)]`; `kappa = 0` gives exact harmonics
/// (bit-level `l * w0`).
pub fn generate_component<R: Rng + ?Sized>(
    f0_hz: f64,
    order: usize,
    amplitudes: Vec<C64>,
    kappa: f64,
    sample_rate: f64,
    aliasing: AliasingPolicy,
    rng: &mut R,
) -> Result<PitchComponent> {
    if order == 0 {
        return Err(CoreError::invalid("order must be >= 1"));
    }
    if amplitudes.len() != order {
        return Err(CoreError::DimensionMismatch {
            expected: order,
            got: amplitudes.len(),
            context: "generate_component amplitudes",
        });
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(CoreError::invalid("kappa must lie in [0, 1]"));
    }
    if f0_hz <= 0.0 || sample_rate <= 0.0 {
        return Err(CoreError::invalid("f0 and sample rate must be positive"));
    }
    if f0_hz * order as f64 >= sample_rate / 2.0 {
        return Err(CoreError::invalid(format!(
            "highest nominal partial {} Hz at or above Nyquist {} Hz",
            f0_hz * order as f64,
            sample_rate / 2.0
        )));
    }
    if kappa * order as f64 >= 0.5 {
        return Err(CoreError::invalid(
            "kappa * order >= 1/2 cannot keep deviations below w0/2",
        ));
    }

    let w0 = TAU * f0_hz / sample_rate;
    let mut partial_freqs = Vec::with_capacity(order);
    let mut deviations = Vec::with_capacity(order);
    for l in 1..=order {
        let nominal = l as f64 * w0;
        let w = if kappa == 0.0 {
            nominal
        } else {
            let half = kappa * nominal;
            let mut w = rng.random_range(nominal - half..=nominal + half);
            let mut attempts = 1;
            while w >= PI {
                match aliasing {
                    AliasingPolicy::Fail => {
                        return Err(CoreError::Aliasing { omega: w, attempts });
                    }
                    AliasingPolicy::Resample => {
                        if attempts >= MAX_ALIASING_ATTEMPTS {
                            return Err(CoreError::Aliasing { omega: w, attempts });
                        }
                        w = rng.random_range(nominal - half..=nominal + half);
                        attempts += 1;
                    }
                }
            }
            w
        };
        if w >= PI {
            return Err(CoreError::Aliasing { omega: w, attempts: 1 });
        }
        partial_freqs.push(w);
        deviations.push(w - nominal);
    }

    let component = PitchComponent {
        f0_hz,
        order,
        amplitudes,
        partial_freqs,
        deviations,
        sample_rate,
    };
    component.validate()?;
    Ok(component)
}

/// Configuration for [`generate_multipitch`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiPitchConfig {
    /// Nominal fundamentals in Hz; one component per entry.
    pub nominals_hz: Vec<f64>,
    /// Half-width (Hz) of the uniform perturbation applied to each nominal.
    pub f0_jitter_hz: f64,
    /// Relative inharmonicity bound.
    pub kappa: f64,
    /// Inclusive harmonic-order range, drawn uniformly per component.
    pub order_range: (usize, usize),
    pub sample_rate: f64,
    pub n_samples: usize,
    pub aliasing: AliasingPolicy,
}

/// Draws a multi-pitch signal per the simulation protocol: each nominal
/// fundamental is perturbed uniformly by `±f0_jitter_hz`, harmonic orders are
/// uniform on `order_range`, magnitudes are 1 with phases uniform on
/// `[0, 2*pi)`.
///
/// RNG consumption order per component: f0 jitter, order, phases, partial
/// deviations. Identical seeds reproduce the signal bit-for-bit.
pub fn generate_multipitch<R: Rng + ?Sized>(
    config: &MultiPitchConfig,
    rng: &mut R,
) -> Result<MultiPitchSignal> {
    if config.nominals_hz.is_empty() {
        return Err(CoreError::invalid("need at least one nominal fundamental"));
    }
    if config.order_range.0 < 1 || config.order_range.0 > config.order_range.1 {
        return Err(CoreError::invalid("invalid order range"));
    }
    let mut components = Vec::with_capacity(config.nominals_hz.len());
    for &nominal in &config.nominals_hz {
        let f0 = if config.f0_jitter_hz > 0.0 {
            rng.random_range(nominal - config.f0_jitter_hz..=nominal + config.f0_jitter_hz)
        } else {
            nominal
        };
        let order = rng.random_range(config.order_range.0..=config.order_range.1);
        let amplitudes: Vec<C64> = (0..order)
            .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..TAU)))
            .collect();
        components.push(generate_component(
            f0,
            order,
            amplitudes,
            config.kappa,
            config.sample_rate,
            config.aliasing,
            rng,
        )?);
    }

    let mut samples = vec![C64::new(0.0, 0.0); config.n_samples];
    for c in &components {
        for (s, v) in samples.iter_mut().zip(c.waveform(config.n_samples)) {
            *s += v;
        }
    }
    Ok(MultiPitchSignal {
        components,
        samples,
        sample_rate: config.sample_rate,
        n_samples: config.n_samples,
    })
}

/// Adds circularly symmetric white Gaussian noise at the requested SNR.
///
/// `signal_power` is the ground-truth total amplitude power `sum |alpha|^2`;
/// the noise variance is `signal_power * 10^(-snr_db/10)`, split evenly
/// between real and imaginary parts. `snr_db = +inf` returns the input
/// unchanged.
pub fn add_noise<R: Rng + ?Sized>(
    x: &[C64],
    snr_db: f64,
    signal_power: f64,
    rng: &mut R,
) -> Vec<C64> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return x.to_vec();
    }
    let sigma2 = signal_power * 10f64.powf(-snr_db / 10.0);
    let normal = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("valid std dev");
    x.iter()
        .map(|&v| v + C64::new(normal.sample(rng), normal.sample(rng)))
        .collect()
}

/// Noise variance implied by the SNR definition, `sigma^2 = P * 10^(-snr/10)`.
pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    signal_power * 10f64.powf(-snr_db / 10.0)
}

/// Discrete analytic signal of a real input: the spectrum is zeroed on
/// negative frequencies (DC and Nyquist bins kept at unit weight, positive
/// bins doubled); the real part of the output equals the input exactly.
pub fn analytic_signal(x_real: &[f64]) -> Vec<C64> {
    let n = x_real.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![C64::new(x_real[0], 0.0)];
    }
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut buf: Vec<C64> = x_real.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft.process(&mut buf);

    // One-sided doubling.
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // DC and Nyquist stay at unit weight.
        } else if k < half || (n % 2 == 1 && k == half) {
            *v *= 2.0;
        } else {
            *v = C64::new(0.0, 0.0);
        }
    }
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter()
        .zip(x_real)
        .map(|(v, &x)| C64::new(x, v.im * scale))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceBias {
    /// 1/N normalization (default; stable, positive-semidefinite-leaning).
    Biased,
    /// 1/(N - tau) normalization.
    Unbiased,
}

/// Sample autocovariance with the biased 1/N normalization:
/// `r(tau) = (1/N) sum_{t=tau}^{N-1} y_t * conj(y_{t-tau})`.
pub fn sample_autocovariance(y: &[C64], n_lags: usize) -> Result<CovarianceSequence> {
    sample_autocovariance_with(y, n_lags, CovarianceBias::Biased)
}

pub fn sample_autocovariance_with(
    y: &[C64],
    n_lags: usize,
    bias: CovarianceBias,
) -> Result<CovarianceSequence> {
    let n = y.len();
    if n_lags == 0 || n_lags > n {
        return Err(CoreError::invalid(format!(
            "n_lags must satisfy 1 <= T <= N (T={n_lags}, N={n})"
        )));
    }
    let mut lags = Vec::with_capacity(n_lags);
    for tau in 0..n_lags {
        let mut acc = C64::new(0.0, 0.0);
        for t in tau..n {
            acc += y[t] * y[t - tau].conj();
        }
        let denom = match bias {
            CovarianceBias::Biased => n as f64,
            CovarianceBias::Unbiased => (n - tau) as f64,
        };
        lags.push(acc / denom);
    }
    Ok(CovarianceSequence { lags })
}

/// Exact model covariance `r(tau) = sum_k sum_l sigma_l^2 e^{i w_l tau}`,
/// with per-partial powers `sigma_l^2 = |amplitude_l|^2`.
pub fn model_covariance(components: &[PitchComponent], n_lags: usize) -> CovarianceSequence {
    let mut lags = Vec::with_capacity(n_lags);
    for tau in 0..n_lags {
        let mut acc = C64::new(0.0, 0.0);
        for c in components {
            for (&w, a) in c.partial_freqs.iter().zip(&c.amplitudes) {
                acc += a.norm_sqr() * Complex::from_polar(1.0, w * tau as f64);
            }
        }
        lags.push(acc);
    }
    CovarianceSequence { lags }
}

/// Scales the signal to unit mean power; returns the scaled signal and the
/// applied scale factor (multiply estimates by `1/scale` to undo).
pub fn normalize_unit_variance(y: &[C64]) -> Result<(Vec<C64>, f64)> {
    let power: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len().max(1) as f64;
    if power == 0.0 || y.is_empty() {
        return Err(CoreError::ZeroSignal);
    }
    let scale = 1.0 / power.sqrt();
    Ok((y.iter().map(|&v| v * scale).collect(), scale))
}

/// The simulation-study defaults: 4 pitches with nominals
/// {176, 197, 240, 272} Hz at 8000 Hz over 250 samples.
pub fn default_sim_config() -> MultiPitchConfig {
    MultiPitchConfig {
        nominals_hz: vec![176.0, 197.0, 240.0, 272.0],
        f0_jitter_hz: 0.5,
        kappa: 0.0,
        order_range: (3, 10),
        sample_rate: 8000.0,
        n_samples: 250,
        aliasing: AliasingPolicy::Resample,
    }
}
