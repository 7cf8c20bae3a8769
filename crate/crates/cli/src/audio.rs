//! Frame-wise pitch estimation for real recordings.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use otpitch_core::dictionary::DictionaryMode;
use otpitch_core::estimators::{
    estimate_deterministic_with, estimate_stochastic_with, pitches_to_hz, EstimateOptions,
    EstimatorContext,
};
use otpitch_core::io::{read_signal_csv, read_wav};
use otpitch_core::signal::{analytic_signal, normalize_unit_variance, sample_autocovariance};

use crate::config::{ExperimentConfig, Method};
use crate::runner::write_json;
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FramePitches {
    pub frame: usize,
    pub t_start_sec: f64,
    pub method: String,
    pub f0s_hz: Vec<f64>,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitchTrack {
    pub source: String,
    pub sample_rate: f64,
    pub frame_len: usize,
    pub frames: Vec<FramePitches>,
}

/// Splits the input into non-overlapping frames of `frame_ms`, converts each
/// to analytic form, normalizes to unit variance, and estimates pitches per
/// frame with the requested methods. Silent frames report empty tracks.
pub fn run_audio_frames(
    path: &Path,
    config: &ExperimentConfig,
    methods: &[Method],
    out_dir: &Path,
) -> Result<PitchTrack> {
    let (samples, sample_rate) = load_real(path, config)?;
    let frame_len = (config.audio.frame_ms / 1000.0 * sample_rate).round() as usize;
    if frame_len < 8 {
        return Err(CliError::Config(format!(
            "frame of {} ms at {} Hz is too short",
            config.audio.frame_ms, sample_rate
        )));
    }

    let fg = config.frequency_grid(config.grids.f_count)?;
    let pg = otpitch_core::grids::uniform_pitch_grid(
        config.grids.g_count,
        config.grids.pitch_lo_hz,
        config.grids.pitch_hi_hz,
        sample_rate,
    )
    .map_err(CliError::from)?;
    let n_lags = ((config.cov_lag_fraction * frame_len as f64).floor() as usize)
        .clamp(1, frame_len);

    let stoch_ctx = if methods.contains(&Method::Stochastic) {
        Some(
            EstimatorContext::new(&fg, &pg, n_lags, DictionaryMode::Lag)
                .map_err(CliError::from)?,
        )
    } else {
        None
    };
    let det_ctx = if methods.contains(&Method::Deterministic) {
        Some(
            EstimatorContext::new(&fg, &pg, frame_len, DictionaryMode::Time)
                .map_err(CliError::from)?,
        )
    } else {
        None
    };

    let mut frames = Vec::new();
    let n_frames = samples.len() / frame_len;
    for frame_idx in 0..n_frames {
        let chunk = &samples[frame_idx * frame_len..(frame_idx + 1) * frame_len];
        let t_start = (frame_idx * frame_len) as f64 / sample_rate;
        let power: f64 = chunk.iter().map(|v| v * v).sum::<f64>() / frame_len as f64;
        if power < 1e-12 {
            for &method in methods {
                frames.push(FramePitches {
                    frame: frame_idx,
                    t_start_sec: t_start,
                    method: method.name().to_string(),
                    f0s_hz: Vec::new(),
                    masses: Vec::new(),
                });
            }
            continue;
        }
        let analytic = analytic_signal(chunk);
        let (y, _) = normalize_unit_variance(&analytic).map_err(CliError::from)?;
        let deadline = Instant::now() + Duration::from_secs_f64(config.trial_timeout_secs);
        let options = EstimateOptions {
            deadline: Some(deadline),
            skip_debias: true,
        };
        for &method in methods {
            let hyper = config.resolve_hyper(method);
            let mut result = match method {
                Method::Stochastic => {
                    let r_hat = sample_autocovariance(&y, n_lags).map_err(CliError::from)?;
                    estimate_stochastic_with(stoch_ctx.as_ref().unwrap(), &r_hat, &hyper, options)
                        .map_err(CliError::from)?
                }
                Method::Deterministic => {
                    estimate_deterministic_with(det_ctx.as_ref().unwrap(), &y, &hyper, options)
                        .map_err(CliError::from)?
                }
            };
            pitches_to_hz(&mut result.active_pitches, sample_rate);
            frames.push(FramePitches {
                frame: frame_idx,
                t_start_sec: t_start,
                method: method.name().to_string(),
                f0s_hz: result.estimated_f0s_hz(),
                masses: result.active_pitches.iter().map(|p| p.mass).collect(),
            });
        }
    }

    let track = PitchTrack {
        source: path.display().to_string(),
        sample_rate,
        frame_len,
        frames,
    };
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("pitch_track.json"), &track)?;
    write_track_csv(&track, &out_dir.join("pitch_track.csv"))?;
    Ok(track)
}

fn load_real(path: &Path, config: &ExperimentConfig) -> Result<(Vec<f64>, f64)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "wav" => {
            let sig = read_wav(path).map_err(CliError::from)?;
            Ok((sig.samples, sig.sample_rate))
        }
        "csv" | "txt" => {
            let complex = read_signal_csv(path).map_err(CliError::from)?;
            Ok((
                complex.iter().map(|c| c.re).collect(),
                config.audio.csv_sample_rate,
            ))
        }
        other => Err(CliError::Data(format!(
            "unsupported input format '.{other}' (expected .wav or .csv)"
        ))),
    }
}

fn write_track_csv(track: &PitchTrack, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["frame", "t_start_sec", "method", "f0_hz", "mass"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for f in &track.frames {
        if f.f0s_hz.is_empty() {
            w.write_record([
                f.frame.to_string(),
                f.t_start_sec.to_string(),
                f.method.clone(),
                String::new(),
                String::new(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        for (f0, mass) in f.f0s_hz.iter().zip(&f.masses) {
            w.write_record([
                f.frame.to_string(),
                f.t_start_sec.to_string(),
                f.method.clone(),
                f0.to_string(),
                mass.to_string(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}
