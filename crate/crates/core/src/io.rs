//! Signal ingestion and emission.
//!
//! Reads mono WAV (16-bit integer and 32-bit float PCM) and plain-text CSV
//! (one sample per line). Generated signals are written as CSV with a JSON
//! ground-truth sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::signal::MultiPitchSignal;
use crate::{Result, C64};

/// A real mono signal plus its sample rate.
#[derive(Debug, Clone)]
pub struct RealSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// Reads a mono WAV file (16-bit int or 32-bit float samples).
pub fn read_wav(path: &Path) -> Result<RealSignal> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| CoreError::MalformedData(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CoreError::UnsupportedFormat(format!(
            "{} channels; only mono input is supported",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::MalformedData(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::MalformedData(e.to_string()))?,
        (fmt, bits) => {
            return Err(CoreError::UnsupportedFormat(format!(
                "{fmt:?} {bits}-bit WAV; supported: 16-bit int, 32-bit float"
            )));
        }
    };
    Ok(RealSignal {
        samples,
        sample_rate: spec.sample_rate as f64,
    })
}

/// Reads a plain-text CSV signal: one sample per line, either `re` or
/// `re,im`. Blank lines and `#` comments are skipped.
pub fn read_signal_csv(path: &Path) -> Result<Vec<C64>> {
    let file = File::open(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split(',');
        let re: f64 = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| CoreError::MalformedData(format!("line {}: bad sample", lineno + 1)))?;
        let im: f64 = match parts.next() {
            Some(s) => s.trim().parse().map_err(|_| {
                CoreError::MalformedData(format!("line {}: bad imaginary part", lineno + 1))
            })?,
            None => 0.0,
        };
        samples.push(C64::new(re, im));
    }
    if samples.is_empty() {
        return Err(CoreError::MalformedData("empty signal file".into()));
    }
    Ok(samples)
}

/// Writes a complex signal as CSV (`re,im` per line).
pub fn write_signal_csv(path: &Path, samples: &[C64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(w, "{},{}", s.re, s.im)?;
    }
    Ok(())
}

/// Ground-truth sidecar for a generated signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_rate: f64,
    pub n_samples: usize,
    pub snr_db: Option<f64>,
    pub components: Vec<GroundTruthComponent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthComponent {
    pub f0_hz: f64,
    pub order: usize,
    pub partial_freqs_rad: Vec<f64>,
    pub deviations_rad: Vec<f64>,
    /// (re, im) per partial.
    pub amplitudes: Vec<(f64, f64)>,
}

impl GroundTruth {
    pub fn from_signal(signal: &MultiPitchSignal, snr_db: Option<f64>) -> Self {
        GroundTruth {
            sample_rate: signal.sample_rate,
            n_samples: signal.n_samples,
            snr_db,
            components: signal
                .components
                .iter()
                .map(|c| GroundTruthComponent {
                    f0_hz: c.f0_hz,
                    order: c.order,
                    partial_freqs_rad: c.partial_freqs.clone(),
                    deviations_rad: c.deviations.clone(),
                    amplitudes: c.amplitudes.iter().map(|a| (a.re, a.im)).collect(),
                })
                .collect(),
        }
    }

    pub fn true_f0s_hz(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.f0_hz).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)
            .map_err(|e| CoreError::MalformedData(e.to_string()))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        serde_json::from_reader(r).map_err(|e| CoreError::MalformedData(e.to_string()))
    }
}
