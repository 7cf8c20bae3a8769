//! Frame-wise audio estimation against synthesized fixtures.

use std::f64::consts::TAU;

use otpitch_cli::audio::run_audio_frames;
use otpitch_cli::config::{ExperimentConfig, Method, Scenario};
use otpitch_core::evaluation::cents_error;

fn write_wav(path: &std::path::Path, sample_rate: u32, samples: &[f64]) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s as f32).unwrap();
    }
    w.finalize().unwrap();
}

fn audio_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::for_scenario(Scenario::AudioFrames);
    // Desk-scale grids keep the per-frame solves quick.
    config.grids.f_count = 1130;
    config.grids.g_count = 151;
    config.grids.pitch_lo_hz = 100.0;
    config.grids.pitch_hi_hz = 400.0;
    config.deterministic.max_outer_iters = Some(150);
    config.deterministic.max_inner_iters = Some(200);
    config.deterministic.inner_tol = Some(1e-7);
    config
}

#[test]
fn sawtooth_tone_tracks_at_220_hz() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let fs = 16_000.0;
    // Steady sawtooth-like tone: harmonics 1..5 of 220 Hz with 1/k
    // amplitudes, 6 frames of 30 ms.
    let n = (0.030 * fs) as usize * 6;
    let samples: Vec<f64> = (0..n)
        .map(|t| {
            (1..=5)
                .map(|k| (TAU * 220.0 * k as f64 * t as f64 / fs).sin() / k as f64)
                .sum::<f64>()
                * 0.2
        })
        .collect();
    write_wav(&wav, fs as u32, &samples);

    let config = audio_config();
    let track = run_audio_frames(&wav, &config, &[Method::Deterministic], dir.path()).unwrap();
    assert_eq!(track.frame_len, 480);
    assert_eq!(track.frames.len(), 6);
    for frame in &track.frames {
        let near: Vec<&f64> = frame
            .f0s_hz
            .iter()
            .filter(|&&f| cents_error(f, 220.0).abs() < 50.0)
            .collect();
        assert!(
            !near.is_empty(),
            "frame {} missed 220 Hz: {:?}",
            frame.frame,
            frame.f0s_hz
        );
    }
    assert!(dir.path().join("pitch_track.json").exists());
    assert!(dir.path().join("pitch_track.csv").exists());
}

#[test]
fn silence_gives_empty_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    let fs = 16_000.0;
    let n = (0.030 * fs) as usize * 3;
    write_wav(&wav, fs as u32, &vec![0.0; n]);

    let config = audio_config();
    let track = run_audio_frames(
        &wav,
        &config,
        &[Method::Stochastic, Method::Deterministic],
        dir.path(),
    )
    .unwrap();
    assert_eq!(track.frames.len(), 6); // 3 frames x 2 methods
    for frame in &track.frames {
        assert!(frame.f0s_hz.is_empty(), "silent frame reported pitches");
    }
}

#[test]
fn frame_length_matches_30ms() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    // 44.1 kHz: a 30 ms frame is 1323 samples.
    let fs = 44_100.0;
    let n = 1323 * 2;
    let samples: Vec<f64> = (0..n)
        .map(|t| (TAU * 220.0 * t as f64 / fs).sin() * 0.3)
        .collect();
    write_wav(&wav, fs as u32, &samples);
    let mut config = audio_config();
    config.grids.f_count = 565;
    config.deterministic.max_outer_iters = Some(60);
    let track = run_audio_frames(&wav, &config, &[Method::Deterministic], dir.path()).unwrap();
    assert_eq!(track.frame_len, 1323);
    assert_eq!(track.frames.len(), 2);
}

#[test]
fn csv_input_uses_configured_sample_rate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tone.csv");
    let fs = 16_000.0;
    let n = (0.030 * fs) as usize * 2;
    let lines: Vec<String> = (0..n)
        .map(|t| format!("{}", (TAU * 220.0 * t as f64 / fs).sin() * 0.4))
        .collect();
    std::fs::write(&csv, lines.join("\n")).unwrap();
    let mut config = audio_config();
    config.audio.csv_sample_rate = fs;
    config.grids.f_count = 565;
    config.deterministic.max_outer_iters = Some(80);
    let track = run_audio_frames(&csv, &config, &[Method::Deterministic], dir.path()).unwrap();
    assert_eq!(track.frame_len, 480);
    assert_eq!(track.sample_rate, fs);
    assert_eq!(track.frames.len(), 2);
    for frame in &track.frames {
        assert!(frame
            .f0s_hz
            .iter()
            .any(|&f| cents_error(f, 220.0).abs() < 50.0));
    }
}

#[test]
fn unsupported_format_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("input.ogg");
    std::fs::write(&path, b"not audio").unwrap();
    let config = audio_config();
    let err = run_audio_frames(&path, &config, &[Method::Deterministic], dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    let missing = dir.path().join("missing.wav");
    let err =
        run_audio_frames(&missing, &config, &[Method::Deterministic], dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
