//! Shared fixtures for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otpitch_core::grids::{
    cost_matrix, uniform_frequency_grid, uniform_pitch_grid, CostKind, CostMatrix, FrequencyGrid,
    PitchGrid,
};
use otpitch_core::C64;

pub fn sim_grids(f_count: usize, g_count: usize) -> (FrequencyGrid, PitchGrid, CostMatrix) {
    let fg = uniform_frequency_grid(f_count, 0.0, std::f64::consts::PI).unwrap();
    let pg = uniform_pitch_grid(g_count, 50.0, 500.0, 8000.0).unwrap();
    let cost = cost_matrix(&fg, &pg, CostKind::Normalized).unwrap();
    (fg, pg, cost)
}

pub fn random_complex(seed: u64, n: usize) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_positive(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.05..2.0)).collect()
}
