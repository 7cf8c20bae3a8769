use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use otpitch_bench::{random_complex, random_positive, sim_grids};
use otpitch_core::dictionary::{adjoint, apply_real, build_dictionary, DictionaryMode};
use otpitch_core::evaluation::wasserstein2_1d;
use otpitch_core::ot::{psi_column_update_log, stochastic_prox, wright_omega, ProxControl, ProxParams};

fn bench_waterfill(c: &mut Criterion) {
    let mut group = c.benchmark_group("waterfill_column");
    for &n in &[226usize, 2260] {
        let b = random_positive(7, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &b, |bench, b| {
            bench.iter(|| psi_column_update_log(black_box(b), black_box(0.1)));
        });
    }
    group.finish();
}

fn bench_wright_omega(c: &mut Criterion) {
    c.bench_function("wright_omega_sweep", |bench| {
        bench.iter(|| {
            let mut acc = 0.0;
            for i in 0..1000 {
                acc += wright_omega(black_box(-30.0 + 0.06 * i as f64));
            }
            acc
        });
    });
}

fn bench_prox_sweeps(c: &mut Criterion) {
    // One inner solve at mid scale: the dominant cost of an estimation.
    let (_, _, cost) = sim_grids(1130, 151);
    let f_n = cost.n_freqs();
    let nu_prev = random_positive(11, f_n);
    let u: Vec<f64> = random_positive(13, f_n).into_iter().map(|v| v - 1.0).collect();
    let params = ProxParams {
        gamma: 0.02,
        zeta: 10.0,
        eta: 0.1,
        beta: 0.015,
        epsilon: 1e-6,
        max_inner_iters: 10,
        inner_tol: 0.0,
    };
    c.bench_function("stochastic_prox_10_sweeps_1130x151", |bench| {
        bench.iter(|| {
            stochastic_prox(
                black_box(&nu_prev),
                black_box(&u),
                &cost,
                &params,
                ProxControl::default(),
            )
            .unwrap()
        });
    });
}

fn bench_dictionary_products(c: &mut Criterion) {
    let (fg, _, _) = sim_grids(2260, 151);
    let dict = build_dictionary(&fg, 250, DictionaryMode::Time).unwrap();
    let nu = random_positive(17, 2260);
    let resid = random_complex(19, 250);
    c.bench_function("dictionary_apply_fft_2260", |bench| {
        bench.iter(|| apply_real(black_box(&dict), black_box(&nu)).unwrap());
    });
    c.bench_function("dictionary_adjoint_fft_2260", |bench| {
        bench.iter(|| adjoint(black_box(&dict), black_box(&resid)).unwrap());
    });
}

fn bench_wasserstein(c: &mut Criterion) {
    let a: Vec<(f64, f64)> = random_positive(23, 64)
        .into_iter()
        .enumerate()
        .map(|(i, m)| (i as f64 * 0.05, m))
        .collect();
    let b: Vec<(f64, f64)> = random_positive(29, 40)
        .into_iter()
        .enumerate()
        .map(|(i, m)| (0.02 + i as f64 * 0.08, m))
        .collect();
    c.bench_function("wasserstein2_1d_64x40", |bench| {
        bench.iter(|| wasserstein2_1d(black_box(&a), black_box(&b)).unwrap());
    });
}

criterion_group!(
    benches,
    bench_waterfill,
    bench_wright_omega,
    bench_prox_sweeps,
    bench_dictionary_products,
    bench_wasserstein
);
criterion_main!(benches);
