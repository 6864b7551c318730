use ammasurv_bench::{fixture, step_patient};
use ammasurv_core::survival::{c_index, cox_gradient};
use ammasurv_core::AblationMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn patient(c: &mut Criterion) {
    let mut g = c.benchmark_group("patient");
    for mode in AblationMode::ALL {
        let f = fixture(16, mode).unwrap();
        g.bench_with_input(BenchmarkId::new("forward", mode.as_str()), &f, |b, f| {
            b.iter(|| step_patient(f, black_box(0), mode, false).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", mode.as_str()), &f, |b, f| {
            b.iter(|| step_patient(f, black_box(0), mode, true).unwrap())
        });
    }
    g.finish();
}

fn survival(c: &mut Criterion) {
    let n = 500;
    let risks: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 50.0).collect();
    let times: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 53) % 97) as f64).collect();
    let events: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    c.bench_function("cox_gradient_500", |b| {
        b.iter(|| cox_gradient(black_box(&risks), &times, &events).unwrap())
    });
    c.bench_function("c_index_500", |b| {
        b.iter(|| c_index(black_box(&risks), &times, &events).unwrap())
    });
}

criterion_group!(benches, patient, survival);
criterion_main!(benches);
