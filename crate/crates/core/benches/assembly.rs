//! Hot paths of a solve. Run once with the default `parallel` feature and
//! once with `--no-default-features` to compare the rayon and sequential
//! builds; the group name records which one ran.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rbfpu_flow::geometry::{generate_pointset, ClusterParams, ObstacleShape, TransformParams};
use rbfpu_flow::pum::build_cover;
use rbfpu_flow::rbf::{assemble_diff_matrices, KernelParams};
use rbfpu_flow::system::{Discretisation, FlowSystem};

const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn operators(c: &mut Criterion) {
    let t = TransformParams::default();
    let cl = ClusterParams::default();
    let mut g = c.benchmark_group(format!("operators/{MODE}"));
    g.sample_size(10);
    for h in [0.1, 0.075] {
        let ps = generate_pointset(ObstacleShape::Circle, h, &t, &cl).unwrap();
        let cover = build_cover(&ps, ObstacleShape::Circle, 0.25, h, &t, &cl).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(h), &h, |b, _| {
            b.iter(|| assemble_diff_matrices(black_box(&ps), cover.clone(), KernelParams::default()).unwrap())
        });
    }
    g.finish();
}

fn nonlinear(c: &mut Criterion) {
    let sys = FlowSystem::build(Discretisation::new(ObstacleShape::Circle, 0.1)).unwrap();
    let prob = sys.problem(20.0).unwrap();
    let y: Vec<f64> = (0..sys.reduction().unwrap().dim()).map(|k| 1e-2 * ((k % 17) as f64 - 8.0)).collect();
    let mut g = c.benchmark_group(format!("nonlinear/{MODE}"));
    g.sample_size(10);
    g.bench_function("residual", |b| b.iter(|| prob.residual(black_box(&y)).unwrap()));
    g.bench_function("jacobian", |b| b.iter(|| prob.jacobian_data(black_box(&y)).unwrap()));
    g.bench_function("jacobian_factor", |b| b.iter(|| prob.jacobian(black_box(&y)).unwrap()));
    g.finish();
}

criterion_group!(benches, operators, nonlinear);
criterion_main!(benches);
