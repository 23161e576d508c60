use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use perfhom::corrector::{solve_defect_corrector, solve_periodic_corrector};
use perfhom::geometry::PerforationField;
use perfhom::poincare::{rayleigh_min, Constraint};
use perfhom::solver::{solve, solve_dense};
use perfhom_bench::{golden_pattern, laplacian, perforated_cell, perforated_square};

fn assembly(c: &mut Criterion) {
    let cls = perforated_square(256);
    c.bench_function("assemble_square_256", |b| b.iter(|| laplacian(black_box(&cls))));
}

fn solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    let small = laplacian(&perforated_square(32));
    let rhs = vec![1.0; small.unknowns()];
    let dense = small.matrix.to_dense();
    g.bench_function("bicgstab_square_32", |b| {
        b.iter(|| solve(&small.matrix, black_box(&rhs)).unwrap())
    });
    g.bench_function("dense_lu_square_32", |b| {
        b.iter(|| solve_dense(&dense, black_box(&rhs)).unwrap())
    });
    let big = laplacian(&perforated_square(256));
    let rhs = vec![1.0; big.unknowns()];
    g.bench_function("bicgstab_square_256", |b| {
        b.iter(|| solve(&big.matrix, black_box(&rhs)).unwrap())
    });
    g.finish();
}

fn correctors(c: &mut Criterion) {
    let mut g = c.benchmark_group("corrector");
    g.sample_size(10);
    let pattern = golden_pattern();
    g.bench_function("periodic_n64", |b| {
        b.iter(|| solve_periodic_corrector(black_box(&pattern), 64).unwrap())
    });
    let field = PerforationField::golden();
    let per = Arc::new(solve_periodic_corrector(&pattern, 64).unwrap());
    g.bench_function("defect_n64_r1", |b| {
        b.iter(|| solve_defect_corrector(black_box(&field), &per, 1).unwrap())
    });
    g.finish();
}

fn eigen(c: &mut Criterion) {
    let mut g = c.benchmark_group("poincare");
    g.sample_size(10);
    let cls = perforated_cell(64);
    g.bench_function("cell_lambda_n64", |b| {
        b.iter(|| rayleigh_min(black_box(&cls), Constraint::Holes).unwrap())
    });
    g.finish();
}

criterion_group!(benches, assembly, solvers, correctors, eigen);
criterion_main!(benches);
