//! Sequential vs rayon execution of the seeded audit workloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefdyn::data::random_instance;
use prefdyn::dynamics::{corollary1_bounds, mass_shift_audit, predict_from, Geometry};
use prefdyn::par::{instance_rng, map_indexed_with, Execution};
use prefdyn::policy::PolicyKind;
use prefdyn::verify::{run_suite, VerifyOptions};

fn corollary1_audit(exec: Execution, n: usize) -> usize {
    map_indexed_with(exec, n, |i| {
        let mut rng = instance_rng(7, i as u64);
        let kind = if i % 2 == 0 {
            PolicyKind::Tabular
        } else {
            PolicyKind::LogLinear
        };
        let inst = random_instance(kind, &mut rng);
        let g = Geometry::new(&inst.policy, &inst.reference, &inst.triple, 0.5).unwrap();
        let (dw, dl) = predict_from(&g, 0.1, 0.5);
        let (lo, hi) = corollary1_bounds(&g, 0.1, 0.5);
        usize::from(dw + 1e-12 >= lo && dl <= hi + 1e-12)
    })
    .into_iter()
    .sum()
}

fn mass_shift(exec: Execution, n: usize) -> f64 {
    map_indexed_with(exec, n, |i| {
        let mut rng = instance_rng(11, i as u64);
        let inst = random_instance(PolicyKind::LogLinear, &mut rng);
        let t = inst.triple;
        mass_shift_audit(&inst.policy, &inst.reference, &t, 0.1, 0.5, &[t.y_w, t.y_l])
            .unwrap()
            .delta_ystar_meas
    })
    .into_iter()
    .sum()
}

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ]
}

fn bench_audits(c: &mut Criterion) {
    let mut g = c.benchmark_group("corollary1_audit");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, 10_000), &exec, |b, &e| {
            b.iter(|| corollary1_audit(e, 10_000))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("mass_shift_audit");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, 2_000), &exec, |b, &e| {
            b.iter(|| mass_shift(e, 2_000))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("verify_suite_small");
    g.sample_size(10);
    for (name, exec) in modes() {
        let opts = VerifyOptions {
            gradient_instances: 100,
            loss_instances: 50,
            audit_instances: 200,
            tabular_instances: 1_000,
            richardson_instances: 50,
            exec,
            ..Default::default()
        };
        g.bench_function(name, |b| b.iter(|| run_suite(&opts).unwrap().passed));
    }
    g.finish();
}

criterion_group!(benches, bench_audits);
criterion_main!(benches);
