use std::hint::black_box;

use cinfer::dataset::ReplayWorld;
use cinfer::planner::{plan, plan_with, SamplingSpec, Search};
use cinfer_bench::fixture;
use criterion::{criterion_group, criterion_main, Criterion};

fn encode(c: &mut Criterion) {
    let f = fixture();
    let inst = &f.instances[0];
    let world = ReplayWorld::from_instance(inst);
    c.bench_function("encode_pair", |b| {
        b.iter(|| f.pairing.encode(&inst.ego, &inst.ego_track, &world, &inst.road, black_box(5)).unwrap())
    });
    c.bench_function("demo_pairs", |b| b.iter(|| f.pairing.demo_pairs(black_box(inst), 1).unwrap()));
}

fn forward(c: &mut Criterion) {
    let f = fixture();
    let inst = &f.instances[0];
    let world = ReplayWorld::from_instance(inst);
    let x = f.pairing.encode(&inst.ego, &inst.ego_track, &world, &inst.road, 0).unwrap();
    c.bench_function("vae_reconstruct", |b| b.iter(|| f.vae.reconstruct(black_box(&x.data)).unwrap()));
    c.bench_function("constraint_classify", |b| b.iter(|| f.model.classify(black_box(&x.data)).unwrap()));
}

fn planning(c: &mut Criterion) {
    let f = fixture();
    let spec = SamplingSpec::default();
    let inst = &f.instances[0];
    c.bench_function("plan_unconstrained", |b| b.iter(|| plan(black_box(inst), None, &spec, &f.pairing).unwrap()));
    c.bench_function("plan_exhaustive", |b| {
        b.iter(|| plan(black_box(inst), Some(&f.model), &spec, &f.pairing).unwrap())
    });
    c.bench_function("plan_first_feasible", |b| {
        b.iter(|| plan_with(black_box(inst), Some(&f.model), &spec, &f.pairing, Search::FirstFeasible).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = encode, forward, planning
}
criterion_main!(benches);
