use criterion::{black_box, criterion_group, criterion_main, Criterion};
use factscope_bench::fixture;
use factscope_core::intervene::{record_clean, restore_plan};
use factscope_core::mediate::{mediation_last_position, MediationConfig, Target};

fn forward(c: &mut Criterion) {
    let f = fixture(12);
    let tokens = &f.prompt.tokens;
    c.bench_function("forward/clean", |b| b.iter(|| f.model.forward(black_box(tokens), None).unwrap()));

    let clean = record_clean(&f.model, tokens).unwrap();
    let base = f.model.forward(tokens, None).unwrap();
    let last = tokens.len() - 1;
    let plan = restore_plan(&clean, (last, 6)).unwrap();
    c.bench_function("rerun/last_position_layer6", |b| b.iter(|| f.model.rerun(&base, black_box(&plan)).unwrap()));
    let plan = restore_plan(&clean, (1, 1)).unwrap();
    c.bench_function("rerun/subject_layer1", |b| b.iter(|| f.model.rerun(&base, black_box(&plan)).unwrap()));
}

fn mediation(c: &mut Criterion) {
    let f = fixture(12);
    let cfg = MediationConfig { n_samples: 2, ..Default::default() };
    let mut g = c.benchmark_group("mediation");
    g.sample_size(10);
    g.bench_function("last_position/2_samples", |b| {
        b.iter(|| mediation_last_position(&f.model, &f.prompt, f.object, Target::Subject, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, forward, mediation);
criterion_main!(benches);
