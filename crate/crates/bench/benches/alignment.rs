use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use sap_bench::{unit_rows, ToyFixture};
use sap_core::{alignment_score, cross_attention, AlignmentVariant};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("cross_attention");
    for (n, m, d) in [(8, 9, 16), (64, 49, 512), (256, 196, 512)] {
        let q = unit_rows(n, d, 1);
        let k = unit_rows(m, d, 2);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{m}x{d}")), &(q, k), |b, (q, k)| {
            b.iter(|| cross_attention(black_box(q), black_box(k), black_box(k)).unwrap())
        });
    }
    group.finish();
}

fn score(c: &mut Criterion) {
    let fused = unit_rows(1, 512, 3).row(0).to_owned();
    let text = unit_rows(50, 512, 4);
    c.bench_function("alignment_score/50x512", |b| {
        b.iter(|| alignment_score(black_box(fused.view()), black_box(&text)).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let fixture = ToyFixture::new();
    let labels = fixture.world.split.all_classes();
    let image = &fixture.world.test.samples[0].image;
    let mut group = c.benchmark_group("score_image");
    for variant in AlignmentVariant::ALL {
        let model = fixture.model(variant);
        let prepared = model.prepare(&labels, Some(&fixture.prompts)).unwrap();
        group.bench_function(variant.as_str(), |b| {
            b.iter(|| model.score(&prepared, black_box(image), Some(&fixture.prompts)).unwrap())
        });
    }
    group.finish();

    let problem = fixture.problem();
    let batch = [0, 1, 2, 3];
    c.bench_function("train_step/batch4", |b| {
        b.iter(|| problem.step(&fixture.prompts, black_box(&batch), true).unwrap())
    });
}

criterion_group!(benches, attention, score, pipeline);
criterion_main!(benches);
