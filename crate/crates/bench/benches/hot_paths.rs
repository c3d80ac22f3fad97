use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use viewsel_bench::{random_poses, random_scores, random_seq};
use viewsel_core::metrics::{bleu1, cider, rouge_l};
use viewsel_core::selector::{score_views, SelectorConfig, SelectorParams};
use viewsel_core::{view_nms, NmsConfig};

fn nms(c: &mut Criterion) {
    let mut g = c.benchmark_group("view_nms");
    for n in [64, 256, 1024] {
        let poses = random_poses(n, 1);
        let scores = random_scores(n, 2);
        for t in [0.0, 0.5] {
            let cfg = NmsConfig::new(t, 9);
            g.bench_with_input(BenchmarkId::new(format!("T={t}"), n), &n, |b, _| {
                b.iter(|| view_nms(black_box(&poses), black_box(&scores), &cfg).unwrap())
            });
        }
    }
    g.finish();
}

fn selector(c: &mut Criterion) {
    let config = SelectorConfig::desk();
    let params = SelectorParams::init(config);
    let question = random_seq("q", 8, config.d_in, 3);
    let mut g = c.benchmark_group("score_views");
    for n in [16, 64] {
        let views: Vec<_> = (0..n).map(|i| random_seq(&format!("v{i}"), 2, config.d_in, 10 + i as u64)).collect();
        g.bench_with_input(BenchmarkId::new("desk", n), &n, |b, _| {
            b.iter(|| score_views(black_box(&question), black_box(&views), &params).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let words = ["the", "brown", "table", "left", "of", "bed", "chair", "window", "lamp", "desk"];
    let sentence = |i: usize| (0..8).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" ");
    let preds: Vec<String> = (0..500).map(sentence).collect();
    let refs: Vec<Vec<String>> = (0..500).map(|i| vec![sentence(i + 1), sentence(i + 2)]).collect();
    c.bench_function("bleu1", |b| b.iter(|| bleu1(black_box(&preds[0]), &refs[0])));
    c.bench_function("rouge_l", |b| b.iter(|| rouge_l(black_box(&preds[0]), &refs[0])));
    c.bench_function("cider_500", |b| b.iter(|| cider(black_box(&preds), &refs).unwrap()));
}

criterion_group!(benches, nms, selector, metrics);
criterion_main!(benches);
