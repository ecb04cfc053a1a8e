use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kerag_core::eval::ndcg_at_k;
use kerag_core::gat::{aggregate, attention_weights, init_embeddings};
use kerag_core::llm::parse_ranking;
use kerag_core::retriever::{score_edges, top_q};
use kerag_core::synth::{generate, SynthConfig};
use kerag_core::GatTrainConfig;

fn world() -> kerag_core::synth::SynthWorld {
    generate(&SynthConfig {
        users: 200,
        items: 1000,
        ..SynthConfig::default()
    })
    .expect("synthetic world")
}

fn gat(c: &mut Criterion) {
    let world = world();
    let mut group = c.benchmark_group("gat");
    for dim in [16, 64] {
        let config = GatTrainConfig {
            dim,
            ..GatTrainConfig::default()
        };
        let (store, params) = init_embeddings(&world.kg, &config).unwrap();
        group.bench_with_input(BenchmarkId::new("attention", dim), &dim, |b, _| {
            b.iter(|| attention_weights(black_box(7), &params, &store))
        });
        group.bench_with_input(BenchmarkId::new("aggregate", dim), &dim, |b, _| {
            b.iter(|| aggregate(black_box(7), &params, &store))
        });
        group.bench_with_input(BenchmarkId::new("materialize_all", dim), &dim, |b, _| {
            b.iter(|| {
                let mut s = store.clone();
                s.materialize(&params, config.chunk_size);
                s
            })
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let world = world();
    let (mut store, params) = init_embeddings(&world.kg, &GatTrainConfig::default()).unwrap();
    store.materialize(&params, 50);
    c.bench_function("retriever/score_edges", |b| b.iter(|| score_edges(&store, &world.kg).unwrap()));
    let index = score_edges(&store, &world.kg).unwrap();
    c.bench_function("retriever/top_q_x10", |b| {
        b.iter(|| {
            for item in 0..10 {
                black_box(top_q(black_box(item), 3, &index).unwrap());
            }
        })
    });
}

fn parsing(c: &mut Criterion) {
    let world = world();
    let titles = &world.dataset.catalog.item_titles;
    let candidates: Vec<(usize, String)> = (0..10).map(|i| (i * 37, titles[i * 37].clone())).collect();
    let exact: String = candidates
        .iter()
        .rev()
        .enumerate()
        .map(|(r, (_, t))| format!("{}. {t}\n", r + 1))
        .collect();
    let fuzzy: String = candidates
        .iter()
        .map(|(_, t)| format!("* {}\n", t.to_lowercase().replace("the ", "")))
        .collect();
    c.bench_function("llm/parse_exact", |b| b.iter(|| parse_ranking(black_box(&exact), &candidates, 0)));
    c.bench_function("llm/parse_fuzzy", |b| b.iter(|| parse_ranking(black_box(&fuzzy), &candidates, 0)));
}

fn metrics(c: &mut Criterion) {
    let ranked: Vec<usize> = (0..10).collect();
    c.bench_function("eval/ndcg_at_5", |b| {
        b.iter(|| (0..10).map(|t| ndcg_at_k(black_box(&ranked), t, 5)).sum::<f64>())
    });
}

criterion_group!(benches, gat, retrieval, parsing, metrics);
criterion_main!(benches);
