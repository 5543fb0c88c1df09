use std::hint::black_box;

use clfb_bench::fixture;
use clfb_core::improve_step;
use clfb_core::lang::normalize;
use clfb_core::reward::{train_language, QueryEmbedding};
use clfb_core::seed::rng_from_seed;
use clfb_core::{Objective, RewardModel};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn benches(c: &mut Criterion) {
    let (cfg, data, enc) = fixture();
    let emb = enc.embed_pool(&data.pool).unwrap();
    let psi = enc.encode_text("Move faster.").unwrap();
    let first = emb.ids()[0];

    c.bench_function("embed_pool_320", |b| b.iter(|| enc.embed_pool(black_box(&data.pool)).unwrap()));
    c.bench_function("encode_text", |b| b.iter(|| enc.encode_text(black_box("Stay closer to the pan.")).unwrap()));
    c.bench_function("normalize", |b| b.iter(|| normalize(black_box("Move your gripper, a LOT higher!"))));
    for objective in [Objective::Printed, Objective::Cosine] {
        c.bench_function(&format!("improve_step_{objective:?}"), |b| {
            b.iter(|| improve_step(&emb, first, black_box(&psi), objective, None).unwrap())
        });
    }

    let mut rng = rng_from_seed(1);
    let d = enc.d_z;
    let k = cfg.reward.learning.negatives;
    let queries: Vec<QueryEmbedding> = (0..20)
        .map(|_| QueryEmbedding {
            phi: random_vec(&mut rng, d),
            psi: random_vec(&mut rng, d),
            negatives: (0..k).map(|_| random_vec(&mut rng, d)).collect(),
        })
        .collect();
    let learning = cfg.reward.learning.clone();
    c.bench_function("reward_epoch_20_queries", |b| {
        b.iter_batched(
            || (RewardModel::new(d, &learning.hidden, &mut rng_from_seed(2)).unwrap(), rng_from_seed(4)),
            |(mut model, mut r)| train_language(&mut model, &queries, &learning, 1, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(hot_paths, benches);
criterion_main!(hot_paths);
