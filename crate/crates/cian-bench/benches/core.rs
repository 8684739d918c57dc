use cian_core::{
    admm_solve, adam_step, build_pairs, cross_modal_block, generate_dataset, init_params,
    mine_hardest_negatives, AdamHyper, AdamState, BatchScorer, ExplainProblem, GeneratorConfig,
    ModelConfig, PackageOp, ScoreMode, Variant,
};
use cian_core::tensor::{kaiming_init, seeded_rng, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_attention_block(c: &mut Criterion) {
    let cfg = ModelConfig::desk_scale(Variant::Both);
    let params = init_params(&cfg).unwrap();
    let bp = cian_core::BlockParams {
        w_v: params["t.cross0.w_v"].clone(),
        b_v: params["t.cross0.b_v"].clone(),
        w_k: params["t.cross0.w_k"].clone(),
        b_k: params["t.cross0.b_k"].clone(),
        w_q: params["t.cross0.w_q"].clone(),
        b_q: params["t.cross0.b_q"].clone(),
    };
    let mut rng = seeded_rng(1);
    let x = kaiming_init(vec![cfg.common_dim], cfg.common_dim, &mut rng).unwrap();
    let q = kaiming_init(vec![cfg.common_dim], cfg.common_dim, &mut rng).unwrap();
    c.bench_function("cross_modal_block_64", |b| {
        b.iter(|| {
            cross_modal_block(
                std::hint::black_box(&x),
                std::hint::black_box(&q),
                &bp,
                PackageOp::DotProduct,
                ScoreMode::Elementwise,
            )
            .unwrap()
        })
    });
}

fn bench_score_matrix_and_mining(c: &mut Criterion) {
    let gen = GeneratorConfig { merchants_per_category: 22, ..Default::default() };
    let records = generate_dataset(&gen).unwrap();
    let pairs = build_pairs(&records, 1, 0).unwrap();
    let anchors: Vec<_> = pairs.iter().filter(|p| p.positive).take(128).collect();
    let cfg = ModelConfig::desk_scale(Variant::Both);
    let params = init_params(&cfg).unwrap();
    let feats: Vec<(&Tensor, &Tensor)> = anchors.iter().map(|p| (&p.t, &p.d)).collect();
    let cats: Vec<usize> = anchors.iter().map(|p| p.t_category).collect();
    c.bench_function("score_matrix_128", |b| {
        b.iter(|| {
            let scorer = BatchScorer::new(&params, &cfg, &feats).unwrap();
            scorer.matrix().unwrap()
        })
    });
    let scorer = BatchScorer::new(&params, &cfg, &feats).unwrap();
    let matrix = scorer.matrix().unwrap();
    c.bench_function("mine_hardest_128", |b| {
        b.iter(|| mine_hardest_negatives(std::hint::black_box(&cats), &matrix).unwrap())
    });
}

fn bench_admm(c: &mut Criterion) {
    let mut rng = seeded_rng(3);
    let (dim, t_dim) = (64, 32);
    let w_v = kaiming_init(vec![dim, t_dim], t_dim, &mut rng).unwrap();
    let b_v = kaiming_init(vec![dim], dim, &mut rng).unwrap();
    let t = kaiming_init(vec![t_dim], t_dim, &mut rng).unwrap();
    let o = kaiming_init(vec![dim], dim, &mut rng).unwrap();
    let prob = ExplainProblem::new(w_v, b_v, t, o);
    c.bench_function("admm_solve_64x32", |b| {
        b.iter(|| admm_solve(std::hint::black_box(&prob), 0.5, 1.0, 1e-6, 500).unwrap())
    });
}

fn bench_adam(c: &mut Criterion) {
    let cfg = ModelConfig::desk_scale(Variant::Both);
    let params = init_params(&cfg).unwrap();
    let grads: std::collections::BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::new(v.shape().to_vec(), vec![0.01; v.len()]).unwrap()))
        .collect();
    let hp = AdamHyper::default();
    c.bench_function("adam_step_desk_scale", |b| {
        b.iter(|| {
            let mut p = params.clone();
            let mut st = AdamState::new();
            adam_step(&mut p, &grads, &mut st, &hp).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_attention_block,
    bench_score_matrix_and_mining,
    bench_admm,
    bench_adam
);
criterion_main!(benches);
