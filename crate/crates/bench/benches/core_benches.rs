use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rolesep_core::arcdata::{synth_task, SynthFamily};
use rolesep_core::augment::{apply, invert_hard, sample_aug_with};
use rolesep_core::grid_equal;
use rolesep_core::mask::{build_mask, Variant};
use rolesep_core::model::{Model, ModelConfig, TaskToken};
use rolesep_core::tensor::Tape;
use rolesep_core::train::{loo_context, make_sample};

fn bench_mask_build(c: &mut Criterion) {
    c.bench_function("mask_build_variant_d", |b| {
        b.iter(|| build_mask(Variant::D, 5, 32))
    });
}

fn bench_augment_roundtrip(c: &mut Criterion) {
    let task = synth_task(SynthFamily::Recolor { from: 0, to: 3 }, 7, 3, 1);
    let grid = &task.demos[0].0;
    let dims = vec![(grid.height(), grid.width())];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    c.bench_function("augment_roundtrip", |b| {
        b.iter(|| {
            let aug = sample_aug_with(&mut rng, &dims, 16, 2, 0).unwrap();
            let canvas = apply(grid, &aug).unwrap();
            let back =
                invert_hard(canvas.cells(), &aug, (grid.height(), grid.width())).unwrap();
            assert!(grid_equal(&back, grid));
        })
    });
}

fn bench_forward_desk(c: &mut Criterion) {
    let cfg = ModelConfig::desk(Variant::D);
    let model = Model::new(cfg).unwrap();
    let store = model.init_params(1);
    let task = synth_task(SynthFamily::Recolor { from: 0, to: 3 }, 1, 3, 1);
    let ctx = loo_context(&task.demos, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims: Vec<(usize, usize)> = task
        .demos
        .iter()
        .flat_map(|d| [(d.0.height(), d.0.width()), (d.1.height(), d.1.width())])
        .collect();
    let aug = sample_aug_with(&mut rng, &dims, cfg.canvas, 2, 0).unwrap();
    let sample = make_sample(&ctx, &task.demos[0], aug).unwrap();
    c.bench_function("forward_desk_variant_d", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            model
                .forward(&mut tape, &store, &sample.query, &sample.demos, TaskToken::Index(0))
                .unwrap()
        })
    });
}

fn bench_forward_backward_desk(c: &mut Criterion) {
    let cfg = ModelConfig::desk(Variant::D);
    let model = Model::new(cfg).unwrap();
    let store = model.init_params(1);
    let task = synth_task(SynthFamily::Recolor { from: 0, to: 3 }, 1, 3, 1);
    let ctx = loo_context(&task.demos, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims: Vec<(usize, usize)> = task
        .demos
        .iter()
        .flat_map(|d| [(d.0.height(), d.0.width()), (d.1.height(), d.1.width())])
        .collect();
    let aug = sample_aug_with(&mut rng, &dims, cfg.canvas, 2, 0).unwrap();
    let sample = make_sample(&ctx, &task.demos[0], aug).unwrap();
    c.bench_function("forward_backward_desk_variant_d", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &store, &sample.query, &sample.demos, TaskToken::Index(0))
                .unwrap();
            let cells = cfg.canvas * cfg.canvas;
            let targets = vec![0usize; cells];
            let weights = vec![1.0f64; cells];
            let loss = tape.cross_entropy(out.cell_logits, &targets, &weights).unwrap();
            let mut grads = store.clone();
            tape.backward(loss, &mut grads)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_mask_build, bench_augment_roundtrip, bench_forward_desk, bench_forward_backward_desk
}
criterion_main!(benches);
