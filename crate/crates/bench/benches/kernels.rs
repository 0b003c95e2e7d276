//! Hot-path benchmarks: tape matmul, one full training step on the desk
//! config, sketch rasterization, and the scoring loss.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use parrotgate_core::loss::{drawing_mask, loss_indices_patch_layout, masked_mse};
use parrotgate_core::mae::{
    init_params, patchify, reconstruct, register_params, sample_mask, MAEConfig,
};
use parrotgate_core::sketch::{rasterize, sample_sketch, RasterImage};
use parrotgate_core::tensor::{AdamWConfig, AdamWState, Tape, Tensor};

fn toy_image(seed: u64) -> RasterImage {
    let sketch = sample_sketch(seed, 3, 5);
    rasterize(&sketch, 56, 56, 1.5).unwrap().quantize()
}

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::new(vec![0.5; 64 * 64], vec![64, 64], true).unwrap();
    let b = Tensor::new(vec![0.25; 64 * 64], vec![64, 64], false).unwrap();
    c.bench_function("tape_matmul_64x64", |bencher| {
        bencher.iter(|| {
            let mut tape = Tape::new();
            let ia = tape.leaf(a.clone());
            let ib = tape.leaf(b.clone());
            let out = tape.matmul(black_box(ia), black_box(ib)).unwrap();
            black_box(tape.data(out)[0])
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let config = MAEConfig::desk();
    let mut params = init_params(&config, 7).unwrap();
    let adam = AdamWConfig::new(1e-3, 0.0);
    let mut optimizer = AdamWState::new(adam, &params.trainable_sizes());
    let zero_grads: Vec<Vec<f64>> =
        params.trainable_sizes().iter().map(|&n| vec![0.0; n]).collect();
    let img = toy_image(11);
    let target = patchify(&img, config.patch_size).unwrap();
    let dmask = drawing_mask(&img, 0.999);
    let indices = loss_indices_patch_layout(&dmask, config.patch_size);

    c.bench_function("desk_train_step", |bencher| {
        let mut step = 0u64;
        bencher.iter(|| {
            let mask = sample_mask(config.num_patches(), 0.75, step);
            step += 1;
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let pred = parrotgate_core::mae::reconstruct_on_tape(
                &mut tape, &ids, &config, &target, &mask,
            )
            .unwrap();
            let loss = tape.masked_sq_err_mean(pred, &target, &indices).unwrap();
            let grads = tape.backward(loss).unwrap();
            let ordered = ids.trainable();
            let grad_refs: Vec<&[f64]> = ordered
                .iter()
                .enumerate()
                .map(|(i, &id)| grads.get(id).unwrap_or(&zero_grads[i]))
                .collect();
            let mut slots = params.trainable_mut();
            optimizer.step(&mut slots, &grad_refs).unwrap();
            black_box(tape.data(loss)[0])
        })
    });
}

fn bench_rasterize(c: &mut Criterion) {
    let sketch = sample_sketch(42, 4, 6);
    c.bench_function("rasterize_56x56", |bencher| {
        bencher.iter(|| black_box(rasterize(black_box(&sketch), 56, 56, 1.5).unwrap()))
    });
}

fn bench_masked_mse(c: &mut Criterion) {
    let config = MAEConfig::desk();
    let params = init_params(&config, 7).unwrap();
    let img = toy_image(11);
    let mask = sample_mask(config.num_patches(), 0.75, 3);
    let xhat = reconstruct(&params, &img, &mask).unwrap();
    let dmask = drawing_mask(&img, 0.999);
    c.bench_function("masked_mse_56x56", |bencher| {
        bencher.iter(|| black_box(masked_mse(black_box(&img), black_box(&xhat), &dmask).unwrap()))
    });
}

criterion_group!(benches, bench_matmul, bench_train_step, bench_rasterize, bench_masked_mse);
criterion_main!(benches);
