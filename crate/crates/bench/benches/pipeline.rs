use criterion::{black_box, criterion_group, criterion_main, Criterion};
use markerprompt_bench::fixture;
use markerprompt_core::marker::{build_index_map, render_marker_image, DEFAULT_OVERLAY_ALPHA};
use markerprompt_core::metrics::{bleu4, rouge_l};
use markerprompt_core::params::Ctx;
use markerprompt_core::trainer::scene_marker_map;
use markerprompt_core::vision;

fn markers(c: &mut Criterion) {
    let (scene, _) = fixture();
    c.bench_function("build_index_map", |b| {
        b.iter(|| build_index_map(black_box(&scene.detections)).unwrap())
    });
    let map = scene_marker_map(&scene).unwrap();
    c.bench_function("render_marker_image_448", |b| {
        b.iter(|| {
            render_marker_image(
                &scene.images[0],
                0,
                &map,
                &scene.detections,
                DEFAULT_OVERLAY_ALPHA,
            )
            .unwrap()
        })
    });
}

fn encoder(c: &mut Criterion) {
    let (scene, model) = fixture();
    let cfg = model.config.encoder;
    c.bench_function("encode_448", |b| {
        b.iter(|| vision::encode(&model.params, &cfg, black_box(&scene.images[0])).unwrap())
    });
    c.bench_function("mcnet_forward_448", |b| {
        b.iter(|| {
            vision::mcnet_forward(&model.params, &cfg, &scene.images[0], &scene.images[0]).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let (scene, model) = fixture();
    let prepared = model.prepare(&scene).unwrap();
    let mut group = c.benchmark_group("scene");
    group.sample_size(10);
    group.bench_function("loss_and_backward", |b| {
        b.iter(|| {
            let mut ctx = Ctx::new(&model.params);
            let loss = model.scene_loss(&mut ctx, &prepared).unwrap();
            ctx.tape.backward(loss)
        })
    });
    group.bench_function("greedy_answers", |b| {
        b.iter(|| model.answer(&prepared).unwrap())
    });
    group.finish();
}

fn text_metrics(c: &mut Criterion) {
    let hyp = "there are 4 objects . the largest is a bus .";
    let reference = "there are 5 objects . the largest is a truck .";
    c.bench_function("bleu4", |b| b.iter(|| bleu4(black_box(hyp), &[reference])));
    c.bench_function("rouge_l", |b| b.iter(|| rouge_l(black_box(hyp), reference)));
}

criterion_group!(benches, markers, encoder, training, text_metrics);
criterion_main!(benches);
