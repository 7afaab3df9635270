use markerprompt_core::decoder::DecoderConfig;
use markerprompt_core::gradcheck::{check, GradCheck};
use markerprompt_core::nn::LoraLayer;
use markerprompt_core::params::ParamStore;
use markerprompt_core::prompts;
use markerprompt_core::scene::{generate_scene, SceneConfig};
use markerprompt_core::trainer::{Model, TrainConfig};
use markerprompt_core::vision::{self, EncoderConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn toy_config() -> TrainConfig {
    TrainConfig {
        scene_token_count: 64,
        encoder: EncoderConfig {
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            lora_rank: 2,
        },
        decoder: DecoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            lora_rank: 2,
            ..DecoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((r, c), |_| n.sample(rng))
}

/// Zero-initialized tensors get random values so every path carries
/// gradient.
fn perturbed_model() -> (Model<f64>, markerprompt_core::Scene) {
    let scene_cfg = SceneConfig {
        image_width: 64,
        image_height: 64,
        max_objects: 3,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&scene_cfg, 11).unwrap();
    let mut model = Model::<f64>::init(&toy_config(), 64, 64, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, p) in model.params.iter_mut() {
        if name.ends_with(".up") || name.starts_with("zero.") {
            let (r, c) = p.value.dim();
            p.value = random(&mut rng, r, c, 0.3);
        }
    }
    (model, scene)
}

fn assert_ok(reports: &[GradCheck]) {
    for r in reports {
        assert!(r.checked > 0);
        assert!(r.max_abs_grad > 0.0, "{} has no gradient", r.name);
        assert!(
            r.max_rel_err < TOL,
            "{}: relative error {}",
            r.name,
            r.max_rel_err
        );
    }
}

#[test]
fn zero_linear_and_control_adapters() {
    let (model, scene) = perturbed_model();
    let cfg = model.config.encoder;
    let frozen = vision::encode(&model.params, &cfg, &scene.images[0])
        .unwrap()
        .data;
    let marked = vision::embed_image(&model.params, &cfg, &scene.images[0].clone()).unwrap();
    let weights = random(
        &mut ChaCha8Rng::seed_from_u64(1),
        frozen.nrows(),
        frozen.ncols(),
        1.0,
    );
    let reports = check(
        &model.params,
        &[
            "zero.weight",
            "zero.bias",
            "enc.ctrl.lora.blocks.0.attn.q.down",
            "enc.ctrl.lora.blocks.0.mlp.fc2.up",
        ],
        STEP,
        12,
        |ctx| {
            let f = ctx.tape.constant(frozen.clone());
            let m = ctx.tape.constant(marked.clone());
            let y = vision::fuse(ctx, &cfg, f, m)?;
            Ok(ctx.tape.sum_product(y, &weights))
        },
    )
    .unwrap();
    assert_ok(&reports);
}

#[test]
fn single_lora_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.insert("base.weight", random(&mut rng, 6, 5, 0.5), false);
    store.insert("base.bias", random(&mut rng, 1, 5, 0.5), false);
    store.insert("ad.down", random(&mut rng, 6, 3, 0.5), true);
    store.insert("ad.up", random(&mut rng, 3, 5, 0.5), true);
    let layer = LoraLayer::new("base", Some("ad".into()), 3);
    let x = random(&mut rng, 4, 6, 1.0);
    let w = random(&mut rng, 4, 5, 1.0);
    let reports = check(&store, &["ad.down", "ad.up"], STEP, 32, |ctx| {
        let x = ctx.tape.constant(x.clone());
        let y = layer.forward(ctx, x);
        Ok(ctx.tape.sum_product(y, &w))
    })
    .unwrap();
    assert_eq!(reports[0].checked, 18);
    assert_ok(&reports);
}

#[test]
fn connected_mlp() {
    let (model, scene) = perturbed_model();
    let ys = vision::encode(&model.params, &model.config.encoder, &scene.images[0])
        .unwrap()
        .data;
    let weights = random(
        &mut ChaCha8Rng::seed_from_u64(3),
        64,
        model.config.decoder.embed_dim,
        1.0,
    );
    let reports = check(
        &model.params,
        &[
            "mlp.fc1.weight",
            "mlp.fc1.bias",
            "mlp.fc2.weight",
            "mlp.fc2.bias",
        ],
        STEP,
        16,
        |ctx| {
            let y = ctx.tape.constant(ys.clone());
            let t = prompts::scene_prompts(ctx, y, 8, 8, 64)?;
            Ok(ctx.tape.sum_product(t, &weights))
        },
    )
    .unwrap();
    assert_ok(&reports);
}

#[test]
fn decoder_loss_end_to_end() {
    let (model, scene) = perturbed_model();
    let prepared = model.prepare(&scene).unwrap();
    let reports = check(
        &model.params,
        &[
            "dec.lora.blocks.0.attn.v.down",
            "dec.lora.blocks.0.attn.q.up",
            "dec.lora.blocks.0.mlp.fc1.up",
            "mlp.fc2.weight",
            "zero.weight",
        ],
        STEP,
        10,
        |ctx| model.scene_loss(ctx, &prepared),
    )
    .unwrap();
    assert_ok(&reports);
}
