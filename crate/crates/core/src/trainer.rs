//! Model wiring, the AdamW training loop and evaluation.
//!
//! Everything that depends only on frozen weights (E(I), the embedded
//! marker image, token ids, pooling matrices) is computed once per scene.
//! A training step then runs the control branch, prompt MLP and decoder
//! on the cached inputs.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, TextSegment, Vocab};
use crate::error::{Error, Result};
use crate::marker::{self, MarkerIndexMap, DEFAULT_OVERLAY_ALPHA};
use crate::metrics::{evaluate_run, GenerationRecord, MetricReport};
use crate::params::{Ctx, ParamStore};
use crate::prompts::{self, ConnectedMlp, SCENE_TOKEN_OPTIONS};
use crate::scene::{Image, Scene};
use crate::tensor::{Scalar, Var};
use crate::vision::{self, EncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per optimizer step; every QA record of a scene is used.
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub scene_token_count: usize,
    pub use_markers: bool,
    pub use_instance_prompts: bool,
    pub use_mcnet: bool,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub overlay_alpha: f64,
    pub log_every: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            total_iters: 2000,
            seed: 0,
            scene_token_count: 256,
            use_markers: true,
            use_instance_prompts: true,
            use_mcnet: true,
            grad_clip: 1.0,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            log_every: 100,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !SCENE_TOKEN_OPTIONS.contains(&self.scene_token_count) {
            return bad("scene_token_count must be 256 or 64");
        }
        if self.use_mcnet && !self.use_markers {
            return bad("use_mcnet requires use_markers");
        }
        if !(0.0..1.0).contains(&self.overlay_alpha) {
            return bad("overlay_alpha must lie in [0, 1)");
        }
        self.decoder.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.validate()?;
        Ok(
            match (self.use_markers, self.use_mcnet, self.use_instance_prompts) {
                (false, _, false) => Variant::Baseline,
                (true, false, false) => Variant::Marker,
                (true, true, false) => Variant::MarkerMcnet,
                (true, true, true) => Variant::Full,
                (m, c, i) => Variant::Custom {
                    markers: m,
                    mcnet: c,
                    instance: i,
                },
            },
        )
    }
}

/// The four ablation rows, plus any other consistent flag combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Marker,
    MarkerMcnet,
    Full,
    Custom {
        markers: bool,
        mcnet: bool,
        instance: bool,
    },
}

impl Variant {
    pub const ABLATION_ROWS: [Variant; 4] = [
        Variant::Baseline,
        Variant::Marker,
        Variant::MarkerMcnet,
        Variant::Full,
    ];

    pub fn label(&self) -> String {
        match self {
            Variant::Baseline => "none".into(),
            Variant::Marker => "+marker".into(),
            Variant::MarkerMcnet => "+marker+MCNet".into(),
            Variant::Full => "full".into(),
            Variant::Custom {
                markers,
                mcnet,
                instance,
            } => {
                format!("markers={markers},mcnet={mcnet},instance={instance}")
            }
        }
    }

    /// Copy of `base` with this variant's switches.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let (m, c, i) = match *self {
            Variant::Baseline => (false, false, false),
            Variant::Marker => (true, false, false),
            Variant::MarkerMcnet => (true, true, false),
            Variant::Full => (true, true, true),
            Variant::Custom {
                markers,
                mcnet,
                instance,
            } => (markers, mcnet, instance),
        };
        let cfg = TrainConfig {
            use_markers: m,
            use_mcnet: c,
            use_instance_prompts: i,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// `0.5 * lr0 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Parameters plus everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub params: ParamStore<T>,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub width: usize,
    pub height: usize,
    pub views: usize,
}

/// Independent RNG streams so that each component's initialization does
/// not depend on which other components a variant enables.
fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> Model<T> {
    pub fn init(config: &TrainConfig, width: usize, height: usize, views: usize) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::standard();
        let mut params = ParamStore::new();
        let seed = config.seed;
        vision::init_encoder(
            &mut params,
            &mut component_rng(seed, 1),
            &config.encoder,
            width,
            height,
        )?;
        if config.use_mcnet {
            vision::init_control_branch(&mut params, &mut component_rng(seed, 2), &config.encoder);
        }
        ConnectedMlp::init(
            &mut params,
            &mut component_rng(seed, 3),
            config.encoder.embed_dim,
            config.decoder.embed_dim,
        );
        decoder::init_decoder(
            &mut params,
            &mut component_rng(seed, 4),
            &config.decoder,
            vocab.len(),
        )?;
        decoder::init_decoder_adapters(&mut params, &mut component_rng(seed, 5), &config.decoder);
        let model = Model {
            params,
            config: config.clone(),
            vocab,
            width,
            height,
            views,
        };
        let (gh, gw) = config.encoder.grid(width, height);
        prompts::scene_pool_matrix::<T>(gh, gw, config.scene_token_count)?;
        Ok(model)
    }

    /// Model sized for the given scenes, which must share image geometry.
    pub fn for_scenes(config: &TrainConfig, scenes: &[Scene]) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::InvalidConfig("dataset is empty".into()))?;
        let (w, h, v) = (first.width(), first.height(), first.images.len());
        if let Some(s) = scenes
            .iter()
            .find(|s| s.width() != w || s.height() != h || s.images.len() != v)
        {
            return Err(Error::Validation {
                record: s.scene_id.clone(),
                reason: format!("geometry differs from {}x{} with {v} views", w, h),
            });
        }
        Model::init(config, w, h, v)
    }

    fn grid(&self) -> (usize, usize) {
        self.config.encoder.grid(self.width, self.height)
    }

    /// Caches frozen-weight work and tokenizes the scene's QA records.
    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene<T>> {
        let cfg = &self.config;
        if (scene.width(), scene.height(), scene.images.len())
            != (self.width, self.height, self.views)
        {
            return Err(Error::Validation {
                record: scene.scene_id.clone(),
                reason: "scene geometry does not match the model".into(),
            });
        }
        let needs_map = cfg.use_markers || cfg.use_instance_prompts;
        let map = if needs_map {
            Some(scene_marker_map(scene)?)
        } else {
            None
        };
        let marker_images = match (&map, cfg.use_markers) {
            (Some(map), true) => Some(render_views(scene, map, cfg.overlay_alpha)?),
            _ => None,
        };
        let enc = &cfg.encoder;
        let mut frozen = Vec::with_capacity(self.views);
        let mut ctrl = Vec::new();
        for v in 0..self.views {
            let original = &scene.images[v];
            let marked = marker_images.as_ref().map(|m| &m[v]);
            match (cfg.use_mcnet, marked) {
                (true, Some(m)) => {
                    frozen.push(vision::encode(&self.params, enc, original)?.data);
                    ctrl.push(vision::embed_image(&self.params, enc, m)?);
                }
                (false, Some(m)) => frozen.push(vision::encode(&self.params, enc, m)?.data),
                (_, None) => frozen.push(vision::encode(&self.params, enc, original)?.data),
            }
        }
        let pool = match (&map, cfg.use_instance_prompts) {
            (Some(map), true) => {
                let (gh, gw) = self.grid();
                Some(
                    prompts::instance_pool_matrix::<T>(
                        map,
                        &scene.detections,
                        self.views,
                        gh,
                        gw,
                        self.width,
                        self.height,
                    )?
                    .0,
                )
            }
            _ => None,
        };
        let text_map = if cfg.use_markers { map.as_ref() } else { None };
        let mut segments = Vec::with_capacity(scene.qa.len());
        for qa in &scene.qa {
            let (q, a) = match text_map {
                Some(m) => (
                    marker::markerize_text(&qa.question, m),
                    marker::markerize_text(&qa.answer, m),
                ),
                None => (qa.question.clone(), qa.answer.clone()),
            };
            let tokenize = |t: &str| {
                self.vocab.tokenize(t).map_err(|e| Error::Validation {
                    record: format!("{}: {}", scene.scene_id, qa.question),
                    reason: e.to_string(),
                })
            };
            segments.push(TextSegment {
                question: tokenize(&q)?,
                answer: tokenize(&a)?,
            });
        }
        Ok(PreparedScene {
            scene_id: scene.scene_id.clone(),
            questions: scene.qa.iter().map(|q| q.question.clone()).collect(),
            frozen,
            ctrl,
            pool,
            map: text_map.cloned(),
            segments,
        })
    }

    /// Prompt rows (scene tokens per view, then instance tokens) on `ctx`.
    pub fn prompt_on_tape(&self, ctx: &mut Ctx<'_, T>, p: &PreparedScene<T>) -> Result<Var> {
        let (gh, gw) = self.grid();
        let mut ys = Vec::with_capacity(self.views);
        for v in 0..self.views {
            let f = ctx.tape.constant(p.frozen[v].clone());
            let y = match p.ctrl.get(v) {
                Some(c) => {
                    let c = ctx.tape.constant(c.clone());
                    vision::fuse(ctx, &self.config.encoder, f, c)?
                }
                None => f,
            };
            ys.push(y);
        }
        let mut parts = Vec::with_capacity(self.views + 1);
        for &y in &ys {
            parts.push(prompts::scene_prompts(
                ctx,
                y,
                gh,
                gw,
                self.config.scene_token_count,
            )?);
        }
        if let Some(pool) = &p.pool {
            let all = if ys.len() == 1 {
                ys[0]
            } else {
                ctx.tape.concat_rows(&ys)
            };
            parts.push(prompts::instance_prompts(ctx, all, pool.clone()));
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            ctx.tape.concat_rows(&parts)
        })
    }

    /// Mean answer-token cross-entropy of one scene.
    pub fn scene_loss(&self, ctx: &mut Ctx<'_, T>, p: &PreparedScene<T>) -> Result<Var> {
        let prompt = self.prompt_on_tape(ctx, p)?;
        decoder::sequence_loss(ctx, &self.config.decoder, &self.vocab, prompt, &p.segments)
    }

    pub fn prompt(&self, p: &PreparedScene<T>) -> Result<Array2<T>> {
        let mut ctx = Ctx::new(&self.params);
        let v = self.prompt_on_tape(&mut ctx, p)?;
        Ok(ctx.tape.value(v).clone())
    }

    /// Greedy answers for every QA record of a prepared scene.
    pub fn answer(&self, p: &PreparedScene<T>) -> Result<Vec<GenerationRecord>> {
        let prompt = self.prompt(p)?;
        let questions: Vec<Vec<usize>> = p.segments.iter().map(|s| s.question.clone()).collect();
        let results = decoder::generate_batch(
            &self.params,
            &self.config.decoder,
            &self.vocab,
            &prompt,
            &questions,
            p.map.as_ref(),
        )?;
        Ok(results
            .into_iter()
            .zip(&p.questions)
            .map(|(r, q)| r.into_record(&p.scene_id, q))
            .collect())
    }

    pub fn evaluate(&self, scenes: &[Scene]) -> Result<(Vec<GenerationRecord>, MetricReport)> {
        let mut records = Vec::new();
        for scene in scenes {
            let p = self.prepare(scene)?;
            records.extend(self.answer(&p)?);
        }
        let report = evaluate_run(&records, scenes)?;
        Ok((records, report))
    }
}

/// Detection markers followed by question-coordinate markers, assigned in
/// QA order.
pub fn scene_marker_map(scene: &Scene) -> Result<MarkerIndexMap> {
    let (mut map, _) = marker::build_index_map(&scene.detections)?;
    for qa in &scene.qa {
        for &p in &qa.question_coords {
            map = map
                .assign_query_coordinate(p, scene.width(), scene.height())?
                .1;
        }
    }
    Ok(map)
}

/// Marker image of every view.
pub fn render_views(scene: &Scene, map: &MarkerIndexMap, alpha: f64) -> Result<Vec<Image>> {
    (0..scene.images.len())
        .map(|v| {
            marker::render_marker_image(&scene.images[v], v, map, &scene.detections, alpha)
                .map(|m| m.image)
        })
        .collect()
}

/// Per-scene inputs computed from frozen weights only.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene<T> {
    pub scene_id: String,
    pub questions: Vec<String>,
    /// E(I) per view, or E(I_m) when markers are used without the control
    /// branch.
    pub frozen: Vec<Array2<T>>,
    /// Embedded marker image per view, when the control branch is active.
    pub ctrl: Vec<Array2<T>>,
    pub pool: Option<Array2<T>>,
    /// Map used to resolve generated marker tokens.
    pub map: Option<MarkerIndexMap>,
    pub segments: Vec<TextSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Array2<T>,
    pub v: Array2<T>,
}

/// Decoupled-weight-decay Adam over the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub moments: IndexMap<String, AdamMoments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let moments = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| {
                (
                    n.clone(),
                    AdamMoments {
                        m: Array2::zeros(p.value.raw_dim()),
                        v: Array2::zeros(p.value.raw_dim()),
                    },
                )
            })
            .collect();
        AdamW { step: 0, moments }
    }

    /// One update. Tensors without a gradient entry are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &HashMap<String, Array2<T>>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps) = (T::one(), T::lit(cfg.eps));
        let decay = T::lit(1.0 - lr * cfg.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        for (name, mom) in self.moments.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let p = params
                .get_mut(name)
                .expect("optimizer tracks existing tensors");
            ndarray::Zip::from(&mut p.value)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let denom = (*v * inv_bc2).sqrt() + eps;
                    *w = *w * decay - step_size * *m / denom;
                });
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut HashMap<String, Array2<T>>, max_norm: f64) -> f64 {
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let norm = names
        .iter()
        .map(|n| {
            grads[*n]
                .iter()
                .map(|g| g.to_f64().unwrap().powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{}\n", r.iteration, r.lr, r.loss));
    }
    out
}

/// Model, optimizer and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        let optimizer = AdamW::new(&model.params);
        TrainState {
            model,
            optimizer,
            iteration: 0,
        }
    }
}

/// Single-worker deterministic data order: a fresh seeded shuffle per
/// epoch, batches taken consecutively.
fn batch_order(n: usize, batch: usize, iters: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = component_rng(seed, 100);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(iters);
    let mut cursor = 0;
    for _ in 0..iters {
        let mut b = Vec::with_capacity(batch);
        for _ in 0..batch.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        out.push(b);
    }
    out
}

/// Runs `state.model.config.total_iters - state.iteration` steps over the
/// prepared scenes. `on_step` sees every logged row as it is produced.
pub fn train_prepared(
    state: &mut TrainState,
    data: &[PreparedScene<f32>],
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let cfg = state.model.config.clone();
    if data.is_empty() {
        return Err(Error::InvalidConfig("no training scenes".into()));
    }
    let schedule = batch_order(data.len(), cfg.batch_size, cfg.total_iters, cfg.seed);
    let mut rows = Vec::with_capacity(cfg.total_iters.saturating_sub(state.iteration));
    for t in state.iteration..cfg.total_iters {
        let lr = cosine_lr(cfg.initial_lr, t, cfg.total_iters);
        let (loss, mut grads) = {
            let mut ctx = Ctx::new(&state.model.params);
            let mut total: Option<Var> = None;
            for &i in &schedule[t] {
                let l = state.model.scene_loss(&mut ctx, &data[i])?;
                total = Some(match total {
                    Some(acc) => ctx.tape.add(acc, l),
                    None => l,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = ctx.tape.scale(total, 1.0 / schedule[t].len() as f32);
            let loss = ctx.tape.value(mean)[[0, 0]] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: t });
            }
            (loss, ctx.tape.backward(mean).into_params())
        };
        grads.retain(|name, _| state.optimizer.moments.contains_key(name));
        clip_global_norm(&mut grads, cfg.grad_clip);
        state
            .optimizer
            .update(&mut state.model.params, &grads, lr, &cfg);
        state.iteration = t + 1;
        let row = LossRow {
            iteration: t,
            lr,
            loss,
        };
        if cfg.log_every > 0 && (t % cfg.log_every == 0 || t + 1 == cfg.total_iters) {
            log::info!("iter {t:>5}  lr {lr:.3e}  loss {loss:.5}");
        }
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Initializes a model for `scenes` and trains it per its config.
pub fn train(scenes: &[Scene], config: &TrainConfig) -> Result<(TrainState, Vec<LossRow>)> {
    let model = Model::<f32>::for_scenes(config, scenes)?;
    let data: Vec<PreparedScene<f32>> = scenes
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<_>>()?;
    let mut state = TrainState::new(model);
    let rows = train_prepared(&mut state, &data, |_| {})?;
    Ok((state, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_iters: 3,
            encoder: EncoderConfig {
                patch_size: 16,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                lora_rank: 4,
            },
            decoder: DecoderConfig {
                embed_dim: 16,
                depth: 1,
                heads: 2,
                max_seq_len: 256,
                lora_rank: 4,
                ..DecoderConfig::default()
            },
            log_every: 0,
            scene_token_count: 64,
            ..TrainConfig::default()
        }
    }

    fn scenes(n: u64) -> Vec<Scene> {
        let cfg = SceneConfig {
            image_width: 128,
            image_height: 128,
            max_objects: 4,
            ..SceneConfig::default()
        };
        (0..n).map(|s| generate_scene(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(5e-4, 0, 100), 5e-4);
        assert!(cosine_lr(5e-4, 100, 100) <= 1e-8);
        assert!((cosine_lr(5e-4, 50, 100) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_toml_defaults() {
        let cfg = TrainConfig::from_toml("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg = TrainConfig::from_toml("total_iters = 7\n[encoder]\npatch_size = 32\n").unwrap();
        assert_eq!(
            (
                cfg.total_iters,
                cfg.encoder.patch_size,
                cfg.encoder.embed_dim
            ),
            (7, 32, 64)
        );
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("use_markers = false").is_err());
        assert!(TrainConfig::from_toml("scene_token_count = 100").is_err());
    }

    #[test]
    fn variants_map_to_flags() {
        let base = TrainConfig::default();
        for v in Variant::ABLATION_ROWS {
            assert_eq!(v.apply(&base).unwrap().variant().unwrap(), v);
        }
        assert!(Variant::Custom {
            markers: false,
            mcnet: true,
            instance: true
        }
        .apply(&base)
        .is_err());
    }

    #[test]
    fn zero_iterations_keep_init() {
        let s = scenes(2);
        let cfg = TrainConfig {
            total_iters: 0,
            ..tiny_config()
        };
        let (state, rows) = train(&s, &cfg).unwrap();
        assert!(rows.is_empty());
        assert_eq!(state.model, Model::for_scenes(&cfg, &s).unwrap());
    }

    #[test]
    fn trainable_sets_per_variant() {
        let base = tiny_config();
        let count = |v: Variant| {
            let m = Model::<f32>::init(&v.apply(&base).unwrap(), 128, 128, 1).unwrap();
            let names = m.params.trainable_names();
            (
                names
                    .iter()
                    .any(|n| n.starts_with("enc.ctrl") || n.starts_with("zero.")),
                names
                    .iter()
                    .all(|n| !n.starts_with("enc.frozen") && !n.starts_with("dec.base")),
            )
        };
        assert_eq!(count(Variant::Baseline), (false, true));
        assert_eq!(count(Variant::Full), (true, true));
    }

    #[test]
    fn frozen_tensors_survive_training() {
        let s = scenes(2);
        let cfg = tiny_config();
        let init = Model::<f32>::for_scenes(&cfg, &s).unwrap();
        let (state, rows) = train(&s, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        for (name, p) in init.params.iter() {
            let after = state.model.params.get(name).unwrap();
            if !p.trainable {
                assert_eq!(after.value, p.value, "{name} moved");
            }
        }
    }

    #[test]
    fn two_steps_move_exactly_the_trainable_set() {
        let s = scenes(2);
        for v in Variant::ABLATION_ROWS {
            let cfg = TrainConfig {
                total_iters: 2,
                batch_size: 2,
                ..v.apply(&tiny_config()).unwrap()
            };
            let init = Model::<f32>::for_scenes(&cfg, &s).unwrap();
            let (state, _) = train(&s, &cfg).unwrap();
            let moved: Vec<String> = init
                .params
                .iter()
                .filter(|(name, p)| state.model.params.value(name).unwrap() != p.value)
                .map(|(name, _)| name.clone())
                .collect();
            assert_eq!(moved, init.params.trainable_names(), "{v}");
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let s = scenes(2);
        let cfg = tiny_config();
        let (_, a) = train(&s, &cfg).unwrap();
        let (_, b) = train(&s, &cfg).unwrap();
        assert_eq!(loss_csv(&a), loss_csv(&b));
    }

    #[test]
    fn batch_order_covers_epochs() {
        let order = batch_order(5, 2, 5, 1);
        let flat: Vec<usize> = order.iter().flatten().copied().collect();
        let mut first: Vec<usize> = flat[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = HashMap::new();
        g.insert("a".to_string(), Array2::from_elem((1, 4), 3.0f64));
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 6.0).abs() < 1e-12);
        let after: f64 = g["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= 1.0);
    }

    #[test]
    fn evaluation_joins_every_record() {
        let s = scenes(2);
        let cfg = TrainConfig {
            total_iters: 0,
            ..tiny_config()
        };
        let model = Model::<f32>::for_scenes(&cfg, &s).unwrap();
        let (records, report) = model.evaluate(&s).unwrap();
        assert_eq!(records.len(), s.iter().map(|x| x.qa.len()).sum::<usize>());
        assert_eq!(report.counts.evaluated, records.len());
    }
}
