//! Patch-transformer encoder, its low-rank control branch and the fusion
//! `y_s = E(I) + Z(E_c(I_m))`.
//!
//! The control branch reuses the frozen encoder tensors by name and only
//! owns its adapters, so "trainable copy of E" costs no extra storage and
//! equals E exactly until the adapters move.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Block};
use crate::params::{normal_matrix, Ctx, ParamStore};
use crate::scene::Image;
use crate::tensor::{AttnMask, Scalar, Var};

pub use crate::nn::LoraLayer;

pub const FROZEN_PREFIX: &str = "enc.frozen";
pub const CTRL_LORA_PREFIX: &str = "enc.ctrl.lora";
pub const ZERO_PREFIX: &str = "zero";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub lora_rank: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 28,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            lora_rank: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || width % self.patch_size != 0 || height % self.patch_size != 0 {
            return bad(format!(
                "{width}x{height} image not divisible by patch {}",
                self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.lora_rank == 0 || self.depth == 0 {
            return bad("depth and lora_rank must be positive".into());
        }
        Ok(())
    }

    /// `(rows, cols)` of the feature grid.
    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (height / self.patch_size, width / self.patch_size)
    }
}

/// `H' x W' x C` features stored as `H'W' x C`, cells in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Array2<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(grid_h: usize, grid_w: usize, data: Array2<T>) -> Result<Self> {
        if data.nrows() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} rows for a {grid_h}x{grid_w} grid",
                data.nrows()
            )));
        }
        Ok(FeatureMap {
            grid_h,
            grid_w,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn cell(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, T> {
        self.data.row(row * self.grid_w + col)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn block(cfg: &EncoderConfig, i: usize, adapted: bool) -> Block {
    Block {
        base: format!("{FROZEN_PREFIX}.blocks.{i}"),
        adapter: adapted.then(|| format!("{CTRL_LORA_PREFIX}.blocks.{i}")),
        heads: cfg.heads,
        rank: cfg.lora_rank,
    }
}

/// Frozen encoder E: patch embedding, positional table, blocks, final norm.
pub fn init_encoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
    width: usize,
    height: usize,
) -> Result<()> {
    cfg.validate(width, height)?;
    let (gh, gw) = cfg.grid(width, height);
    let d_patch = 3 * cfg.patch_size * cfg.patch_size;
    nn::init_linear(
        store,
        rng,
        &format!("{FROZEN_PREFIX}.patch"),
        d_patch,
        cfg.embed_dim,
        false,
    );
    store.insert(
        format!("{FROZEN_PREFIX}.pos"),
        normal_matrix(rng, gh * gw, cfg.embed_dim, 0.02),
        false,
    );
    for i in 0..cfg.depth {
        Block::init_base(
            store,
            rng,
            &format!("{FROZEN_PREFIX}.blocks.{i}"),
            cfg.embed_dim,
        );
    }
    nn::init_layer_norm(
        store,
        &format!("{FROZEN_PREFIX}.ln_f"),
        cfg.embed_dim,
        false,
    );
    Ok(())
}

/// Trainable parts of the fusion path: adapters on every attention
/// projection and feed-forward layer of E_c, and the zero linear Z.
pub fn init_control_branch<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
) {
    for i in 0..cfg.depth {
        Block::init_adapters(
            store,
            rng,
            &format!("{CTRL_LORA_PREFIX}.blocks.{i}"),
            cfg.embed_dim,
            cfg.lora_rank,
        );
    }
    init_zero_linear(store, cfg.embed_dim);
}

pub fn init_zero_linear<T: Scalar>(store: &mut ParamStore<T>, channels: usize) {
    store.insert(
        format!("{ZERO_PREFIX}.weight"),
        Array2::zeros((channels, channels)),
        true,
    );
    store.insert(
        format!("{ZERO_PREFIX}.bias"),
        Array2::zeros((1, channels)),
        true,
    );
}

/// Per-cell `C -> C` linear `Z`, weight and bias starting at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ZeroLinear;

impl ZeroLinear {
    pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        nn::linear(ctx, ZERO_PREFIX, x)
    }
}

/// Flattens the image into one row per patch with pixel values mapped to
/// `[-0.5, 0.5]`. Row order is the grid's row-major order; within a patch
/// values run over (row, col, channel).
pub fn patchify<T: Scalar>(image: &Image, patch: usize) -> Result<Array2<T>> {
    if patch == 0 || image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image not divisible by patch {patch}",
            image.width, image.height
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let mut out = Array2::zeros((gh * gw, 3 * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut j = 0;
            for dy in 0..patch {
                let start = ((gy * patch + dy) * image.width + gx * patch) * 3;
                for &v in &image.data[start..start + 3 * patch] {
                    row[j] = T::lit(v as f64 / 255.0 - 0.5);
                    j += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Patch embedding plus positions. Uses only frozen tensors, so callers
/// may compute it once per image and feed it as a constant.
pub fn embed_image<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    image: &Image,
) -> Result<Array2<T>> {
    let patches = patchify::<T>(image, cfg.patch_size)?;
    let w = params.value(&format!("{FROZEN_PREFIX}.patch.weight"))?;
    let b = params.value(&format!("{FROZEN_PREFIX}.patch.bias"))?;
    let pos = params.value(&format!("{FROZEN_PREFIX}.pos"))?;
    if patches.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "patch width {} vs embedding input {}",
            patches.ncols(),
            w.nrows()
        )));
    }
    if patches.nrows() != pos.nrows() {
        return Err(Error::Shape(format!(
            "{} patches vs {} positions",
            patches.nrows(),
            pos.nrows()
        )));
    }
    Ok(patches.dot(w) + b + pos)
}

/// Encoder blocks and final norm over embedded patches. With `adapted` the
/// control-branch adapters are active (E_c); otherwise this is E.
pub fn encoder_body<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &EncoderConfig,
    x: Var,
    adapted: bool,
) -> Var {
    let mask = AttnMask::Full;
    let mut h = x;
    for i in 0..cfg.depth {
        h = block(cfg, i, adapted).forward(ctx, h, &mask);
    }
    nn::layer_norm(ctx, &format!("{FROZEN_PREFIX}.ln_f"), h)
}

fn check_size(cfg: &EncoderConfig, image: &Image) -> Result<(usize, usize)> {
    cfg.validate(image.width, image.height)?;
    Ok(cfg.grid(image.width, image.height))
}

/// E(I).
pub fn encode<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    image: &Image,
) -> Result<FeatureMap<T>> {
    let (gh, gw) = check_size(cfg, image)?;
    let embedded = embed_image(params, cfg, image)?;
    let mut ctx = Ctx::new(params);
    let x = ctx.tape.constant(embedded);
    let y = encoder_body(&mut ctx, cfg, x, false);
    FeatureMap::new(gh, gw, ctx.tape.value(y).clone())
}

/// Z(E_c(I_m)) from the embedded marker image.
pub fn control_branch<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &EncoderConfig,
    embedded_marker: Var,
) -> Var {
    let h = encoder_body(ctx, cfg, embedded_marker, true);
    ZeroLinear::forward(ctx, h)
}

/// `frozen + Z(E_c(I_m))` where `frozen` already holds E(I).
pub fn fuse<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &EncoderConfig,
    frozen: Var,
    embedded_marker: Var,
) -> Result<Var> {
    let ctrl = control_branch(ctx, cfg, embedded_marker);
    if ctx.tape.value(ctrl).dim() != ctx.tape.value(frozen).dim() {
        return Err(Error::Shape(format!(
            "branch outputs {:?} vs {:?}",
            ctx.tape.value(ctrl).dim(),
            ctx.tape.value(frozen).dim()
        )));
    }
    Ok(ctx.tape.add(frozen, ctrl))
}

/// `E(I) + Z(E_c(I_m))`.
pub fn mcnet_forward<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    image: &Image,
    marker_image: &Image,
) -> Result<FeatureMap<T>> {
    if (image.width, image.height) != (marker_image.width, marker_image.height) {
        return Err(Error::Shape(format!(
            "image {}x{} vs marker image {}x{}",
            image.width, image.height, marker_image.width, marker_image.height
        )));
    }
    let frozen = encode(params, cfg, image)?;
    let embedded = embed_image(params, cfg, marker_image)?;
    let mut ctx = Ctx::new(params);
    let f = ctx.tape.constant(frozen.data);
    let m = ctx.tape.constant(embedded);
    let y = fuse(&mut ctx, cfg, f, m)?;
    FeatureMap::new(frozen.grid_h, frozen.grid_w, ctx.tape.value(y).clone())
}

/// `x W + b + scaling * (x A) B` for one adapted layer.
pub fn lora_forward<T: Scalar>(
    params: &ParamStore<T>,
    layer: &LoraLayer,
    x: &Array2<T>,
) -> Result<Array2<T>> {
    for name in [
        format!("{}.weight", layer.base),
        format!("{}.bias", layer.base),
    ] {
        params.get(&name)?;
    }
    if let Some(a) = &layer.adapter {
        params.get(&format!("{a}.down"))?;
        params.get(&format!("{a}.up"))?;
    }
    let w = params.value(&format!("{}.weight", layer.base))?;
    if x.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "input width {} vs layer input {}",
            x.ncols(),
            w.nrows()
        )));
    }
    let mut ctx = Ctx::new(params);
    let xv = ctx.tape.constant(x.clone());
    let y = layer.forward(&mut ctx, xv);
    Ok(ctx.tape.value(y).clone())
}
