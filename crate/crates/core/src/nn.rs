//! Layers shared by the vision encoder and the language decoder.

use rand::Rng;

use crate::params::{normal_matrix, Ctx, ParamStore};
use crate::tensor::{AttnMask, Scalar, Var};
use ndarray::Array2;

/// Feed-forward expansion factor of every transformer block.
pub const MLP_RATIO: usize = 4;

/// Dense layer `x W + b` stored as `<prefix>.weight` (`in x out`) and
/// `<prefix>.bias` (`1 x out`).
pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    trainable: bool,
) {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        normal_matrix(rng, d_in, d_out, std),
        trainable,
    );
    store.insert(
        format!("{prefix}.bias"),
        Array2::zeros((1, d_out)),
        trainable,
    );
}

pub fn linear<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Var {
    let w = ctx.p(&format!("{prefix}.weight"));
    let b = ctx.p(&format!("{prefix}.bias"));
    let y = ctx.tape.matmul(x, w);
    ctx.tape.add_row(y, b)
}

pub fn init_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    trainable: bool,
) {
    store.insert(format!("{prefix}.gamma"), Array2::ones((1, dim)), trainable);
    store.insert(format!("{prefix}.beta"), Array2::zeros((1, dim)), trainable);
}

pub fn layer_norm<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Var {
    let g = ctx.p(&format!("{prefix}.gamma"));
    let b = ctx.p(&format!("{prefix}.beta"));
    ctx.tape.layer_norm(x, g, b)
}

/// A frozen dense layer with an optional low-rank adapter:
/// `y = x W + b + scaling * (x A) B`.
///
/// `A` (`<adapter>.down`, `in x rank`) is random, `B` (`<adapter>.up`,
/// `rank x out`) starts at zero, so the adapted layer equals the base layer
/// at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub base: String,
    pub adapter: Option<String>,
    pub scaling: f64,
}

impl LoraLayer {
    pub fn new(base: impl Into<String>, adapter: Option<String>, rank: usize) -> Self {
        LoraLayer {
            base: base.into(),
            adapter,
            scaling: 1.0 / rank as f64,
        }
    }

    pub fn init_adapter<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
    ) {
        let std = 1.0 / (d_in as f64).sqrt();
        store.insert(
            format!("{prefix}.down"),
            normal_matrix(rng, d_in, rank, std),
            true,
        );
        store.insert(format!("{prefix}.up"), Array2::zeros((rank, d_out)), true);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = linear(ctx, &self.base, x);
        let Some(adapter) = &self.adapter else {
            return y;
        };
        let down = ctx.p(&format!("{adapter}.down"));
        let up = ctx.p(&format!("{adapter}.up"));
        let h = ctx.tape.matmul(x, down);
        let h = ctx.tape.matmul(h, up);
        let h = ctx.tape.scale(h, T::lit(self.scaling));
        ctx.tape.add(y, h)
    }
}

/// Sub-layers of a block that carry adapters: the attention projections
/// and both feed-forward layers.
pub const ADAPTED_LAYERS: [&str; 6] =
    ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"];

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub base: String,
    pub adapter: Option<String>,
    pub heads: usize,
    pub rank: usize,
}

impl Block {
    pub fn init_base<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) {
        init_layer_norm(store, &format!("{prefix}.ln1"), dim, false);
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            init_linear(store, rng, &format!("{prefix}.{name}"), dim, dim, false);
        }
        init_layer_norm(store, &format!("{prefix}.ln2"), dim, false);
        init_linear(
            store,
            rng,
            &format!("{prefix}.mlp.fc1"),
            dim,
            dim * MLP_RATIO,
            false,
        );
        init_linear(
            store,
            rng,
            &format!("{prefix}.mlp.fc2"),
            dim * MLP_RATIO,
            dim,
            false,
        );
    }

    pub fn init_adapters<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        rank: usize,
    ) {
        for name in ADAPTED_LAYERS {
            let (d_in, d_out) = match name {
                "mlp.fc1" => (dim, dim * MLP_RATIO),
                "mlp.fc2" => (dim * MLP_RATIO, dim),
                _ => (dim, dim),
            };
            LoraLayer::init_adapter(store, rng, &format!("{prefix}.{name}"), d_in, d_out, rank);
        }
    }

    fn layer(&self, name: &str) -> LoraLayer {
        LoraLayer::new(
            format!("{}.{name}", self.base),
            self.adapter.as_ref().map(|a| format!("{a}.{name}")),
            self.rank,
        )
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: &AttnMask) -> Var {
        let h = layer_norm(ctx, &format!("{}.ln1", self.base), x);
        let q = self.layer("attn.q").forward(ctx, h);
        let k = self.layer("attn.k").forward(ctx, h);
        let v = self.layer("attn.v").forward(ctx, h);
        let a = ctx.tape.attention(q, k, v, self.heads, mask);
        let o = self.layer("attn.o").forward(ctx, a);
        let x = ctx.tape.add(x, o);
        let h = layer_norm(ctx, &format!("{}.ln2", self.base), x);
        let f = self.layer("mlp.fc1").forward(ctx, h);
        let f = ctx.tape.gelu(f);
        let f = self.layer("mlp.fc2").forward(ctx, f);
        ctx.tape.add(x, f)
    }
}
