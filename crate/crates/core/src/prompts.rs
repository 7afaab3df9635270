//! Scene-level and instance-level prompt tokens.
//!
//! Both token kinds are linear reductions of the fused feature grid
//! followed by the same connected MLP, so the reductions are built as
//! constant matrices and applied with one matmul on the tape.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::marker::{MarkerIndexMap, MarkerSource};
use crate::nn;
use crate::params::{Ctx, ParamStore};
use crate::scene::{Detection, Mask, Point};
use crate::tensor::{Scalar, Var};
use crate::vision::FeatureMap;

pub const MLP_PREFIX: &str = "mlp";
/// Scene token counts per view: the full 16x16 grid or its 2x2 pooling.
pub const SCENE_TOKEN_OPTIONS: [usize; 2] = [256, 64];

/// The connected MLP `Linear -> GELU -> Linear` mapping encoder channels
/// to decoder width. One instance serves scene and instance tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConnectedMlp;

impl ConnectedMlp {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        in_dim: usize,
        out_dim: usize,
    ) {
        nn::init_linear(
            store,
            rng,
            &format!("{MLP_PREFIX}.fc1"),
            in_dim,
            out_dim,
            true,
        );
        nn::init_linear(
            store,
            rng,
            &format!("{MLP_PREFIX}.fc2"),
            out_dim,
            out_dim,
            true,
        );
    }

    pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = nn::linear(ctx, &format!("{MLP_PREFIX}.fc1"), x);
        let h = ctx.tape.gelu(h);
        nn::linear(ctx, &format!("{MLP_PREFIX}.fc2"), h)
    }
}

/// Nearest-neighbour downsampling: grid cell `(r, c)` takes the mask
/// pixel at the center of its footprint.
pub fn resize_mask_nearest(mask: &Mask, grid_h: usize, grid_w: usize) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        let y = (((2 * r + 1) * h) / (2 * grid_h)).min(h - 1);
        for c in 0..grid_w {
            let x = (((2 * c + 1) * w) / (2 * grid_w)).min(w - 1);
            out.push(mask.get(x, y));
        }
    }
    out
}

/// Grid cell containing pixel coordinate `p`.
pub fn cell_of(p: Point, width: usize, height: usize, grid_h: usize, grid_w: usize) -> usize {
    let r = ((p.y * grid_h as f64 / height as f64).floor().max(0.0) as usize).min(grid_h - 1);
    let c = ((p.x * grid_w as f64 / width as f64).floor().max(0.0) as usize).min(grid_w - 1);
    r * grid_w + c
}

/// Cells averaged for one mask. Falls back to the centroid's cell when the
/// object is too small to survive resizing.
pub fn pooled_cells(mask: &Mask, grid_h: usize, grid_w: usize) -> Result<Vec<usize>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let cells: Vec<usize> = resize_mask_nearest(mask, grid_h, grid_w)
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    if !cells.is_empty() {
        return Ok(cells);
    }
    let c = crate::marker::compute_centroid(mask)?;
    Ok(vec![cell_of(
        c,
        mask.width(),
        mask.height(),
        grid_h,
        grid_w,
    )])
}

/// Mean feature over the mask's cells.
pub fn mask_average_pool<T: Scalar>(fm: &FeatureMap<T>, mask: &Mask) -> Result<Vec<T>> {
    let cells = pooled_cells(mask, fm.grid_h, fm.grid_w)?;
    let mut acc = vec![T::zero(); fm.channels()];
    for &i in &cells {
        for (a, &v) in acc.iter_mut().zip(fm.data.row(i)) {
            *a += v;
        }
    }
    let n = T::lit(cells.len() as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `s_n x (grid_h*grid_w)` averaging matrix for non-overlapping square
/// pooling, or `None` when no reduction is needed.
pub fn scene_pool_matrix<T: Scalar>(
    grid_h: usize,
    grid_w: usize,
    s_n: usize,
) -> Result<Option<Array2<T>>> {
    let n = grid_h * grid_w;
    if s_n == n {
        return Ok(None);
    }
    let factor = (2..=grid_h.min(grid_w))
        .find(|&f| grid_h % f == 0 && grid_w % f == 0 && (grid_h / f) * (grid_w / f) == s_n)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{s_n} scene tokens unreachable from a {grid_h}x{grid_w} grid"
            ))
        })?;
    let (ph, pw) = (grid_h / factor, grid_w / factor);
    let weight = T::lit(1.0 / (factor * factor) as f64);
    let mut m = Array2::zeros((s_n, n));
    for r in 0..grid_h {
        for c in 0..grid_w {
            m[[(r / factor) * pw + c / factor, r * grid_w + c]] = weight;
        }
    }
    debug_assert_eq!(ph * pw, s_n);
    Ok(Some(m))
}

/// `K x (views*cells)` matrix whose row `k` averages the cells of marker
/// `k + 1` within its view's block of the stacked feature grids.
pub fn instance_pool_matrix<T: Scalar>(
    map: &MarkerIndexMap,
    detections: &[Detection],
    views: usize,
    grid_h: usize,
    grid_w: usize,
    width: usize,
    height: usize,
) -> Result<(Array2<T>, Vec<usize>)> {
    let cells = grid_h * grid_w;
    if map.detection_count() != detections.len() {
        return Err(Error::MarkerMismatch(format!(
            "{} detection entries for {} detections",
            map.detection_count(),
            detections.len()
        )));
    }
    let mut m = Array2::zeros((map.len(), views * cells));
    let mut order = Vec::with_capacity(map.len());
    for (row, e) in map.entries().iter().enumerate() {
        if e.view >= views {
            return Err(Error::MarkerMismatch(format!(
                "marker {} refers to missing view {}",
                e.index, e.view
            )));
        }
        let picked = match e.source {
            MarkerSource::Detection => pooled_cells(&detections[row].mask, grid_h, grid_w)?,
            MarkerSource::Question => vec![cell_of(e.centroid(), width, height, grid_h, grid_w)],
        };
        let w = T::lit(1.0 / picked.len() as f64);
        for c in picked {
            m[[row, e.view * cells + c]] = w;
        }
        order.push(e.index);
    }
    Ok((m, order))
}

/// Scene tokens for one view on the tape: optional pooling, then the MLP.
pub fn scene_prompts<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    ys: Var,
    grid_h: usize,
    grid_w: usize,
    s_n: usize,
) -> Result<Var> {
    let x = match scene_pool_matrix::<T>(grid_h, grid_w, s_n)? {
        Some(p) => {
            let p = ctx.tape.constant(p);
            ctx.tape.matmul(p, ys)
        }
        None => ys,
    };
    Ok(ConnectedMlp::forward(ctx, x))
}

/// Instance tokens on the tape from stacked per-view features.
pub fn instance_prompts<T: Scalar>(ctx: &mut Ctx<'_, T>, ys_all: Var, pool: Array2<T>) -> Var {
    let p = ctx.tape.constant(pool);
    let x = ctx.tape.matmul(p, ys_all);
    ConnectedMlp::forward(ctx, x)
}

/// Prompt tokens handed to the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle<T> {
    /// All views' scene tokens, view by view.
    pub scene_tokens: Array2<T>,
    pub instance_tokens: Array2<T>,
    /// Marker index of each instance-token row.
    pub instance_index_order: Vec<usize>,
}

impl<T: Scalar> PromptBundle<T> {
    /// Scene rows followed by instance rows.
    pub fn tokens(&self) -> Array2<T> {
        ndarray::concatenate![ndarray::Axis(0), self.scene_tokens, self.instance_tokens]
    }

    pub fn len(&self) -> usize {
        self.scene_tokens.nrows() + self.instance_tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.scene_tokens
            .iter()
            .chain(self.instance_tokens.iter())
            .all(|v| v.is_finite())
    }
}

fn run_mlp<T: Scalar>(params: &ParamStore<T>, x: Array2<T>) -> Array2<T> {
    let mut ctx = Ctx::new(params);
    let v = ctx.tape.constant(x);
    let y = ConnectedMlp::forward(&mut ctx, v);
    ctx.tape.value(y).clone()
}

pub fn build_scene_prompts<T: Scalar>(
    params: &ParamStore<T>,
    fm: &FeatureMap<T>,
    s_n: usize,
) -> Result<Array2<T>> {
    let x = match scene_pool_matrix::<T>(fm.grid_h, fm.grid_w, s_n)? {
        Some(p) => p.dot(&fm.data),
        None => fm.data.clone(),
    };
    Ok(run_mlp(params, x))
}

/// Instance tokens for every map entry, in marker-index order. `fms` holds
/// one feature map per view.
pub fn build_instance_prompts<T: Scalar>(
    params: &ParamStore<T>,
    fms: &[FeatureMap<T>],
    map: &MarkerIndexMap,
    detections: &[Detection],
    width: usize,
    height: usize,
) -> Result<(Array2<T>, Vec<usize>)> {
    let first = fms
        .first()
        .ok_or_else(|| Error::Shape("no feature maps".into()))?;
    let (gh, gw) = (first.grid_h, first.grid_w);
    let views: Vec<_> = fms.iter().map(|f| f.data.view()).collect();
    let stacked =
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let (pool, order) =
        instance_pool_matrix::<T>(map, detections, fms.len(), gh, gw, width, height)?;
    Ok((run_mlp(params, pool.dot(&stacked)), order))
}

pub fn assemble_bundle<T: Scalar>(
    scene_tokens: &[Array2<T>],
    instance_tokens: Array2<T>,
    instance_index_order: Vec<usize>,
) -> Result<PromptBundle<T>> {
    let dim = instance_tokens.ncols();
    if let Some(bad) = scene_tokens.iter().find(|s| s.ncols() != dim) {
        return Err(Error::Shape(format!(
            "scene token width {} vs instance width {dim}",
            bad.ncols()
        )));
    }
    if instance_index_order.len() != instance_tokens.nrows() {
        return Err(Error::Shape(format!(
            "{} index labels for {} instance tokens",
            instance_index_order.len(),
            instance_tokens.nrows()
        )));
    }
    let views: Vec<_> = scene_tokens.iter().map(|s| s.view()).collect();
    let scene = if views.is_empty() {
        Array2::zeros((0, dim))
    } else {
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
    };
    Ok(PromptBundle {
        scene_tokens: scene,
        instance_tokens,
        instance_index_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::build_index_map;
    use crate::scene::ObjectClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm_from(
        gh: usize,
        gw: usize,
        c: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> FeatureMap<f64> {
        FeatureMap::new(
            gh,
            gw,
            Array2::from_shape_fn((gh * gw, c), |(i, j)| f(i, j)),
        )
        .unwrap()
    }

    fn rect_mask(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Mask {
        Mask::from_points(w, h, (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))))
    }

    fn det(mask: Mask) -> Detection {
        Detection {
            object_id: 0,
            class_label: ObjectClass::Car,
            view: 0,
            mask,
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = fm_from(4, 4, 3, |_, j| j as f64 + 0.5);
        let m = rect_mask(64, 64, 3, 40, 10, 20);
        assert_eq!(mask_average_pool(&fm, &m).unwrap(), vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn full_mask_is_global_mean() {
        let fm = fm_from(4, 4, 2, |i, j| (i * 2 + j) as f64);
        let m = rect_mask(64, 64, 0, 64, 0, 64);
        let mean: Vec<f64> = (0..2).map(|j| fm.data.column(j).mean().unwrap()).collect();
        assert_eq!(mask_average_pool(&fm, &m).unwrap(), mean);
    }

    #[test]
    fn two_cell_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = fm_from(14, 14, 4, |_, _| rng.gen::<f64>());
        // patch 32: cells (0,0) and (0,1) cover cols 0..64, rows 0..32
        let m = rect_mask(448, 448, 0, 64, 0, 32);
        let got = mask_average_pool(&fm, &m).unwrap();
        for j in 0..4 {
            assert!((got[j] - 0.5 * (fm.data[[0, j]] + fm.data[[1, j]])).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_object_falls_back_to_centroid_cell() {
        let fm = fm_from(4, 4, 1, |i, _| i as f64);
        // 2x2 blob at pixels (1..3, 33..35) misses every sample point
        let m = rect_mask(64, 64, 1, 3, 33, 35);
        assert_eq!(pooled_cells(&m, 4, 4).unwrap(), vec![8]);
        assert_eq!(mask_average_pool(&fm, &m).unwrap(), vec![8.0]);
        assert!(matches!(
            pooled_cells(&Mask::new(4, 4), 2, 2),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn scene_pooling_counts() {
        assert!(scene_pool_matrix::<f64>(16, 16, 256).unwrap().is_none());
        let p = scene_pool_matrix::<f64>(16, 16, 64).unwrap().unwrap();
        assert_eq!(p.dim(), (64, 256));
        assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        assert_eq!(p[[0, 17]], 0.25);
        assert!(scene_pool_matrix::<f64>(16, 16, 100).is_err());
    }

    fn mlp_store(c: usize, d: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        ConnectedMlp::init(&mut s, &mut ChaCha8Rng::seed_from_u64(2), c, d);
        s
    }

    #[test]
    fn zero_weights_give_bias_image() {
        let mut s = mlp_store(4, 6);
        for n in ["mlp.fc1.weight", "mlp.fc2.weight"] {
            s.get_mut(n).unwrap().value.fill(0.0);
        }
        let b1 = Array2::from_elem((1, 6), 0.7);
        let b2 = Array2::from_shape_fn((1, 6), |(_, j)| j as f64);
        s.get_mut("mlp.fc1.bias").unwrap().value = b1;
        s.get_mut("mlp.fc2.bias").unwrap().value = b2.clone();
        let fm = fm_from(16, 16, 4, |i, j| (i + j) as f64);
        let tokens = build_scene_prompts(&s, &fm, 64).unwrap();
        assert_eq!(tokens.nrows(), 64);
        for row in tokens.rows() {
            assert_eq!(row, b2.row(0));
        }
    }

    #[test]
    fn instance_tokens_follow_index_order() {
        let s = mlp_store(2, 3);
        let fm = fm_from(4, 4, 2, |i, j| {
            if i < 8 {
                1.0 + j as f64
            } else {
                -2.0 * j as f64
            }
        });
        let dets = vec![
            det(rect_mask(64, 64, 0, 64, 0, 32)),
            det(rect_mask(64, 64, 0, 64, 32, 64)),
            det(rect_mask(64, 64, 0, 16, 0, 16)),
        ];
        let (map, _) = build_index_map(&dets).unwrap();
        let (tokens, order) =
            build_instance_prompts(&s, &[fm.clone()], &map, &dets, 64, 64).unwrap();
        assert_eq!(order, vec![1, 2, 3]);
        let region = |v: Vec<f64>| run_mlp(&s, Array2::from_shape_vec((1, 2), v).unwrap());
        assert!((&tokens.row(0) - &region(vec![1.0, 2.0]).row(0))
            .iter()
            .all(|d| d.abs() < 1e-12));
        assert!((&tokens.row(1) - &region(vec![0.0, -2.0]).row(0))
            .iter()
            .all(|d| d.abs() < 1e-12));
        assert_eq!(tokens.row(0), tokens.row(2));
    }

    #[test]
    fn question_entry_uses_containing_cell() {
        let s = mlp_store(1, 2);
        let fm = fm_from(4, 4, 1, |i, _| i as f64);
        let dets = vec![det(rect_mask(64, 64, 0, 8, 0, 8))];
        let (map, _) = build_index_map(&dets).unwrap();
        let (_, map) = map
            .assign_query_coordinate(Point::new(60.0, 60.0), 64, 64)
            .unwrap();
        let (pool, order) = instance_pool_matrix::<f64>(&map, &dets, 1, 4, 4, 64, 64).unwrap();
        assert_eq!(order, vec![1, 2]);
        assert_eq!(pool[[1, 15]], 1.0);
        let (tokens, _) = build_instance_prompts(&s, &[fm], &map, &dets, 64, 64).unwrap();
        assert_eq!(tokens.nrows(), 2);
    }

    #[test]
    fn bundle_layout() {
        let a = Array2::<f64>::zeros((4, 3));
        let b = Array2::<f64>::ones((4, 3));
        let inst = Array2::from_elem((2, 3), 2.0);
        let bundle = assemble_bundle(&[a, b], inst, vec![1, 2]).unwrap();
        assert_eq!(bundle.len(), 10);
        let t = bundle.tokens();
        assert_eq!(t[[0, 0]], 0.0);
        assert_eq!(t[[4, 0]], 1.0);
        assert_eq!(t[[8, 0]], 2.0);
        assert!(assemble_bundle(
            &[Array2::<f64>::zeros((1, 2))],
            Array2::zeros((0, 3)),
            vec![]
        )
        .is_err());
    }
}
