//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D matrix (`rows x cols`); vectors are
//! `1 x n`. Operations are fused at the granularity the models need
//! (layer norm, multi-head attention, softmax cross-entropy) so the tape
//! stays short and each backward rule can be checked by finite differences.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable on the tape (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Lossy conversion from `f64`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention visibility pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key (encoder self-attention).
    Full,
    /// Causal attention over a packed sequence. Row `i` may attend to row
    /// `j <= i` when `segments[j] == 0` (shared prefix) or
    /// `segments[j] == segments[i]`.
    Packed { segments: Vec<u32> },
}

impl AttnMask {
    pub fn causal(n: usize) -> Self {
        AttnMask::Packed {
            segments: vec![0; n],
        }
    }

    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Packed { segments } => {
                j <= i && (segments[j] == 0 || segments[j] == segments[i])
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: Vec<Array2<T>>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumProduct(Var, Array2<T>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named parameter leaf. Binding the same name twice returns the same
    /// node so gradients from shared uses accumulate.
    pub fn param(&mut self, name: &str, value: &Array2<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + &r.row(0);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.ncols()).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *is = inv;
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let value = &xhat * &g + &b;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu_fwd);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values (`n x d` each, `d` divisible by `heads`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(kv.dim(), (n, d));
        assert_eq!(vv.dim(), (n, d));
        assert_eq!(d % heads, 0, "width not divisible by heads");
        if let AttnMask::Packed { segments } = mask {
            assert_eq!(segments.len(), n, "mask length mismatch");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(if rg { heads } else { 0 });
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut p = qh.dot(&kh.t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let mut max = T::neg_infinity();
                for (j, e) in row.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        *e *= scale;
                        if *e > max {
                            max = *e;
                        }
                    } else {
                        *e = T::neg_infinity();
                    }
                }
                let mut sum = T::zero();
                for e in row.iter_mut() {
                    *e = if e.is_finite() {
                        (*e - max).exp()
                    } else {
                        T::zero()
                    };
                    sum += *e;
                }
                row.mapv_inplace(|e| e / sum);
            }
            out.slice_mut(cols).assign(&p.dot(&vh));
            if rg {
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`. Returns
    /// a `1 x 1` node; rows with `None` (padding) contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut total = T::zero();
        let mut count = 0usize;
        for ((mut row, t), raw) in probs.rows_mut().into_iter().zip(targets).zip(lv.rows()) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.iter().copied().sum::<T>();
            row.mapv_inplace(|e| e / sum);
            if let Some(t) = *t {
                // log-sum-exp form stays exact when p_t underflows
                total += sum.ln() + max - raw[t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// `sum(a * w)` for a constant weight matrix `w`; a `1 x 1` node.
    pub fn sum_product(&mut self, a: Var, w: &Array2<T>) -> Var {
        let value = (self.value(a) * w).sum();
        let rg = self.rg(a);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::SumProduct(a, w.clone()),
            rg,
        )
    }

    /// Reverse sweep from a scalar (`1 x 1`) output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), T::one()));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let by_param = self
            .params
            .iter()
            .filter_map(|(name, v)| {
                if !self.nodes[v.0].requires_grad {
                    return None;
                }
                grads[v.0].as_ref().map(|g| (name.clone(), g.clone()))
            })
            .collect();
        Gradients {
            nodes: grads,
            by_param,
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(g);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g * *c);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let n = T::from_usize(xhat.ncols()).unwrap();
                    let dxhat = g * &gam;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (((mut dxr, dh), xh), &is) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_xh =
                            dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        Zip::from(&mut dxr).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = is * (d - mean_dh - h * mean_dh_xh);
                        });
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= g;
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.dim();
                let dh = d / heads;
                let mut dq = Array2::zeros((n, d));
                let mut dk = Array2::zeros((n, d));
                let mut dv = Array2::zeros((n, d));
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let dp = go.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = dp;
                    for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut dsr)
                            .and(&pr)
                            .for_each(|e, &pp| *e = pp * (*e - dot) * *scale);
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                if self.rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    if self.rg(p) {
                        accumulate(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, rows) => {
                if self.rg(*a) {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (src, &dst) in rows.iter().enumerate() {
                        let mut r = ga.row_mut(dst);
                        r += &g.row(src);
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::SumProduct(a, w) => {
                if self.rg(*a) {
                    accumulate(grads, *a, w * g[(0, 0)]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.rg(*logits) && *count > 0 {
                    let scale = g[(0, 0)] / T::from_usize(*count).unwrap();
                    let mut gl = Array2::zeros(probs.dim());
                    for ((mut gr, pr), t) in
                        gl.rows_mut().into_iter().zip(probs.rows()).zip(targets)
                    {
                        if let Some(t) = *t {
                            gr.assign(&pr);
                            gr[t] -= T::one();
                            gr *= scale;
                        }
                    }
                    accumulate(grads, *logits, gl);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    by_param: HashMap<String, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Array2<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &HashMap<String, Array2<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> HashMap<String, Array2<T>> {
        self.by_param
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
