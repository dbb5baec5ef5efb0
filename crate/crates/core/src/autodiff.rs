//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a topologically ordered list of nodes, each holding a
//! 2-D value and a backward closure. Everything is a matrix: vectors are
//! `1×d`, scalars are `1×1`. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients into every leaf that was created with
//! [`Tape::leaf`]; nodes created with [`Tape::constant`] (and anything
//! derived only from constants) are skipped, which is how teacher/momentum
//! encoders run without gradient flow.
//!
//! The op set is the minimum needed for a ViT encoder plus the loss heads:
//! (bias-)add, elementwise ops, matmul, row/column slicing and concatenation,
//! stabilized (log-)softmax, layer norm, GELU, sigmoid, row L2
//! normalization, and reductions. Every backward formula is finite-difference
//! tested in this module.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type GradFn =
    Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>, &[bool]) -> Vec<Option<Array2<f64>>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Gradient of a scalar root with respect to every tape node.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf; zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<Var>, grad_fn: Option<GradFn>) -> Var {
        let needs_grad = grad_fn.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { grad_fn } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant; no gradient flows into or through it
    /// unless it is combined with a gradient-carrying node.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn check_same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(ctx, format!("{da:?}"), format!("{db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("add", a, b).expect("add shapes");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _p, _v, wants| {
                vec![
                    wants[0].then(|| g.clone()),
                    wants[1].then(|| g.clone()),
                ]
            })),
        )
    }

    /// `a + bias`, broadcasting a `1×d` bias over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (_, d) = self.dims(a);
        let (br, bd) = self.dims(bias);
        assert_eq!((br, bd), (1, d), "add_bias: bias must be 1×{d}");
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(
            value,
            vec![a, bias],
            Some(Box::new(|g, _p, _v, wants| {
                vec![
                    wants[0].then(|| g.clone()),
                    wants[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("sub", a, b).expect("sub shapes");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _p, _v, wants| {
                vec![wants[0].then(|| g.clone()), wants[1].then(|| -g)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("mul", a, b).expect("mul shapes");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _v, wants| {
                vec![wants[0].then(|| g * p[1]), wants[1].then(|| g * p[0])]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, _v, wants| {
                vec![wants[0].then(|| g.mapv(|x| x * s))]
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _p, _v, wants| vec![wants[0].then(|| g.clone())])),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, p, _v, wants| {
                vec![wants[0].then(|| 2.0 * &(g * p[0]))]
            })),
        )
    }

    /// `a · b` for `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((_, ka), (kb, _)) = (self.dims(a), self.dims(b));
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _v, wants| {
                vec![
                    wants[0].then(|| g.dot(&p[1].t())),
                    wants[1].then(|| p[0].t().dot(g)),
                ]
            })),
        )
    }

    /// `a · bᵀ` for `m×k` and `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ((_, ka), (_, kb)) = (self.dims(a), self.dims(b));
        assert_eq!(ka, kb, "matmul_nt: inner dims {ka} vs {kb}");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _v, wants| {
                vec![
                    wants[0].then(|| g.dot(p[1])),
                    wants[1].then(|| g.t().dot(p[0]).as_standard_layout().to_owned()),
                ]
            })),
        )
    }

    /// Columns `start..start+len` of `a`.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims(a);
        assert!(start + len <= cols, "narrow_cols out of range");
        let value = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, _v, wants| {
                vec![wants[0].then(|| {
                    let mut full = Array2::zeros((rows, cols));
                    full.slice_mut(s![.., start..start + len]).assign(g);
                    full
                })]
            })),
        )
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|p| self.dims(*p).1).collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for (p, w) in parts.iter().zip(&widths) {
            value
                .slice_mut(s![.., at..at + w])
                .assign(&self.nodes[p.0].value);
            at += w;
        }
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _p, _v, wants| {
                let mut at = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let piece =
                            wants[i].then(|| g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                        piece
                    })
                    .collect()
            })),
        )
    }

    /// Rows of `a` selected by `idx` (duplicates accumulate in backward).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (rows, cols) = self.dims(a);
        assert!(idx.iter().all(|&i| i < rows), "gather_rows out of range");
        let mut value = Array2::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&self.nodes[a.0].value.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, _v, wants| {
                vec![wants[0].then(|| {
                    let mut full = Array2::zeros((rows, cols));
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = full.row_mut(i);
                        row += &g.row(k);
                    }
                    full
                })]
            })),
        )
    }

    /// Vertical concatenation; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.dims(parts[0]).1;
        let heights: Vec<usize> = parts.iter().map(|p| self.dims(*p).0).collect();
        let total: usize = heights.iter().sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for (p, h) in parts.iter().zip(&heights) {
            value
                .slice_mut(s![at..at + h, ..])
                .assign(&self.nodes[p.0].value);
            at += h;
        }
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _p, _v, wants| {
                let mut at = 0;
                heights
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| {
                        let piece = wants[i].then(|| g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                        piece
                    })
                    .collect()
            })),
        )
    }

    /// `1×d` row repeated `count` times.
    pub fn repeat_row(&mut self, a: Var, count: usize) -> Var {
        let (r, d) = self.dims(a);
        assert_eq!(r, 1, "repeat_row expects a 1×d input");
        let row = self.nodes[a.0].value.row(0).to_owned();
        let mut value = Array2::zeros((count, d));
        for mut out in value.rows_mut() {
            out.assign(&row);
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _p, _v, wants| {
                vec![wants[0].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)))]
            })),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.nodes[a.0].value);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _p, v, wants| {
                vec![wants[0].then(|| {
                    let mut out = g * v;
                    for (mut row, (grow, vrow)) in out
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(v.rows()))
                    {
                        let dot = grow.dot(&vrow);
                        for (o, &y) in row.iter_mut().zip(vrow.iter()) {
                            *o -= dot * y;
                        }
                    }
                    out
                })]
            })),
        )
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(&self.nodes[a.0].value);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _p, v, wants| {
                vec![wants[0].then(|| {
                    let mut out = g.clone();
                    for (mut orow, (grow, lrow)) in out
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(v.rows()))
                    {
                        let gsum: f64 = grow.sum();
                        for (o, &l) in orow.iter_mut().zip(lrow.iter()) {
                            *o -= gsum * l.exp();
                        }
                    }
                    out
                })]
            })),
        )
    }

    /// Per-row layer normalization with learnable `1×d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, d) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, d));
        assert_eq!(self.dims(beta), (1, d));
        let xv = &self.nodes[x.0].value;
        let (normed, _, _) = layer_norm_forward(xv, eps);
        let value = &normed * &self.nodes[gamma.0].value + &self.nodes[beta.0].value;
        self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _v, wants| {
                let (xhat, _mu, sigma) = layer_norm_forward(p[0], eps);
                let gamma = p[1];
                let gx = wants[0].then(|| {
                    let gh = g * gamma;
                    let d = xhat.ncols() as f64;
                    let mut out = Array2::zeros(xhat.dim());
                    for ((mut orow, ghrow), (xrow, &s)) in out
                        .rows_mut()
                        .into_iter()
                        .zip(gh.rows())
                        .zip(xhat.rows().into_iter().zip(sigma.iter()))
                    {
                        let mean_gh: f64 = ghrow.sum() / d;
                        let mean_ghx: f64 = ghrow.dot(&xrow) / d;
                        for ((o, &ghv), &xh) in
                            orow.iter_mut().zip(ghrow.iter()).zip(xrow.iter())
                        {
                            *o = (ghv - mean_gh - xh * mean_ghx) / s;
                        }
                    }
                    out
                });
                let ggamma = wants[1]
                    .then(|| (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gbeta = wants[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                vec![gx, ggamma, gbeta]
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, p, _v, wants| {
                vec![wants[0].then(|| {
                    let mut out = p[0].mapv(gelu_grad_scalar);
                    out *= g;
                    out
                })]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _p, v, wants| {
                vec![wants[0].then(|| g * &v.mapv(|y| y * (1.0 - y)))]
            })),
        )
    }

    /// Rows scaled to unit Euclidean norm, `y = x / sqrt(|x|² + eps²)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        const EPS2: f64 = 1e-24;
        let xv = &self.nodes[a.0].value;
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r) + EPS2).sqrt())
            .collect();
        let mut value = xv.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, v, wants| {
                vec![wants[0].then(|| {
                    let mut out = g.clone();
                    for ((mut orow, vrow), &n) in
                        out.rows_mut().into_iter().zip(v.rows()).zip(&norms)
                    {
                        let dot = orow.dot(&vrow);
                        for (o, &y) in orow.iter_mut().zip(vrow.iter()) {
                            *o = (*o - dot * y) / n;
                        }
                    }
                    out
                })]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let dims = self.dims(a);
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, _v, wants| {
                vec![wants[0].then(|| Array2::from_elem(dims, g[(0, 0)]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let dims = self.dims(a);
        let n = (dims.0 * dims.1) as f64;
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _p, _v, wants| {
                vec![wants[0].then(|| Array2::from_elem(dims, g[(0, 0)] / n))]
            })),
        )
    }

    /// Mean binary cross-entropy over logits `z` against constant targets.
    /// Stable form `max(z,0) - y·z + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &Array2<f64>) -> Var {
        let zd = self.dims(z);
        assert_eq!(zd, targets.dim(), "bce_with_logits target shape");
        let n = (zd.0 * zd.1) as f64;
        let zv = &self.nodes[z.0].value;
        let loss = zv
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let y = targets.clone();
        self.push(
            Array2::from_elem((1, 1), loss),
            vec![z],
            Some(Box::new(move |g, p, _v, wants| {
                vec![wants[0].then(|| {
                    let s = g[(0, 0)] / n;
                    let mut out = p[0].mapv(sigmoid_scalar);
                    out -= &y;
                    out.mapv(|x| x * s)
                })]
            })),
        )
    }

    /// Accumulate gradients of a scalar root into all reachable nodes.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.dims(root), (1, 1), "backward root must be scalar");
        self.backward_seeded(root, Array2::from_elem((1, 1), 1.0))
    }

    /// Backward pass from an arbitrary root with an explicit output gradient.
    pub fn backward_seeded(&mut self, root: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(self.dims(root), seed.dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad_fn) = &self.nodes[i].grad_fn else {
                continue;
            };
            let g = grads[i].take().expect("checked above");
            let node = &self.nodes[i];
            let parent_vals: Vec<&Array2<f64>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let parent_grads = grad_fn(&g, &parent_vals, &node.value, &wants);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.clone().into_iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }
}

/// Row-wise softmax of a plain matrix (max-subtracted).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-softmax of a plain matrix (max-subtracted).
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn layer_norm_forward(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut normed = x.clone();
    let mut mus = Vec::with_capacity(x.nrows());
    let mut sigmas = Vec::with_capacity(x.nrows());
    for mut row in normed.rows_mut() {
        let mu = row.sum() / d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let sigma = (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mu) / sigma);
        mus.push(mu);
        sigmas.push(sigma);
    }
    (normed, mus, sigmas)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences on every component of every leaf.
    fn fd_check<F>(shapes: &[(usize, usize)], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = crate::rng::derived_rng(0xAD, "fd_check", 0);
        let inputs: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| rand_mat(r, c, &mut rng)).collect();

        let eval = |xs: &[Array2<f64>]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out)[(0, 0)]
        };

        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);

        let h = 1e-6;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var, inputs[vi].dim());
            for r in 0..inputs[vi].nrows() {
                for c in 0..inputs[vi].ncols() {
                    let mut plus = inputs.clone();
                    plus[vi][(r, c)] += h;
                    let mut minus = inputs.clone();
                    minus[vi][(r, c)] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (a - fd).abs() / denom < 1e-5,
                        "input {vi} at ({r},{c}): analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_check(&[(3, 4), (3, 4)], |t, v| {
            let x = t.add(v[0], v[1]);
            let y = t.mul(x, v[0]);
            let z = t.sub(y, v[1]);
            let w = t.scale(z, 0.7);
            let w = t.add_scalar(w, 0.3);
            let sq = t.square(w);
            t.mean_all(sq)
        });
    }

    #[test]
    fn fd_matmul_paths() {
        fd_check(&[(3, 4), (4, 2), (3, 2)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let z = t.matmul_nt(y, v[2]); // 3×3
            t.sum_all(z)
        });
    }

    #[test]
    fn fd_bias_and_repeat() {
        fd_check(&[(5, 3), (1, 3)], |t, v| {
            let y = t.add_bias(v[0], v[1]);
            let r = t.repeat_row(v[1], 5);
            let z = t.mul(y, r);
            t.mean_all(z)
        });
    }

    #[test]
    fn fd_slicing_ops() {
        fd_check(&[(4, 6)], |t, v| {
            let a = t.narrow_cols(v[0], 0, 3);
            let b = t.narrow_cols(v[0], 3, 3);
            let joined = t.concat_cols(&[b, a]);
            let picked = t.gather_rows(joined, &[0, 2, 2, 3]);
            let stacked = t.concat_rows(&[picked, joined]);
            let sq = t.square(stacked);
            t.sum_all(sq)
        });
    }

    #[test]
    fn fd_softmax_and_log_softmax() {
        fd_check(&[(3, 5), (3, 5)], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let lsm = t.log_softmax_rows(v[1]);
            let prod = t.mul(sm, lsm);
            t.sum_all(prod)
        });
    }

    #[test]
    fn fd_layer_norm() {
        fd_check(&[(4, 6), (1, 6), (1, 6)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
            let sq = t.square(y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn fd_activations() {
        fd_check(&[(3, 4)], |t, v| {
            let g = t.gelu(v[0]);
            let s = t.sigmoid(g);
            t.mean_all(s)
        });
    }

    #[test]
    fn fd_l2_normalize() {
        fd_check(&[(3, 4), (3, 4)], |t, v| {
            let q = t.l2_normalize_rows(v[0]);
            let k = t.l2_normalize_rows(v[1]);
            let sims = t.matmul_nt(q, k);
            let sm = t.log_softmax_rows(sims);
            t.mean_all(sm)
        });
    }

    #[test]
    fn fd_bce_with_logits() {
        let targets = Array2::from_shape_vec((4, 1), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        fd_check(&[(4, 1)], |t, v| t.bce_with_logits(v[0], &targets));
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_elem((2, 2), 2.0));
        let c = t.constant(Array2::from_elem((2, 2), 3.0));
        let y = t.mul(x, c);
        let out = t.sum_all(y);
        let grads = t.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::derived_rng(1, "softmax", 0);
        let x = rand_mat(6, 9, &mut rng).mapv(|v| v * 50.0);
        let sm = softmax_rows(&x);
        for row in sm.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Array2::from_shape_vec((1, 3), vec![1e4, 1e4 + 1.0, -1e4]).unwrap();
        let sm = softmax_rows(&x);
        assert!(sm.iter().all(|v| v.is_finite()));
        assert!((sm.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_seeded_accepts_matrix_roots() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_elem((2, 3), 1.5));
        let y = t.scale(x, 2.0);
        let seed = Array2::from_elem((2, 3), 1.0);
        let grads = t.backward_seeded(y, seed);
        assert_eq!(grads.get(x).unwrap(), &Array2::from_elem((2, 3), 2.0));
    }
}
