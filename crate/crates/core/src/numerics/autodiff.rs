//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Each node holds its forward
//! value, a lazily allocated gradient slot, the indices of its parents and a
//! closure computing the parents' gradient contributions from the node's own
//! gradient. Because nodes are only ever appended after their parents,
//! reverse index order is a valid topological order for the backward sweep.
//!
//! Graphs are built per training step and dropped afterwards. Gradients
//! accumulate additively; a second `backward` on the same graph adds to the
//! existing slots unless [`Graph::zero_grad`] is called in between.

use crate::error::{Error, Result};
use crate::numerics::matrix::{
    check_temperature, log_softmax_in_place, softmax_in_place, Matrix, NORM_EPS,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a node's local-derivative closure.
struct BackwardCtx<'a> {
    grad: &'a Matrix,
    value: &'a Matrix,
    parents: &'a [&'a Matrix],
    needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Matrix>>>;

/// One node of the differentiation graph.
pub struct DiffNode {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

impl DiffNode {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, or `None` if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, materialising zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, parents: Vec<usize>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(DiffNode {
            value,
            grad: None,
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // interior slots belong to a single sweep; only leaves accumulate
        for n in &mut self.nodes[..=loss.0] {
            if n.backward.is_some() {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0].grad, Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let contributions = {
                let node = &self.nodes[i];
                let (Some(grad), Some(backward)) = (node.grad.as_ref(), node.backward.as_ref())
                else {
                    continue;
                };
                let parents: Vec<&Matrix> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let ctx = BackwardCtx {
                    grad,
                    value: &node.value,
                    parents: &parents,
                    needs: &needs,
                };
                backward(&ctx)
            };
            let parent_ids = self.nodes[i].parents.clone();
            for (p, g) in parent_ids.into_iter().zip(contributions) {
                if let Some(g) = g {
                    if self.nodes[p].requires_grad {
                        accumulate(&mut self.nodes[p].grad, g);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- structural ops -------------------------------------------------

    /// Same value, no gradient flow back to `x`.
    pub fn stopgrad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(
            value,
            vec![x.0],
            Box::new(|ctx| vec![Some(ctx.grad.transpose())]),
        )
    }

    /// Rows `indices` of `x`, in order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dimension(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let value = self.value(x).select_rows(indices);
        let idx = indices.to_vec();
        Ok(self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let mut g = Matrix::zeros(rows, cols);
                for (out_row, &src) in idx.iter().enumerate() {
                    let gr = ctx.grad.row(out_row);
                    for (a, b) in g.row_mut(src).iter_mut().zip(gr) {
                        *a += b;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Vertical concatenation.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats)?;
        let offsets: Vec<(usize, usize)> = {
            let mut start = 0;
            mats.iter()
                .map(|m| {
                    let r = (start, m.rows());
                    start += m.rows();
                    r
                })
                .collect()
        };
        Ok(self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |ctx| {
                offsets
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&(start, n), &need)| {
                        need.then(|| {
                            let idx: Vec<usize> = (start..start + n).collect();
                            ctx.grad.select_rows(&idx)
                        })
                    })
                    .collect()
            }),
        ))
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                let (a, b) = (ctx.parents[0], ctx.parents[1]);
                vec![
                    ctx.needs[0].then(|| ctx.grad.matmul_t(b).expect("shape checked")),
                    ctx.needs[1].then(|| a.t_matmul(ctx.grad).expect("shape checked")),
                ]
            }),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                let (a, b) = (ctx.parents[0], ctx.parents[1]);
                vec![
                    ctx.needs[0].then(|| ctx.grad.matmul(b).expect("shape checked")),
                    ctx.needs[1].then(|| ctx.grad.t_matmul(a).expect("shape checked")),
                ]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                let (a, b) = (ctx.parents[0], ctx.parents[1]);
                vec![
                    ctx.needs[0].then(|| ctx.grad.hadamard(b).expect("same shape")),
                    ctx.needs[1].then(|| ctx.grad.hadamard(a).expect("same shape")),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| vec![Some(ctx.grad.scale(s))]),
        )
    }

    /// `x + bias`, with the 1×c `bias` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(Error::dimension(format!(
                "add_row: bias {:?} vs input {:?}",
                bm.shape(),
                xm.shape()
            )));
        }
        let mut value = xm.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(bm.data()) {
                *v += b;
            }
        }
        Ok(self.push(
            value,
            vec![x.0, bias.0],
            Box::new(|ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut s = Matrix::zeros(1, ctx.grad.cols());
                    for r in ctx.grad.iter_rows() {
                        for (a, b) in s.data_mut().iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                    s
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        ))
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let value = Matrix::scalar(self.value(x).sum());
        self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| vec![Some(Matrix::filled(rows, cols, ctx.grad.item()))]),
        )
    }

    /// Sum of a list of 1×1 nodes. An empty list yields a constant zero.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Matrix::scalar(0.0)));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Column-wise mean over rows, as 1×cols.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.shape(x).0;
        let value = self.value(x).mean_rows();
        self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let inv = 1.0 / rows as f64;
                let row: Vec<f64> = ctx.grad.data().iter().map(|g| g * inv).collect();
                let mut g = Matrix::zeros(rows, row.len());
                for i in 0..rows {
                    g.row_mut(i).copy_from_slice(&row);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean of consecutive row ranges: output row `s` is the mean of rows
    /// `segments[s].0 .. segments[s].0 + segments[s].1` of `x`.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        for &(start, len) in segments {
            if len == 0 || start + len > rows {
                return Err(Error::dimension(format!(
                    "segment_mean: segment ({start}, {len}) invalid for {rows} rows"
                )));
            }
        }
        let xm = self.value(x);
        let mut value = Matrix::zeros(segments.len(), cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            let out = value.row_mut(s);
            for r in start..start + len {
                for (o, v) in out.iter_mut().zip(xm.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let segs = segments.to_vec();
        Ok(self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let mut g = Matrix::zeros(rows, cols);
                for (s, &(start, len)) in segs.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    let gs = ctx.grad.row(s);
                    for r in start..start + len {
                        for (o, v) in g.row_mut(r).iter_mut().zip(gs) {
                            *o += v * inv;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    // ---- nonlinear kernels ----------------------------------------------

    /// Row-wise softmax of `x / tau`.
    pub fn row_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let value = self.value(x).row_softmax(tau)?;
        Ok(self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let y = ctx.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), ctx.grad.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in g.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner) / tau;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Row-wise log-softmax of `x / tau`.
    pub fn row_log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_temperature(tau)?;
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            log_softmax_in_place(value.row_mut(i), tau);
        }
        Ok(self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let y = ctx.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gr = ctx.grad.row(i);
                    let total: f64 = gr.iter().sum();
                    for ((o, &ly), &gv) in g.row_mut(i).iter_mut().zip(y.row(i)).zip(gr) {
                        *o = (gv - ly.exp() * total) / tau;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows scaled to unit L2 norm; rows with norm ≤ eps map to zero rows and
    /// pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let norms: Vec<f64> = xm.iter_rows().map(crate::numerics::matrix::norm).collect();
        let value = xm.l2_normalize_rows();
        self.push(
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let y = ctx.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n <= NORM_EPS {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), ctx.grad.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in g.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * inner) / n;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Per-row `Σ_j p·(log(p+eps) − log(q+eps))`, as an N×1 column.
    pub fn kl_rows(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let (pm, qm) = (self.value(p), self.value(q));
        pm.ensure_same_shape(qm, "kl_divergence")?;
        if !(eps > 0.0) {
            return Err(Error::parameter(format!(
                "kl eps must be positive, got {eps}"
            )));
        }
        let rows: Vec<f64> = pm
            .iter_rows()
            .zip(qm.iter_rows())
            .map(|(pr, qr)| {
                pr.iter()
                    .zip(qr)
                    .map(|(&a, &b)| a * ((a + eps).ln() - (b + eps).ln()))
                    .sum()
            })
            .collect();
        let value = Matrix::from_vec(rows.len(), 1, rows)?;
        Ok(self.push(
            value,
            vec![p.0, q.0],
            Box::new(move |ctx| {
                let (p, q) = (ctx.parents[0], ctx.parents[1]);
                let gp = ctx.needs[0].then(|| {
                    Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                        let (a, b) = (p[(i, j)], q[(i, j)]);
                        ctx.grad[(i, 0)] * ((a + eps).ln() - (b + eps).ln() + a / (a + eps))
                    })
                });
                let gq = ctx.needs[1].then(|| {
                    Matrix::from_fn(q.rows(), q.cols(), |i, j| {
                        -ctx.grad[(i, 0)] * p[(i, j)] / (q[(i, j)] + eps)
                    })
                });
                vec![gp, gq]
            }),
        ))
    }

    /// KL(p ‖ q) summed over rows, as 1×1.
    pub fn kl_divergence(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let rows = self.kl_rows(p, q, eps)?;
        Ok(self.sum(rows))
    }

    /// Single-head scaled attention: `row_softmax(q·kᵀ, tau) · v`.
    ///
    /// Returns the attended output and the attention weights (one row per
    /// query, each a distribution over keys).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tau: f64) -> Result<(Var, Var)> {
        let (kr, _) = self.shape(k);
        let (vr, _) = self.shape(v);
        if kr != vr {
            return Err(Error::dimension(format!(
                "attention: {kr} keys but {vr} values"
            )));
        }
        let scores = self.matmul_t(q, k)?;
        let weights = self.row_softmax(scores, tau)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Plain (non-differentiable) softmax of a single row, for callers that only
/// need values.
pub fn softmax_row(values: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let mut out = values.to_vec();
    softmax_in_place(&mut out, tau);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(x: f64) -> (Graph, Var) {
        let mut g = Graph::new();
        let v = g.param(Matrix::scalar(x));
        (g, v)
    }

    #[test]
    fn square_sum_gradient() {
        let (mut g, x) = scalar_graph(3.0);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn stopgrad_severs_one_branch() {
        let (mut g, x) = scalar_graph(2.0);
        let frozen = g.stopgrad(x);
        assert_eq!(g.value(frozen), g.value(x));
        let prod = g.mul(x, frozen).unwrap();
        g.backward(prod).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 1));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let (mut g, x) = scalar_graph(3.0);
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[&[1.0, 0.0], &[2.5, 2.5]]));
        let s = g.row_softmax(x, 1.0).unwrap();
        let v = g.value(s);
        assert!((v[(0, 0)] - 0.731059).abs() < 1e-6);
        assert!((v[(0, 1)] - 0.268941).abs() < 1e-6);
        assert_eq!(v[(1, 0)], 0.5);
        assert!(matches!(g.row_softmax(x, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::row_vector(&[1.0, 0.0]));
        let q = g.constant(Matrix::row_vector(&[0.5, 0.5]));
        let kl = g.kl_divergence(p, q, 1e-12).unwrap();
        assert!((g.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-6);
        let same = g.kl_divergence(q, q, 1e-12).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let eps = 1e-12;
        let skew = g.constant(Matrix::row_vector(&[1.0 - eps, eps]));
        let big = g.kl_divergence(q, skew, eps).unwrap();
        let b = g.value(big).item();
        assert!(b.is_finite() && b > 10.0, "{b}");
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::row_vector(&[1.0, 0.0]));
        let q = g.constant(Matrix::row_vector(&[0.2, 0.3, 0.5]));
        assert!(matches!(
            g.kl_divergence(p, q, 1e-12),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let q = g.constant(Matrix::row_vector(&[10.0, 0.0]));
        let kv = g.constant(Matrix::identity(2));
        let (out, w) = g.attention(q, kv, kv, 0.1).unwrap();
        assert!((g.value(out)[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(g.value(out)[(0, 1)].abs() < 1e-6);
        assert!((g.value(w).sum() - 1.0).abs() < 1e-12);

        // a single key/value row is returned verbatim
        let k1 = g.constant(Matrix::row_vector(&[0.3, -0.2]));
        let v1 = g.constant(Matrix::row_vector(&[4.0, 5.0]));
        let (out, _) = g.attention(q, k1, v1, 1.0).unwrap();
        assert_eq!(g.value(out), &Matrix::row_vector(&[4.0, 5.0]));
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Matrix::from_rows(&[&[1.0, -3.0], &[0.5, 2.0]]));
        let k = g.constant(Matrix::from_rows(&[&[0.2, 0.1], &[0.2, 0.1], &[0.2, 0.1]]));
        let v = g.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 5.0], &[-1.0, 8.0]]));
        let (out, _) = g.attention(q, k, v, 0.7).unwrap();
        for r in g.value(out).iter_rows() {
            assert!((r[0] - 1.0).abs() < 1e-12);
            assert!((r[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_key_value_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Matrix::zeros(1, 2));
        let k = g.constant(Matrix::zeros(3, 2));
        let v = g.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            g.attention(q, k, v, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn constants_carry_no_graph() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::scalar(2.0));
        let b = g.scale(a, 3.0);
        assert!(!g.requires_grad(b));
        g.backward(b).unwrap();
        assert!(g.grad(a).is_none());
    }
}
