//! Cross-modal relation inference and the contrastive objectives.
//!
//! Known image–report pairs form a sparse seed matrix `Y`. Intra-modal
//! similarity graphs `S_I` (images) and `S_T` (reports) spread that
//! supervision: `P ← S_I · P · S_T + Y`, starting from `P = Y`, for a fixed
//! number of steps, then rows are normalised. `P` is the (detached) soft
//! target of a bidirectional contrastive loss over evidence aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_rows, Graph, Matrix, Var};

pub const DEFAULT_PROPAGATION_STEPS: usize = 2;

/// Seed relations, propagation graphs and the inferred soft relations of one
/// batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationState {
    pub y: Matrix,
    pub s_i: Option<Matrix>,
    pub s_t: Option<Matrix>,
    pub p: Matrix,
    pub steps: usize,
    /// Rows of `p` with no mass (excluded from the alignment loss).
    pub zero_rows: usize,
}

impl RelationState {
    /// Builds graphs from the aggregates and propagates `y` through them.
    /// With fewer than two images or reports propagation is disabled and
    /// `p` is the row-normalised seed.
    pub fn infer(y: Matrix, h_i: &Matrix, h_r: &Matrix, tau_g: f64, steps: usize) -> Result<Self> {
        if y.shape() != (h_i.rows(), h_r.rows()) {
            return Err(Error::dimension(format!(
                "seed matrix {:?} vs {} images and {} reports",
                y.shape(),
                h_i.rows(),
                h_r.rows()
            )));
        }
        let (s_i, s_t, p) = match (
            propagation_matrix(h_i, tau_g)?,
            propagation_matrix(h_r, tau_g)?,
        ) {
            (Some(s_i), Some(s_t)) => {
                let p = propagate(&y, &s_i, &s_t, steps)?;
                (Some(s_i), Some(s_t), p)
            }
            _ => (None, None, row_normalize(&y)),
        };
        let zero_rows = p
            .iter_rows()
            .filter(|r| r.iter().all(|&v| v == 0.0))
            .count();
        Ok(Self {
            y,
            s_i,
            s_t,
            p,
            steps,
            zero_rows,
        })
    }
}

/// Mean of `rows`, then L2-normalised (1×d). A cancelling mean gives a zero
/// row; see [`is_degenerate`].
pub fn aggregate(g: &mut Graph, rows: Var) -> Var {
    let m = g.mean_rows(rows);
    g.l2_normalize_rows(m)
}

/// `H_R`: normalised mean of a report's phrase embeddings.
pub fn aggregate_report(g: &mut Graph, phrase_z: Var) -> Var {
    aggregate(g, phrase_z)
}

/// `H_I`: normalised mean of an image's projected lesion embeddings.
pub fn aggregate_image(g: &mut Graph, projected: Var) -> Var {
    aggregate(g, projected)
}

/// Batched aggregate over consecutive row segments, one output row each.
pub fn aggregate_segments(g: &mut Graph, rows: Var, segments: &[(usize, usize)]) -> Result<Var> {
    let m = g.segment_mean(rows, segments)?;
    Ok(g.l2_normalize_rows(m))
}

pub fn is_degenerate(h: &[f64]) -> bool {
    h.iter().all(|&v| v == 0.0)
}

/// Row-stochastic graph over the rows of `h`: softmax of cosine / τ_g with
/// the diagonal excluded. `None` when there are fewer than two rows.
pub fn propagation_matrix(h: &Matrix, tau_g: f64) -> Result<Option<Matrix>> {
    if h.rows() < 2 {
        return Ok(None);
    }
    let mut a = cosine_rows(h, h)?;
    for i in 0..a.rows() {
        a[(i, i)] = f64::NEG_INFINITY;
    }
    Ok(Some(a.row_softmax(tau_g)?))
}

/// `(S_I, S_T)` for a batch.
pub fn build_graphs(h_i: &Matrix, h_r: &Matrix, tau_g: f64) -> Result<Option<(Matrix, Matrix)>> {
    Ok(
        match (
            propagation_matrix(h_i, tau_g)?,
            propagation_matrix(h_r, tau_g)?,
        ) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        },
    )
}

/// `steps` iterations of `P ← S_I P S_T + Y` from `P = Y`, without the final
/// normalisation.
pub fn propagate_unnormalized(
    y: &Matrix,
    s_i: &Matrix,
    s_t: &Matrix,
    steps: usize,
) -> Result<Matrix> {
    let (ni, nr) = y.shape();
    if s_i.shape() != (ni, ni) || s_t.shape() != (nr, nr) {
        return Err(Error::dimension(format!(
            "propagate: Y {:?}, S_I {:?}, S_T {:?}",
            y.shape(),
            s_i.shape(),
            s_t.shape()
        )));
    }
    let mut p = y.clone();
    for _ in 0..steps {
        p = s_i.matmul(&p)?.matmul(s_t)?.add(y)?;
    }
    Ok(p)
}

/// Propagated relations with every row normalised to sum 1 (all-zero rows
/// stay zero).
pub fn propagate(y: &Matrix, s_i: &Matrix, s_t: &Matrix, steps: usize) -> Result<Matrix> {
    Ok(row_normalize(&propagate_unnormalized(y, s_i, s_t, steps)?))
}

pub fn row_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Soft-target InfoNCE in both directions:
/// `−(1/N_I) Σ_i Σ_j P_ij log softmax_j(H_I_i·H_R_j / τ)` plus the same with
/// the roles of images and reports exchanged (target `Pᵀ`). `p` is supervision
/// and receives no gradient.
pub fn loss_evidence_align(g: &mut Graph, h_i: Var, h_r: Var, p: &Matrix, tau: f64) -> Result<Var> {
    let (ni, _) = g.shape(h_i);
    let (nr, _) = g.shape(h_r);
    if p.shape() != (ni, nr) {
        return Err(Error::dimension(format!(
            "relation matrix {:?} for {ni} images and {nr} reports",
            p.shape()
        )));
    }
    let logits = g.matmul_t(h_i, h_r)?;
    let i2r = soft_cross_entropy(g, logits, p, tau)?;
    let logits_t = g.transpose(logits);
    let r2i = soft_cross_entropy(g, logits_t, &p.transpose(), tau)?;
    g.add(i2r, r2i)
}

/// `−(1/rows) Σ_ij target_ij · log softmax_j(logits_i / τ)`.
fn soft_cross_entropy(g: &mut Graph, logits: Var, target: &Matrix, tau: f64) -> Result<Var> {
    let rows = g.shape(logits).0;
    let logp = g.row_log_softmax(logits, tau)?;
    let t = g.constant(target.clone());
    let weighted = g.mul(logp, t)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Symmetric InfoNCE over L2-normalised global embeddings, row `i` of each
/// side being a matched pair.
pub fn loss_global(g: &mut Graph, image_global: Var, report_global: Var, tau: f64) -> Result<Var> {
    let (b, _) = g.shape(image_global);
    if g.shape(report_global).0 != b {
        return Err(Error::dimension(format!(
            "loss_global: {b} images vs {} reports",
            g.shape(report_global).0
        )));
    }
    let ni = g.l2_normalize_rows(image_global);
    let nr = g.l2_normalize_rows(report_global);
    let eye = Matrix::identity(b);
    let logits = g.matmul_t(ni, nr)?;
    let i2r = soft_cross_entropy(g, logits, &eye, tau)?;
    let logits_t = g.transpose(logits);
    let r2i = soft_cross_entropy(g, logits_t, &eye, tau)?;
    g.add(i2r, r2i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graphs_examples() {
        let h = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let s = propagation_matrix(&h, 0.1).unwrap().unwrap();
        assert_eq!(s, Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));

        // equilateral triangle directions: equal pairwise cosines
        let h = Matrix::from_rows(&[
            &[1.0, 0.0],
            &[-0.5, 3f64.sqrt() / 2.0],
            &[-0.5, -(3f64.sqrt()) / 2.0],
        ]);
        let s = propagation_matrix(&h, 0.1).unwrap().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((s[(i, j)] - want).abs() < 1e-12);
            }
        }

        assert!(propagation_matrix(&Matrix::row_vector(&[1.0, 0.0]), 0.1)
            .unwrap()
            .is_none());
    }

    #[test]
    fn propagate_identity() {
        let i = Matrix::identity(3);
        assert_eq!(propagate_unnormalized(&i, &i, &i, 2).unwrap(), i.scale(3.0));
        assert_eq!(propagate(&i, &i, &i, 2).unwrap(), i);
    }

    #[test]
    fn propagate_hand_example() {
        let y = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let s = Matrix::filled(2, 2, 0.5);
        let raw = propagate_unnormalized(&y, &s, &s, 2).unwrap();
        assert_eq!(raw, Matrix::from_rows(&[&[1.5, 0.5], &[0.5, 0.5]]));
        let p = propagate(&y, &s, &s, 2).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[0.75, 0.25], &[0.5, 0.5]]));
    }

    #[test]
    fn propagate_zero_steps_normalises_seed() {
        let y = Matrix::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
        let s_i = Matrix::filled(2, 2, 0.5);
        let s_t = Matrix::filled(3, 3, 1.0 / 3.0);
        let p = propagate(&y, &s_i, &s_t, 0).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0]]));
        assert!(propagate(&y, &s_t, &s_i, 1).is_err());
    }

    #[test]
    fn single_pair_alignment_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::row_vector(&[0.6, 0.8]));
        let b = g.constant(Matrix::row_vector(&[1.0, 0.0]));
        let l = loss_evidence_align(&mut g, a, b, &Matrix::identity(1), 0.07).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = loss_global(&mut g, a, b, 0.07).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn alignment_hand_computation() {
        let hi = Matrix::from_rows(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let hr = Matrix::from_rows(&[&[0.0, 1.0], &[0.8, 0.6]]);
        let p = Matrix::from_rows(&[&[0.75, 0.25], &[0.5, 0.5]]);
        let tau = 0.5;

        // brute force, straight from the definition
        let s = |i: usize, j: usize| (hi[(i, 0)] * hr[(j, 0)] + hi[(i, 1)] * hr[(j, 1)]) / tau;
        let mut i2r = 0.0;
        for i in 0..2 {
            let lse = (s(i, 0).exp() + s(i, 1).exp()).ln();
            for j in 0..2 {
                i2r -= p[(i, j)] * (s(i, j) - lse);
            }
        }
        let mut r2i = 0.0;
        for j in 0..2 {
            let lse = (s(0, j).exp() + s(1, j).exp()).ln();
            for i in 0..2 {
                r2i -= p[(i, j)] * (s(i, j) - lse);
            }
        }
        let expected = i2r / 2.0 + r2i / 2.0;

        let mut g = Graph::new();
        let a = g.constant(hi);
        let b = g.constant(hr);
        let l = loss_evidence_align(&mut g, a, b, &p, tau).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn global_orthogonal_pairs() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::identity(2));
        let l = loss_global(&mut g, a, a, 1.0).unwrap();
        let per_term = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((per_term - 0.313262).abs() < 1e-6);
        assert!((g.value(l).item() - 2.0 * per_term).abs() < 1e-12);
        assert!((g.value(l).item() - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn global_decreases_with_matched_similarity() {
        let loss_at = |c: f64| {
            let mut g = Graph::new();
            let i = g.constant(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            let r = g.constant(Matrix::from_rows(&[
                &[c, (1.0 - c * c).sqrt()],
                &[0.0, 1.0],
            ]));
            let l = loss_global(&mut g, i, r, 0.5).unwrap();
            g.value(l).item()
        };
        assert!(loss_at(0.9) < loss_at(0.5));
        assert!(loss_at(0.5) < loss_at(0.1));
    }

    #[test]
    fn aggregates() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::row_vector(&[3.0, 4.0]));
        let h = aggregate_report(&mut g, z);
        assert!(g.value(h).max_abs_diff(&Matrix::row_vector(&[0.6, 0.8])) < 1e-15);

        let a = g.constant(Matrix::from_rows(&[&[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0]]));
        let b = g.constant(Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0], &[0.5, -1.0]]));
        let ha = aggregate_image(&mut g, a);
        let hb = aggregate_image(&mut g, b);
        assert!(g.value(ha).max_abs_diff(g.value(hb)) < 1e-15);

        let anti = g.constant(Matrix::from_rows(&[&[0.6, 0.8], &[-0.6, -0.8]]));
        let h = aggregate_report(&mut g, anti);
        assert!(is_degenerate(g.value(h).row(0)));
    }

    #[test]
    fn relation_state_without_graphs() {
        let y = Matrix::from_rows(&[&[1.0]]);
        let st = RelationState::infer(
            y.clone(),
            &Matrix::row_vector(&[1.0, 0.0]),
            &Matrix::row_vector(&[0.0, 1.0]),
            0.1,
            2,
        )
        .unwrap();
        assert!(st.s_i.is_none());
        assert_eq!(st.p, y);
    }
}
