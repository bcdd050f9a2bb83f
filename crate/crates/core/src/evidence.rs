//! The shared diagnostic evidence space.
//!
//! A bank of K learnable prototypes spans the space. Report phrases and
//! projected lesions are both described by their softmax assignment over
//! the prototypes. Three losses live here: prototype reconstruction of phrase
//! embeddings, report→image distribution distillation for paired samples,
//! and kNN-weighted consistency between visually similar lesions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::init_uniform;
use crate::error::{Error, Result};
use crate::numerics::{cosine_rows, softmax_row, Graph, Matrix, Var, KL_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// K × d
    pub mu: Matrix,
    pub tau_t: f64,
    pub tau_p: f64,
}

impl PrototypeBank {
    pub fn init(k: usize, d: usize, tau_t: f64, tau_p: f64, rng: &mut impl Rng) -> Self {
        Self {
            mu: init_uniform(k, d, crate::encoders::INIT_SCALE, rng),
            tau_t,
            tau_p,
        }
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundBank {
        self.bind_with(&mut |m| g.param(m.clone()))
    }

    pub fn bind_with(&self, bind: &mut dyn FnMut(&Matrix) -> Var) -> BoundBank {
        BoundBank {
            mu: bind(&self.mu),
            tau_t: self.tau_t,
            tau_p: self.tau_p,
        }
    }

    /// Rescale every prototype to unit norm.
    pub fn renormalize(&mut self) {
        self.mu = self.mu.l2_normalize_rows();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBank {
    pub mu: Var,
    pub tau_t: f64,
    pub tau_p: f64,
}

/// A validated probability row over the K prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagDistribution(Vec<f64>);

impl DiagDistribution {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::input(
                "distribution has a negative or non-finite entry",
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::input(format!("distribution sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Validates every row of a row-stochastic matrix.
    pub fn rows_of(m: &Matrix) -> Result<Vec<Self>> {
        m.iter_rows().map(|r| Self::new(r.to_vec())).collect()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `p(k | z)` for every row of `z`: softmax of `z·μᵀ / τ_t`.
pub fn soft_assign(g: &mut Graph, z: Var, bank: &BoundBank) -> Result<Var> {
    if g.value(z).iter_rows().any(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::input("soft_assign on a zero embedding"));
    }
    let logits = g.matmul_t(z, bank.mu)?;
    g.row_softmax(logits, bank.tau_t)
}

/// Value-only soft assignment, for inspection and tests.
pub fn soft_assign_values(z: &[f64], mu: &Matrix, tau: f64) -> Result<DiagDistribution> {
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::input("soft_assign on a zero embedding"));
    }
    let logits: Vec<f64> = mu.iter_rows().map(|m| crate::numerics::dot(z, m)).collect();
    DiagDistribution::new(softmax_row(&logits, tau)?)
}

/// How the per-phrase reconstruction errors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    /// Sum divided by the number of phrases; keeps the term's scale
    /// independent of batch size and phrases per report.
    #[default]
    Mean,
}

/// Reconstruction of phrase embeddings from the prototypes plus the
/// prototype norm penalty:
/// `Σ_n ‖z_n − Σ_k p(k|z_n) μ_k‖² + λ Σ_k ‖μ_k‖²`, with the first sum
/// divided by the phrase count under [`Reduction::Mean`].
///
/// `z` may be `None` when the batch has no evidence; only the penalty is
/// returned then.
pub fn loss_rec(
    g: &mut Graph,
    z: Option<Var>,
    bank: &BoundBank,
    lambda_reg: f64,
    reduction: Reduction,
) -> Result<Var> {
    let mu_sq = g.mul(bank.mu, bank.mu)?;
    let reg = g.sum(mu_sq);
    let reg = g.scale(reg, lambda_reg);
    let Some(z) = z else {
        log::debug!("loss_rec: no evidence embeddings in batch, regulariser only");
        return Ok(reg);
    };
    let assign = soft_assign(g, z, bank)?;
    let recon = g.matmul(assign, bank.mu)?;
    let diff = g.sub(z, recon)?;
    let sq = g.mul(diff, diff)?;
    let mut rec = g.sum(sq);
    if reduction == Reduction::Mean {
        rec = g.scale(rec, 1.0 / g.value(z).rows() as f64);
    }
    g.add(rec, reg)
}

/// `Q_I`: per-lesion softmax of `φ(v)·μᵀ / τ_p`.
pub fn lesion_distributions(g: &mut Graph, projected: Var, bank: &BoundBank) -> Result<Var> {
    let logits = g.matmul_t(projected, bank.mu)?;
    g.row_softmax(logits, bank.tau_p)
}

/// `Q̄_I`: mean of the lesion rows.
pub fn aggregate_image_distribution(g: &mut Graph, lesion_dists: Var) -> Var {
    g.mean_rows(lesion_dists)
}

/// `Q̄_R`: mean soft assignment of a report's phrase embeddings.
pub fn report_distribution(g: &mut Graph, phrase_z: Var, bank: &BoundBank) -> Result<Var> {
    let a = soft_assign(g, phrase_z, bank)?;
    Ok(g.mean_rows(a))
}

/// `KL(Q̄_R ‖ Q̄_I)` with the report side detached as teacher.
pub fn loss_paired_evidence(g: &mut Graph, report_dist: Var, image_dist: Var) -> Result<Var> {
    let teacher = g.stopgrad(report_dist);
    g.kl_divergence(teacher, image_dist, KL_EPS)
}

/// Row-wise [`loss_paired_evidence`] averaged over paired samples: row `i`
/// of `report_dists` teaches row `i` of `image_dists`.
pub fn loss_paired_evidence_rows(
    g: &mut Graph,
    report_dists: Var,
    image_dists: Var,
) -> Result<Var> {
    let n = g.shape(report_dists).0;
    let teacher = g.stopgrad(report_dists);
    let kl = g.kl_rows(teacher, image_dists, KL_EPS)?;
    let s = g.sum(kl);
    Ok(g.scale(s, 1.0 / n.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbors {
    /// `indices[i]`: the k most cosine-similar lesions to `i`, best first.
    pub indices: Vec<Vec<usize>>,
    /// `weights[i]`: softmax over the matching cosines.
    pub weights: Vec<Vec<f64>>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

/// k nearest lesions by cosine, self excluded, ties to the lower index.
pub fn knn_neighbors(lesions: &Matrix, k: usize) -> Result<Neighbors> {
    let n = lesions.rows();
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "k-NN needs 1 <= k < N_L, got k={k} with N_L={n}"
        )));
    }
    let cos = cosine_rows(lesions, lesions)?;
    let mut indices = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = cos.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let top: Vec<usize> = order[..k].to_vec();
        let sims: Vec<f64> = top.iter().map(|&j| row[j]).collect();
        weights.push(softmax_row(&sims, 1.0)?);
        indices.push(top);
    }
    Ok(Neighbors { indices, weights })
}

/// `(1/N_L) Σ_i Σ_{j∈N(i)} w_ij · KL(Q_i ‖ stopgrad(Q_j))`.
pub fn loss_unpaired_evidence(g: &mut Graph, dists: Var, nb: &Neighbors) -> Result<Var> {
    let targets = g.stopgrad(dists);
    loss_unpaired_evidence_with_targets(g, dists, targets, nb)
}

/// As [`loss_unpaired_evidence`] with the neighbour rows read from `targets`
/// (normally a detached copy of `dists`; a frozen snapshot under gradient
/// checks).
pub fn loss_unpaired_evidence_with_targets(
    g: &mut Graph,
    dists: Var,
    targets: Var,
    nb: &Neighbors,
) -> Result<Var> {
    let n = g.shape(dists).0;
    if g.shape(targets) != g.shape(dists) {
        return Err(Error::dimension(
            "kNN targets and lesion distributions differ in shape",
        ));
    }
    if nb.indices.len() != n {
        return Err(Error::dimension(format!(
            "{} neighbour lists for {n} lesions",
            nb.indices.len()
        )));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for (i, (idx, ws)) in nb.indices.iter().zip(&nb.weights).enumerate() {
        for (&j, &wij) in idx.iter().zip(ws) {
            src.push(i);
            dst.push(j);
            w.push(wij);
        }
    }
    if src.is_empty() {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let targets = g.gather_rows(targets, &dst)?;
    let students = g.gather_rows(dists, &src)?;
    let kl = g.kl_rows(students, targets, KL_EPS)?;
    let wv = g.constant(Matrix::from_vec(w.len(), 1, w)?);
    let weighted = g.mul(kl, wv)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / n as f64))
}
