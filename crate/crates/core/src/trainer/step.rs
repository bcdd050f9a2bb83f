use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptWorld, EvidencePhrase, Report, TokenId};
use crate::error::{Error, Result};
use crate::evidence::{
    knn_neighbors, lesion_distributions, loss_paired_evidence_rows, loss_rec,
    loss_unpaired_evidence_with_targets, soft_assign, Neighbors,
};
use crate::model::{encode_images, encode_reports, BoundModel, Model, BLOCK_NAMES};
use crate::numerics::{Graph, Matrix, Var};
use crate::relation::{loss_evidence_align, loss_global, RelationState};

use super::batch::BatchView;
use super::config::{LossWeights, Mode, TrainConfig};
use super::optim::{adamw_step, Moments};

/// Scalar value of every loss term for one batch. Terms inactive in the
/// current mode are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub paired_evidence: f64,
    pub unpaired_evidence: f64,
    pub align: f64,
    pub global: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The optimised objective rebuilt from the terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.rec * self.rec
            + w.paired_evidence * self.paired_evidence
            + w.unpaired_evidence * self.unpaired_evidence
            + w.align * self.align
            + self.global
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("paired_evidence", self.paired_evidence),
            ("unpaired_evidence", self.unpaired_evidence),
            ("align", self.align),
            ("global", self.global),
            ("total", self.total),
        ]
    }
}

/// Quantities that a forward pass treats as constants: the report-side
/// teacher distributions, the kNN targets and neighbour lists, and the
/// propagated relations.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub report_teacher: Option<Matrix>,
    pub lesion_targets: Option<Matrix>,
    pub neighbors: Option<Neighbors>,
    pub relations: RelationState,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TermVars {
    pub rec: Option<Var>,
    pub paired_evidence: Option<Var>,
    pub unpaired_evidence: Option<Var>,
    pub align: Option<Var>,
    pub global: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub total: Var,
    pub terms: TermVars,
    /// `None` in the global baseline.
    pub detached: Option<Detached>,
}

impl Forward {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |t: Option<Var>| t.map_or(0.0, |t| g.value(t).item());
        LossBreakdown {
            rec: v(self.terms.rec),
            paired_evidence: v(self.terms.paired_evidence),
            unpaired_evidence: v(self.terms.unpaired_evidence),
            align: v(self.terms.align),
            global: v(self.terms.global),
            total: g.value(self.total).item(),
        }
    }
}

/// Builds the weighted objective of one batch.
///
/// With `frozen` set, the detached quantities are taken from it instead of
/// being recomputed, which makes the objective a smooth function of the
/// parameters for finite-difference checks.
pub fn forward(
    g: &mut Graph,
    m: &BoundModel,
    view: &BatchView,
    cfg: &TrainConfig,
    frozen: Option<&Detached>,
) -> Result<Forward> {
    match cfg.mode {
        Mode::Lgdea => forward_lgdea(g, m, view, cfg, frozen),
        Mode::GlobalBaseline => forward_global(g, m, view, cfg),
    }
}

fn forward_global(
    g: &mut Graph,
    m: &BoundModel,
    view: &BatchView,
    cfg: &TrainConfig,
) -> Result<Forward> {
    let n = view.n_paired;
    if n == 0 {
        return Err(Error::input("global baseline batch has no paired samples"));
    }
    let mut globals = Vec::with_capacity(n);
    for img in &view.images[..n] {
        let local = m.image.encode_local(g, &img.patches)?;
        globals.push(m.image.global_from_local(g, local)?);
    }
    let ig = g.vstack(&globals)?;
    let tokens: Vec<Vec<TokenId>> = view.reports[..n].iter().map(|r| r.tokens()).collect();
    let texts: Vec<&[TokenId]> = tokens.iter().map(Vec::as_slice).collect();
    let rg = m.text.encode_globals(g, &texts)?;
    let global = loss_global(g, ig, rg, cfg.temperatures.tau_1)?;
    Ok(Forward {
        total: global,
        terms: TermVars {
            global: Some(global),
            ..Default::default()
        },
        detached: None,
    })
}

fn forward_lgdea(
    g: &mut Graph,
    m: &BoundModel,
    view: &BatchView,
    cfg: &TrainConfig,
    frozen: Option<&Detached>,
) -> Result<Forward> {
    let w = cfg.loss_weights;
    let t = cfg.temperatures;

    // evidence space
    let reports: Vec<(&Report, &[EvidencePhrase])> = view
        .reports
        .iter()
        .copied()
        .zip(view.evidence.iter().copied())
        .collect();
    let text = encode_reports(g, m, &reports)?;
    let rec = loss_rec(g, text.z, &m.bank, cfg.lambda_reg, cfg.rec_reduction)?;

    // lesion evidence
    let patches: Vec<&Matrix> = view.images.iter().map(|i| &i.patches).collect();
    let images = encode_images(g, m, &patches)?;
    let q = lesion_distributions(g, images.projected, &m.bank)?;

    let with_evidence: Vec<usize> = (0..view.n_paired)
        .filter(|&i| text.segments[i].is_some())
        .collect();
    let mut report_teacher = None;
    let paired = match text.z {
        Some(z) if !with_evidence.is_empty() => {
            let r_segs: Vec<(usize, usize)> = with_evidence
                .iter()
                .map(|&i| text.segments[i].expect("filtered"))
                .collect();
            let i_segs: Vec<(usize, usize)> =
                with_evidence.iter().map(|&i| images.segments[i]).collect();
            let assign = soft_assign(g, z, &m.bank)?;
            let q_r = g.segment_mean(assign, &r_segs)?;
            let q_i = g.segment_mean(q, &i_segs)?;
            report_teacher = Some(g.value(q_r).clone());
            let teacher = match frozen.and_then(|f| f.report_teacher.as_ref()) {
                Some(fixed) => g.constant(fixed.clone()),
                None => q_r,
            };
            loss_paired_evidence_rows(g, teacher, q_i)?
        }
        _ => g.constant(Matrix::scalar(0.0)),
    };

    let n_lesions = g.shape(images.lesions).0;
    let (unpaired, neighbors, lesion_targets) = if n_lesions >= 2 {
        let nb = match frozen.and_then(|f| f.neighbors.as_ref()) {
            Some(nb) => nb.clone(),
            None => {
                let k = cfg.k_nn.min(n_lesions - 1);
                if k < cfg.k_nn {
                    log::warn!(
                        "batch has {n_lesions} lesions; k-NN shrinks from {} to {k}",
                        cfg.k_nn
                    );
                }
                knn_neighbors(g.value(images.lesions), k)?
            }
        };
        let snapshot = g.value(q).clone();
        let targets = match frozen.and_then(|f| f.lesion_targets.as_ref()) {
            Some(fixed) => g.constant(fixed.clone()),
            None => g.stopgrad(q),
        };
        let loss = loss_unpaired_evidence_with_targets(g, q, targets, &nb)?;
        (loss, Some(nb), Some(snapshot))
    } else {
        (g.constant(Matrix::scalar(0.0)), None, None)
    };

    // relation inference
    let h_i = images.aggregates(g)?;
    let h_r = text.h;
    let relations = match frozen {
        Some(f) => f.relations.clone(),
        None => RelationState::infer(
            view.seed_relations(),
            g.value(h_i),
            g.value(h_r),
            t.tau_g,
            cfg.propagation_steps,
        )?,
    };
    if relations.zero_rows > 0 {
        log::debug!(
            "{} image row(s) without relation mass skipped",
            relations.zero_rows
        );
    }

    // alignment
    let align = loss_evidence_align(g, h_i, h_r, &relations.p, t.tau_2)?;

    let weighted = [
        g.scale(rec, w.rec),
        g.scale(paired, w.paired_evidence),
        g.scale(unpaired, w.unpaired_evidence),
        g.scale(align, w.align),
    ];
    let total = g.sum_scalars(&weighted)?;
    Ok(Forward {
        total,
        terms: TermVars {
            rec: Some(rec),
            paired_evidence: Some(paired),
            unpaired_evidence: Some(unpaired),
            align: Some(align),
            global: None,
        },
        detached: Some(Detached {
            report_teacher,
            lesion_targets,
            neighbors,
            relations,
        }),
    })
}

/// Parameters, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// One entry per block, in `BLOCK_NAMES` order.
    pub moments: Vec<Moments>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub phase: usize,
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch_cursor: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, world: &ConceptWorld) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::init(
            &cfg.model_dims(world),
            cfg.temperatures.tau_t,
            cfg.temperatures.tau_p,
            cfg.seed,
        )?;
        if cfg.renormalize_prototypes && cfg.mode == Mode::Lgdea {
            model.bank.renormalize();
        }
        Ok(Self::from_model(model))
    }

    pub fn from_model(model: Model) -> Self {
        let moments = model
            .blocks()
            .iter()
            .map(|(_, b)| Moments::zeros_like(b))
            .collect();
        Self {
            model,
            moments,
            step: 0,
            phase: 0,
            epoch: 0,
            batch_cursor: 0,
        }
    }
}

/// Summary of the inferred relations of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub n_images: usize,
    pub n_reports: usize,
    pub n_paired: usize,
    pub zero_rows: usize,
    /// Mean over paired images of the mass `P` keeps on the known partner.
    pub paired_diagonal_mass: f64,
    /// Mean Shannon entropy of the non-zero rows of `P`.
    pub mean_row_entropy: f64,
    pub propagated: bool,
}

impl RelationStats {
    pub fn of(rel: &RelationState, n_paired: usize) -> Self {
        let p = &rel.p;
        let diag = if n_paired == 0 {
            0.0
        } else {
            (0..n_paired).map(|i| p[(i, i)]).sum::<f64>() / n_paired as f64
        };
        let mut ent = 0.0;
        let mut rows = 0usize;
        for r in p.iter_rows() {
            if r.iter().any(|&v| v != 0.0) {
                ent -= r
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>();
                rows += 1;
            }
        }
        Self {
            n_images: p.rows(),
            n_reports: p.cols(),
            n_paired,
            zero_rows: rel.zero_rows,
            paired_diagonal_mass: diag,
            mean_row_entropy: if rows == 0 { 0.0 } else { ent / rows as f64 },
            propagated: rel.s_i.is_some(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub relations: Option<RelationState>,
}

/// Forward, backward and one AdamW update of every block active in the
/// configured mode. Non-finite terms or gradients abort before any
/// parameter changes.
pub fn train_step(
    state: &mut TrainState,
    view: &BatchView,
    cfg: &TrainConfig,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let mode = cfg.mode;
    let mut g = Graph::new();
    let bm = state.model.bind(&mut g, &|name| mode.is_active(name));
    let fwd = forward(&mut g, &bm, view, cfg, None)?;
    let losses = fwd.breakdown(&g);
    let step = state.step + 1;

    let dump = |term: &str| -> Error {
        let record = serde_json::json!({
            "image_ids": view.images.iter().map(|i| i.id).collect::<Vec<_>>(),
            "report_ids": view.reports.iter().map(|r| r.id).collect::<Vec<_>>(),
            "losses": losses.named().iter()
                .map(|(k, v)| (k.to_string(), format!("{v}")))
                .collect::<std::collections::BTreeMap<_, _>>(),
        });
        Error::NonFinite {
            term: term.to_string(),
            step,
            dump: record.to_string(),
        }
    };
    if let Some((name, _)) = losses.named().iter().find(|(_, v)| !v.is_finite()) {
        return Err(dump(name));
    }

    g.backward(fwd.total)?;
    let vars = bm.vars();
    let mut grads = Vec::with_capacity(BLOCK_NAMES.len());
    for (name, &v) in BLOCK_NAMES.iter().zip(&vars) {
        if !mode.is_active(name) {
            grads.push(None);
            continue;
        }
        let grad = g.grad_or_zeros(v);
        if !grad.is_finite() {
            return Err(dump(&format!("gradient of {name}")));
        }
        grads.push(Some(grad));
    }
    drop(g);

    for (((name, block), moments), grad) in state
        .model
        .blocks_mut()
        .into_iter()
        .zip(&mut state.moments)
        .zip(&grads)
    {
        if let Some(grad) = grad {
            adamw_step(
                block,
                grad,
                moments,
                step,
                learning_rate,
                cfg.decay_for(name),
            )?;
        }
    }
    if cfg.renormalize_prototypes && mode == Mode::Lgdea {
        state.model.bank.renormalize();
    }
    state.step = step;
    Ok(StepOutcome {
        losses,
        relations: fwd.detached.map(|d| d.relations),
    })
}
