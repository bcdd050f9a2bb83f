//! Finite-difference checks of every training objective and relation dumps
//! for a single batch.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, Corpus, GenerationConfig, GroundTruthExtractor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{check_gradients_with, GradCheckOptions, Graph, Matrix, Var};
use crate::relation::RelationState;
use crate::trainer::{
    epoch_seed, forward, make_batches, Batch, BatchView, Detached, EvidenceTable, Mode,
    TrainConfig, TrainState,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

/// A tiny world, a four-sample batch and a freshly initialised model
/// (K=16 prototypes, L=8 lesion queries).
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub corpus: Corpus,
    pub evidence: EvidenceTable,
    pub config: TrainConfig,
    /// two paired samples, one unpaired image, one unpaired report
    pub mixed: Batch,
    /// four paired samples
    pub paired: Batch,
    pub model: Model,
}

pub fn gradcheck_fixture(seed: u64) -> Result<GradFixture> {
    let gen = GenerationConfig {
        tokens_per_concept: 6,
        background_tokens: 20,
        d_pix: 8,
        grid_side: 4,
        n_images: 8,
        pairing_ratio: 0.5,
        ..GenerationConfig::default()
    };
    let corpus = generate_corpus(&gen, seed)?;
    let evidence = EvidenceTable::extract(&corpus, &GroundTruthExtractor::new(&corpus.world))?;
    let config = TrainConfig {
        seed,
        d: 8,
        d_v: 8,
        k: 16,
        l: 8,
        batch_size: 4,
        paired_fraction_per_batch: 0.5,
        ..TrainConfig::small()
    };
    let mixed = make_batches(&corpus, 4, 0.5, seed)?.remove(0);
    let paired = Batch {
        paired: vec![0, 1, 2, 3],
        images: Vec::new(),
        reports: Vec::new(),
    };
    let model = TrainState::new(&config, &corpus.world)?.model;
    Ok(GradFixture {
        corpus,
        evidence,
        config,
        mixed,
        paired,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (block, flat index, analytic, finite difference) of the worst entry
    pub worst: Option<(String, usize, f64, f64)>,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// The LGDEA terms plus their weighted total, then the global baseline
/// objective, each checked against central differences over every
/// coordinate of every block the mode trains.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<TermCheck>> {
    let fx = gradcheck_fixture(seed)?;
    let mut out = Vec::new();
    let lgdea = TrainConfig {
        mode: Mode::Lgdea,
        ..fx.config.clone()
    };
    let view = BatchView::new(&fx.corpus, &fx.evidence, &fx.mixed)?;
    let frozen = {
        let mut g = Graph::new();
        let bm = fx.model.bind(&mut g, &|_| false);
        forward(&mut g, &bm, &view, &lgdea, None)?
            .detached
            .expect("evidence mode detaches")
    };
    for term in [
        "rec",
        "paired_evidence",
        "unpaired_evidence",
        "align",
        "total",
    ] {
        out.push(check_term(&fx.model, &view, &lgdea, Some(&frozen), term)?);
    }
    let baseline = TrainConfig {
        mode: Mode::GlobalBaseline,
        ..fx.config.clone()
    };
    let view = BatchView::new(&fx.corpus, &fx.evidence, &fx.paired)?;
    out.push(check_term(&fx.model, &view, &baseline, None, "global")?);
    Ok(out)
}

/// Checks one named term of the objective of `view` under `cfg`.
pub fn check_term(
    model: &Model,
    view: &BatchView,
    cfg: &TrainConfig,
    frozen: Option<&Detached>,
    term: &str,
) -> Result<TermCheck> {
    let active: Vec<(&'static str, Matrix)> = model
        .blocks()
        .into_iter()
        .filter(|(n, _)| cfg.mode.is_active(n))
        .map(|(n, m)| (n, m.clone()))
        .collect();
    let params: Vec<Matrix> = active.iter().map(|(_, m)| m.clone()).collect();
    let loss = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut next = 0;
        let bm = model.bind_with(&mut |name, m| {
            if cfg.mode.is_active(name) {
                next += 1;
                vars[next - 1]
            } else {
                g.constant(m.clone())
            }
        });
        let f = forward(g, &bm, view, cfg, frozen)?;
        let t = &f.terms;
        let v = match term {
            "rec" => t.rec,
            "paired_evidence" => t.paired_evidence,
            "unpaired_evidence" => t.unpaired_evidence,
            "align" => t.align,
            "global" => t.global,
            "total" => Some(f.total),
            other => return Err(Error::Usage(format!("unknown loss term {other}"))),
        };
        v.ok_or_else(|| Error::Usage(format!("term {term} is inactive in mode {}", cfg.mode)))
    };
    let opts = GradCheckOptions {
        step: GRADCHECK_STEP,
        max_coords_per_param: None,
        seed: 0,
    };
    let report = check_gradients_with(loss, &params, &opts)?;
    Ok(TermCheck {
        term: term.to_string(),
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
        worst: report
            .worst
            .map(|(p, i, a, f)| (active[p].0.to_string(), i, a, f)),
    })
}

/// Seed relations, graphs and propagated relations of one training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDump {
    pub epoch: usize,
    pub batch: usize,
    pub image_ids: Vec<u64>,
    pub report_ids: Vec<u64>,
    pub relations: RelationState,
}

/// Relations of batch `batch` of the first epoch under `cfg`'s shuffle.
pub fn dump_relations(
    model: &Model,
    corpus: &Corpus,
    evidence: &EvidenceTable,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<RelationDump> {
    if cfg.mode != Mode::Lgdea {
        return Err(Error::Usage("relations exist only in lgdea mode".into()));
    }
    let phase = cfg.phases()[0];
    let batches = make_batches(
        corpus,
        phase.batch_size,
        cfg.paired_fraction_per_batch,
        epoch_seed(cfg.seed, 0, 0),
    )?;
    let b = batches.get(batch).ok_or_else(|| {
        Error::Usage(format!(
            "batch {batch} out of range ({} batches)",
            batches.len()
        ))
    })?;
    let view = BatchView::new(corpus, evidence, b)?;
    let mut g = Graph::new();
    let bm = model.bind(&mut g, &|_| false);
    let f = forward(&mut g, &bm, &view, cfg, None)?;
    Ok(RelationDump {
        epoch: 0,
        batch,
        image_ids: b.image_ids(corpus),
        report_ids: b.report_ids(corpus),
        relations: f.detached.expect("evidence mode detaches").relations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_batches_have_the_declared_shape() {
        let fx = gradcheck_fixture(0).unwrap();
        assert_eq!(fx.mixed.paired.len(), 2);
        assert_eq!(fx.mixed.images.len(), 1);
        assert_eq!(fx.mixed.reports.len(), 1);
        assert_eq!(fx.model.dims().k, 16);
        assert_eq!(fx.model.dims().l, 8);
    }

    #[test]
    fn unknown_term_is_rejected() {
        let fx = gradcheck_fixture(0).unwrap();
        let view = BatchView::new(&fx.corpus, &fx.evidence, &fx.paired).unwrap();
        let cfg = TrainConfig {
            mode: Mode::GlobalBaseline,
            ..fx.config.clone()
        };
        assert!(check_term(&fx.model, &view, &cfg, None, "rec").is_err());
        assert!(check_term(&fx.model, &view, &cfg, None, "bogus").is_err());
    }

    #[test]
    fn relation_dump_has_batch_shape() {
        let fx = gradcheck_fixture(1).unwrap();
        let d = dump_relations(&fx.model, &fx.corpus, &fx.evidence, &fx.config, 0).unwrap();
        assert_eq!(d.relations.y.shape(), (3, 3));
        assert_eq!(d.relations.p.shape(), (3, 3));
        assert_eq!(d.image_ids.len(), 3);
    }
}
