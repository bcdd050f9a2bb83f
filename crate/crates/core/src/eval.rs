//! Downstream evaluation on held-out data: retrieval Precision@K, zero-shot
//! classification against class prompts, and grounding CNR.
//!
//! LGDEA checkpoints are evaluated in the evidence space (`H_I` against
//! `H_R`, prompts as phrase embeddings); the global baseline uses its global
//! embeddings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptId, ConceptWorld, EvidencePhrase, PairedSample, Report, TokenId};
use crate::error::{Error, Result};
use crate::model::{encode_images, encode_reports, Model};
use crate::numerics::{cosine_rows, Graph, Matrix};
use crate::trainer::{EvidenceTable, Mode};

pub const PRECISION_KS: [usize; 4] = [1, 2, 5, 10];
pub const CNR_EPS: f64 = 1e-8;
pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Report indices by decreasing similarity, ties to the lower index.
fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

fn check_retrieval_inputs(
    image_emb: &Matrix,
    report_emb: &Matrix,
    image_classes: &[BTreeSet<ConceptId>],
    report_classes: &[BTreeSet<ConceptId>],
) -> Result<()> {
    if image_emb.rows() != image_classes.len() || report_emb.rows() != report_classes.len() {
        return Err(Error::dimension(format!(
            "{} image rows with {} class sets, {} report rows with {} class sets",
            image_emb.rows(),
            image_classes.len(),
            report_emb.rows(),
            report_classes.len()
        )));
    }
    if image_emb.rows() == 0 {
        return Err(Error::input("no images to evaluate"));
    }
    Ok(())
}

/// Mean over images of the fraction of the top-K reports (by cosine) whose
/// class set intersects the image's.
pub fn retrieval_precision(
    image_emb: &Matrix,
    report_emb: &Matrix,
    image_classes: &[BTreeSet<ConceptId>],
    report_classes: &[BTreeSet<ConceptId>],
    k: usize,
) -> Result<f64> {
    Ok(retrieval_precisions(image_emb, report_emb, image_classes, report_classes, &[k])?[&k])
}

/// [`retrieval_precision`] for several K from one ranking per image.
pub fn retrieval_precisions(
    image_emb: &Matrix,
    report_emb: &Matrix,
    image_classes: &[BTreeSet<ConceptId>],
    report_classes: &[BTreeSet<ConceptId>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_retrieval_inputs(image_emb, report_emb, image_classes, report_classes)?;
    let m = report_emb.rows();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::input(format!("K={k} outside 1..={m} reports")));
    }
    let sims = cosine_rows(image_emb, report_emb)?;
    let mut hits: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    for (i, classes) in image_classes.iter().enumerate() {
        let order = ranking(sims.row(i));
        for (&k, total) in hits.iter_mut() {
            let relevant = order[..k]
                .iter()
                .filter(|&&j| !report_classes[j].is_disjoint(classes))
                .count();
            *total += relevant as f64 / k as f64;
        }
    }
    let n = image_classes.len() as f64;
    Ok(hits.into_iter().map(|(k, t)| (k, t / n)).collect())
}

/// Index of the prompt with the highest cosine to `image_emb`; ties go to
/// the lower index.
pub fn zero_shot_classify(image_emb: &[f64], class_prompts: &Matrix) -> Result<usize> {
    if class_prompts.rows() < 2 {
        return Err(Error::input(
            "zero-shot classification needs at least two classes",
        ));
    }
    if class_prompts.cols() != image_emb.len() {
        return Err(Error::dimension(format!(
            "image embedding of width {} against prompts of width {}",
            image_emb.len(),
            class_prompts.cols()
        )));
    }
    let q = Matrix::row_vector(image_emb);
    let sims = cosine_rows(&q, class_prompts)?;
    Ok(crate::evidence::argmax(sims.row(0)))
}

/// Per-patch activation in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingMap {
    pub values: Vec<f64>,
    /// The raw map was constant; `values` are all zero and CNR is 0.
    pub degenerate: bool,
}

impl GroundingMap {
    /// Min-max normalisation of a raw activation vector.
    pub fn from_raw(raw: &[f64]) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if raw.is_empty() || !(span > 1e-12 * hi.abs().max(1.0)) {
            return Self {
                values: vec![0.0; raw.len()],
                degenerate: true,
            };
        }
        Self {
            values: raw.iter().map(|v| (v - lo) / span).collect(),
            degenerate: false,
        }
    }

    /// CNR of this map against `mask`, 0 when degenerate.
    pub fn cnr(&self, mask: &[usize]) -> Result<f64> {
        let c = cnr(&self.values, mask)?;
        Ok(if self.degenerate { 0.0 } else { c })
    }
}

/// Cosine between the phrase's evidence embedding and `φ` of every patch
/// embedding, min-max normalised.
pub fn grounding_map(model: &Model, patches: &Matrix, phrase: &[TokenId]) -> Result<GroundingMap> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, &|_| false);
    let z = bm.text.encode_evidence(&mut g, phrase)?;
    let local = bm.image.encode_local(&mut g, patches)?;
    let projected = bm.projection.project_evidence(&mut g, local)?;
    let raw = g.value(projected).matmul_t(g.value(z))?;
    Ok(GroundingMap::from_raw(raw.data()))
}

/// `(μ_in − μ_out) / sqrt(σ²_in + σ²_out + 1e-8)` with population variances.
pub fn cnr(map: &[f64], mask: &[usize]) -> Result<f64> {
    let inside: BTreeSet<usize> = mask.iter().copied().collect();
    if let Some(&i) = inside.iter().find(|&&i| i >= map.len()) {
        return Err(Error::input(format!(
            "mask index {i} outside a map of {}",
            map.len()
        )));
    }
    if inside.is_empty() || inside.len() == map.len() {
        return Err(Error::input(
            "CNR mask must be a non-empty proper subset of the patches",
        ));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, &v) in map.iter().enumerate() {
        if inside.contains(&i) {
            a.push(v);
        } else {
            b.push(v);
        }
    }
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    Ok((ma - mb) / (va + vb + CNR_EPS).sqrt())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v)
}

/// Unit-norm image embeddings in the space the mode retrieves in.
pub fn embed_images(model: &Model, mode: Mode, images: &[&Matrix]) -> Result<Matrix> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, &|_| false);
    let out = match mode {
        Mode::Lgdea => {
            let ib = encode_images(&mut g, &bm, images)?;
            ib.aggregates(&mut g)?
        }
        Mode::GlobalBaseline => {
            let mut rows = Vec::with_capacity(images.len());
            for p in images {
                let local = bm.image.encode_local(&mut g, p)?;
                rows.push(bm.image.global_from_local(&mut g, local)?);
            }
            let stacked = g.vstack(&rows)?;
            g.l2_normalize_rows(stacked)
        }
    };
    Ok(g.value(out).clone())
}

/// Unit-norm report embeddings in the space the mode retrieves in.
pub fn embed_reports(
    model: &Model,
    mode: Mode,
    reports: &[(&Report, &[EvidencePhrase])],
) -> Result<Matrix> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, &|_| false);
    let out = match mode {
        Mode::Lgdea => encode_reports(&mut g, &bm, reports)?.h,
        Mode::GlobalBaseline => {
            let tokens: Vec<Vec<TokenId>> = reports.iter().map(|(r, _)| r.tokens()).collect();
            let texts: Vec<&[TokenId]> = tokens.iter().map(Vec::as_slice).collect();
            let rg = bm.text.encode_globals(&mut g, &texts)?;
            g.l2_normalize_rows(rg)
        }
    };
    Ok(g.value(out).clone())
}

/// One unit row per concept from its class prompt.
pub fn embed_prompts(model: &Model, mode: Mode, world: &ConceptWorld) -> Result<Matrix> {
    let prompts: Vec<Vec<TokenId>> = (0..world.n_concepts)
        .map(|c| world.class_prompt(c))
        .collect();
    let texts: Vec<&[TokenId]> = prompts.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let bm = model.bind(&mut g, &|_| false);
    let out = match mode {
        Mode::Lgdea => bm.text.encode_phrases(&mut g, &texts)?,
        Mode::GlobalBaseline => {
            let rg = bm.text.encode_globals(&mut g, &texts)?;
            g.l2_normalize_rows(rg)
        }
    };
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub config_fingerprint: String,
    pub n_images: usize,
    pub n_reports: usize,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub zero_shot_accuracy: f64,
    pub cnr_per_concept: BTreeMap<ConceptId, f64>,
    /// Mean of `cnr_per_concept`.
    pub mean_cnr: f64,
    pub degenerate_maps: usize,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("eval report: {e}")))
    }

    /// Multi-line human summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "mode {} | {} images, {} reports | config {}\n",
            self.mode, self.n_images, self.n_reports, self.config_fingerprint
        );
        for (k, p) in &self.precision_at_k {
            s.push_str(&format!("  Prec@{k:<3} {:.4}\n", p));
        }
        s.push_str(&format!(
            "  zero-shot accuracy {:.4}\n",
            self.zero_shot_accuracy
        ));
        s.push_str(&format!(
            "  mean CNR {:.4} over {} concepts ({} degenerate maps)\n",
            self.mean_cnr,
            self.cnr_per_concept.len(),
            self.degenerate_maps
        ));
        s
    }
}

/// Identification carried into the report.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub seed: u64,
    pub config_fingerprint: String,
}

/// Full evaluation of `model` on held-out pairs.
pub fn evaluate(
    model: &Model,
    mode: Mode,
    heldout: &[PairedSample],
    evidence: &EvidenceTable,
    world: &ConceptWorld,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::input("no held-out samples"));
    }
    let images: Vec<&Matrix> = heldout.iter().map(|s| &s.image.patches).collect();
    let reports: Vec<(&Report, &[EvidencePhrase])> = heldout
        .iter()
        .map(|s| (&s.report, evidence.get(s.report.id)))
        .collect();
    let image_classes: Vec<BTreeSet<ConceptId>> = heldout
        .iter()
        .map(|s| s.image.true_concepts.clone())
        .collect();
    let report_classes: Vec<BTreeSet<ConceptId>> = heldout
        .iter()
        .map(|s| s.report.true_concepts.clone())
        .collect();

    let img = embed_images(model, mode, &images)?;
    let rep = embed_reports(model, mode, &reports)?;
    let ks: Vec<usize> = PRECISION_KS
        .iter()
        .copied()
        .filter(|&k| k <= rep.rows())
        .collect();
    let precision_at_k = retrieval_precisions(&img, &rep, &image_classes, &report_classes, &ks)?;

    let prompts = embed_prompts(model, mode, world)?;
    let mut correct = 0usize;
    for (i, classes) in image_classes.iter().enumerate() {
        if classes.contains(&zero_shot_classify(img.row(i), &prompts)?) {
            correct += 1;
        }
    }
    let zero_shot_accuracy = correct as f64 / heldout.len() as f64;

    let mut sums: BTreeMap<ConceptId, (f64, usize)> = BTreeMap::new();
    let mut degenerate_maps = 0;
    for s in heldout {
        let phrases = evidence.get(s.report.id);
        for (&c, mask) in &s.image.lesion_mask {
            let prompt;
            let phrase: &[TokenId] = match phrases.iter().find(|p| p.concept == Some(c)) {
                Some(p) => &p.tokens,
                None => {
                    prompt = world.class_prompt(c);
                    &prompt
                }
            };
            let map = grounding_map(model, &s.image.patches, phrase)?;
            if map.degenerate {
                degenerate_maps += 1;
            }
            let e = sums.entry(c).or_insert((0.0, 0));
            e.0 += map.cnr(mask)?;
            e.1 += 1;
        }
    }
    let cnr_per_concept: BTreeMap<ConceptId, f64> = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect();
    let mean_cnr = if cnr_per_concept.is_empty() {
        0.0
    } else {
        cnr_per_concept.values().sum::<f64>() / cnr_per_concept.len() as f64
    };

    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        mode,
        seed: ctx.seed,
        config_fingerprint: ctx.config_fingerprint.clone(),
        n_images: img.rows(),
        n_reports: rep.rows(),
        precision_at_k,
        zero_shot_accuracy,
        cnr_per_concept,
        mean_cnr,
        degenerate_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(v: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        v.iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[test]
    fn perfect_retrieval() {
        let e = Matrix::identity(4);
        let c = classes(&[&[0], &[1], &[2], &[3]]);
        assert_eq!(retrieval_precision(&e, &e, &c, &c, 1).unwrap(), 1.0);
        assert_eq!(retrieval_precision(&e, &e, &c, &c, 2).unwrap(), 0.5);
    }

    #[test]
    fn one_class_is_always_relevant() {
        let a = Matrix::from_rows(&[&[1.0, 0.2], &[0.1, 1.0], &[-1.0, 0.3]]);
        let c = classes(&[&[2], &[2], &[2]]);
        for k in 1..=3 {
            assert_eq!(retrieval_precision(&a, &a, &c, &c, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn k_beyond_reports_is_an_error() {
        let e = Matrix::identity(3);
        let c = classes(&[&[0], &[1], &[2]]);
        assert!(retrieval_precision(&e, &e, &c, &c, 4).is_err());
        assert!(retrieval_precision(&e, &e, &c, &c, 0).is_err());
    }

    #[test]
    fn multi_label_hits_on_intersection() {
        let img = Matrix::from_rows(&[&[1.0, 0.0]]);
        let rep = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let ic = classes(&[&[0, 3]]);
        let rc = classes(&[&[3, 5], &[0]]);
        assert_eq!(retrieval_precision(&img, &rep, &ic, &rc, 2).unwrap(), 1.0);
    }

    #[test]
    fn zero_shot_exact_match_and_ties() {
        let prompts = Matrix::identity(5);
        assert_eq!(
            zero_shot_classify(&[0.0, 0.0, 0.0, 2.0, 0.0], &prompts).unwrap(),
            3
        );
        assert_eq!(zero_shot_classify(&[1.0; 5], &prompts).unwrap(), 0);
        assert!(zero_shot_classify(&[1.0], &Matrix::identity(1)).is_err());
    }

    #[test]
    fn cnr_hand_values() {
        let map = [2.0, 0.0, 0.0, 0.0];
        let c = cnr(&map, &[0, 1]).unwrap();
        assert!((c - 1.0 / (1.0f64 + 1e-8).sqrt()).abs() < 1e-15);
        assert_eq!(cnr(&[0.3; 4], &[1]).unwrap(), 0.0);
        let flipped = cnr(&map, &[2, 3]).unwrap();
        assert!((flipped + c).abs() < 1e-15);
        assert!(cnr(&map, &[]).is_err());
        assert!(cnr(&map, &[0, 1, 2, 3]).is_err());
        assert!(cnr(&map, &[4]).is_err());
    }

    #[test]
    fn constant_map_is_flagged() {
        let m = GroundingMap::from_raw(&[0.5; 6]);
        assert!(m.degenerate);
        assert_eq!(m.cnr(&[0, 1]).unwrap(), 0.0);
        let m = GroundingMap::from_raw(&[-1.0, 3.0, 1.0]);
        assert!(!m.degenerate);
        assert_eq!(m.values, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            schema_version: EVAL_SCHEMA_VERSION,
            mode: Mode::Lgdea,
            seed: 3,
            config_fingerprint: "abc".into(),
            n_images: 10,
            n_reports: 10,
            precision_at_k: [(1, 0.1), (2, 0.15000000000000002), (5, 1.0 / 3.0)].into(),
            zero_shot_accuracy: 0.7,
            cnr_per_concept: [(0, -0.25), (4, 1.0 / 7.0)].into(),
            mean_cnr: 0.1,
            degenerate_maps: 0,
        };
        assert_eq!(EvalReport::from_json(&r.to_json_line()).unwrap(), r);
    }
}
