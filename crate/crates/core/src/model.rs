//! The complete parameter set and its batched forward passes.
//!
//! Parameters live in named blocks so optimiser moments, checkpoints and
//! gradient checks can address them uniformly. The order of [`BLOCK_NAMES`]
//! is the order of [`Model::blocks`] and of every `bind_with` callback.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvidencePhrase, Report, TokenId};
use crate::encoders::{
    BoundImage, BoundLesions, BoundProjection, BoundText, EvidenceProjection, ImageEncoder,
    LesionQueries, TextEncoder,
};
use crate::error::{Error, Result};
use crate::evidence::{BoundBank, PrototypeBank};
use crate::numerics::{Graph, Matrix, Var};
use crate::relation::aggregate_segments;

pub const BLOCK_NAMES: [&str; 12] = [
    "text.token_embedding",
    "text.output_projection",
    "image.patch_projection",
    "image.patch_bias",
    "image.mix_query",
    "image.mix_key",
    "image.mix_value",
    "image.global_head",
    "lesion.queries",
    "lesion.key_projection",
    "evidence.phi",
    "prototypes.mu",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_pix: usize,
    pub n_patches: usize,
    pub d: usize,
    pub d_v: usize,
    /// prototypes
    pub k: usize,
    /// lesion queries
    pub l: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("vocab", self.vocab),
            ("d_pix", self.d_pix),
            ("n_patches", self.n_patches),
            ("d", self.d),
            ("d_v", self.d_v),
            ("l", self.l),
        ];
        if let Some((name, _)) = pairs.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!(
                "model dimension {name} must be positive"
            )));
        }
        if self.k < 2 {
            return Err(Error::config("at least two prototypes are required"));
        }
        Ok(())
    }

    /// Expected shape of every block, in [`BLOCK_NAMES`] order.
    pub fn block_shapes(&self) -> [(usize, usize); 12] {
        let Self {
            vocab,
            d_pix,
            d,
            d_v,
            k,
            l,
            ..
        } = *self;
        [
            (vocab, d),
            (d, d),
            (d_pix, d_v),
            (1, d_v),
            (d_v, d_v),
            (d_v, d_v),
            (d_v, d_v),
            (d_v, d),
            (l, d_v),
            (d_v, d_v),
            (d_v, d),
            (k, d),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub lesions: LesionQueries,
    pub projection: EvidenceProjection,
    pub bank: PrototypeBank,
    pub n_patches: usize,
}

impl Model {
    /// Seeded initialisation of every block.
    pub fn init(dims: &ModelDims, tau_t: f64, tau_p: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            text: TextEncoder::init(dims.vocab, dims.d, &mut rng),
            image: ImageEncoder::init(dims.d_pix, dims.d_v, dims.d, &mut rng),
            lesions: LesionQueries::init(dims.l, dims.d_v, &mut rng),
            projection: EvidenceProjection::init(dims.d_v, dims.d, &mut rng),
            bank: PrototypeBank::init(dims.k, dims.d, tau_t, tau_p, &mut rng),
            n_patches: dims.n_patches,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.text.vocab(),
            d_pix: self.image.d_pix(),
            n_patches: self.n_patches,
            d: self.text.output_projection.cols(),
            d_v: self.image.d_v(),
            k: self.bank.k(),
            l: self.lesions.n_lesions(),
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let m = [
            &self.text.token_embedding,
            &self.text.output_projection,
            &self.image.patch_projection,
            &self.image.patch_bias,
            &self.image.mix_query,
            &self.image.mix_key,
            &self.image.mix_value,
            &self.image.global_head,
            &self.lesions.queries,
            &self.lesions.key_projection,
            &self.projection.phi,
            &self.bank.mu,
        ];
        BLOCK_NAMES.into_iter().zip(m).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let m = [
            &mut self.text.token_embedding,
            &mut self.text.output_projection,
            &mut self.image.patch_projection,
            &mut self.image.patch_bias,
            &mut self.image.mix_query,
            &mut self.image.mix_key,
            &mut self.image.mix_value,
            &mut self.image.global_head,
            &mut self.lesions.queries,
            &mut self.lesions.key_projection,
            &mut self.projection.phi,
            &mut self.bank.mu,
        ];
        BLOCK_NAMES.into_iter().zip(m).collect()
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    /// Compares every block against `dims`, naming the first mismatch.
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        for ((name, m), want) in self.blocks().into_iter().zip(dims.block_shapes()) {
            if m.shape() != want {
                return Err(Error::config(format!(
                    "block {name} has shape {:?}, configuration expects {want:?}",
                    m.shape()
                )));
            }
        }
        if self.n_patches != dims.n_patches {
            return Err(Error::config(format!(
                "model built for {} patches, configuration expects {}",
                self.n_patches, dims.n_patches
            )));
        }
        Ok(())
    }

    /// Binds blocks accepted by `trainable` as parameters, the rest as
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> BoundModel {
        self.bind_with(&mut |name, m| {
            if trainable(name) {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        })
    }

    /// Binds every block through `bind`, called once per block in
    /// [`BLOCK_NAMES`] order.
    pub fn bind_with(&self, bind: &mut dyn FnMut(&'static str, &Matrix) -> Var) -> BoundModel {
        let mut names = BLOCK_NAMES.into_iter();
        let mut next = |m: &Matrix| bind(names.next().expect("block count"), m);
        BoundModel {
            text: self.text.bind_with(&mut next),
            image: self.image.bind_with(&mut next, self.n_patches),
            lesions: self.lesions.bind_with(&mut next),
            projection: self.projection.bind_with(&mut next),
            bank: self.bank.bind_with(&mut next),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub text: BoundText,
    pub image: BoundImage,
    pub lesions: BoundLesions,
    pub projection: BoundProjection,
    pub bank: BoundBank,
}

impl BoundModel {
    /// Node of every block in [`BLOCK_NAMES`] order.
    pub fn vars(&self) -> [Var; 12] {
        [
            self.text.token_embedding,
            self.text.output_projection,
            self.image.patch_projection,
            self.image.patch_bias,
            self.image.mix_query,
            self.image.mix_key,
            self.image.mix_value,
            self.image.global_head,
            self.lesions.queries,
            self.lesions.key_projection,
            self.projection.phi,
            self.bank.mu,
        ]
    }
}

/// Lesion-level encodings of a list of images.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `I^l` per image.
    pub local: Vec<Var>,
    /// Lesion embeddings of all images stacked, `N_L × d_v`.
    pub lesions: Var,
    /// `φ(V)`, unit rows, `N_L × d`.
    pub projected: Var,
    /// Row range of each image inside `lesions`.
    pub segments: Vec<(usize, usize)>,
}

pub fn encode_images(g: &mut Graph, m: &BoundModel, patches: &[&Matrix]) -> Result<ImageBatch> {
    if patches.is_empty() {
        return Err(Error::input("no images to encode"));
    }
    let mut local = Vec::with_capacity(patches.len());
    let mut vs = Vec::with_capacity(patches.len());
    let mut segments = Vec::with_capacity(patches.len());
    let mut offset = 0;
    for p in patches {
        let l = m.image.encode_local(g, p)?;
        let (v, _) = m.lesions.lesion_attend(g, l)?;
        let n = g.shape(v).0;
        segments.push((offset, n));
        offset += n;
        local.push(l);
        vs.push(v);
    }
    let lesions = g.vstack(&vs)?;
    let projected = m.projection.project_evidence(g, lesions)?;
    Ok(ImageBatch {
        local,
        lesions,
        projected,
        segments,
    })
}

impl ImageBatch {
    /// `H_I`, one unit row per image.
    pub fn aggregates(&self, g: &mut Graph) -> Result<Var> {
        aggregate_segments(g, self.projected, &self.segments)
    }
}

/// Evidence encodings of a list of reports.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// Phrase embeddings of all reports stacked; `None` when no report has
    /// evidence.
    pub z: Option<Var>,
    /// Row range of each report inside `z`; `None` for reports without
    /// evidence.
    pub segments: Vec<Option<(usize, usize)>>,
    /// `H_R`, one unit row per report. Reports without evidence fall back to
    /// their normalised global embedding.
    pub h: Var,
}

impl TextBatch {
    pub fn n_without_evidence(&self) -> usize {
        self.segments.iter().filter(|s| s.is_none()).count()
    }
}

pub fn encode_reports(
    g: &mut Graph,
    m: &BoundModel,
    reports: &[(&Report, &[EvidencePhrase])],
) -> Result<TextBatch> {
    if reports.is_empty() {
        return Err(Error::input("no reports to encode"));
    }
    let mut phrases: Vec<&[TokenId]> = Vec::new();
    let mut segments = Vec::with_capacity(reports.len());
    let mut with_ev = Vec::new();
    let mut without_ev = Vec::new();
    for (i, (_, ev)) in reports.iter().enumerate() {
        if ev.is_empty() {
            segments.push(None);
            without_ev.push(i);
        } else {
            segments.push(Some((phrases.len(), ev.len())));
            phrases.extend(ev.iter().map(|p| p.tokens.as_slice()));
            with_ev.push(i);
        }
    }

    let z = if phrases.is_empty() {
        None
    } else {
        Some(m.text.encode_phrases(g, &phrases)?)
    };
    let h_ev = match z {
        Some(z) => {
            let segs: Vec<(usize, usize)> = segments.iter().flatten().copied().collect();
            Some(aggregate_segments(g, z, &segs)?)
        }
        None => None,
    };
    let h = if without_ev.is_empty() {
        h_ev.expect("every report has evidence")
    } else {
        log::debug!(
            "{} report(s) without evidence use their global embedding",
            without_ev.len()
        );
        let tokens: Vec<Vec<TokenId>> = without_ev.iter().map(|&i| reports[i].0.tokens()).collect();
        let texts: Vec<&[TokenId]> = tokens.iter().map(Vec::as_slice).collect();
        let rg = m.text.encode_globals(g, &texts)?;
        let h_fb = g.l2_normalize_rows(rg);
        match h_ev {
            None => h_fb,
            Some(h_ev) => {
                let stacked = g.vstack(&[h_ev, h_fb])?;
                // stacked rows are [with_ev..., without_ev...]; restore report order
                let mut order = vec![0; reports.len()];
                for (row, &i) in with_ev.iter().chain(&without_ev).enumerate() {
                    order[i] = row;
                }
                g.gather_rows(stacked, &order)?
            }
        }
    };
    Ok(TextBatch { z, segments, h })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 20,
            d_pix: 3,
            n_patches: 4,
            d: 5,
            d_v: 6,
            k: 3,
            l: 2,
        }
    }

    #[test]
    fn blocks_follow_declared_shapes() {
        let m = Model::init(&dims(), 0.1, 0.1, 1).unwrap();
        m.check_dims(&dims()).unwrap();
        assert_eq!(m.dims(), dims());
        let mut other = dims();
        other.d_v = 7;
        let err = m.check_dims(&other).unwrap_err().to_string();
        assert!(err.contains("image.patch_projection"), "{err}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(
            Model::init(&dims(), 0.1, 0.1, 9).unwrap(),
            Model::init(&dims(), 0.1, 0.1, 9).unwrap()
        );
        assert_ne!(
            Model::init(&dims(), 0.1, 0.1, 9).unwrap(),
            Model::init(&dims(), 0.1, 0.1, 10).unwrap()
        );
    }

    #[test]
    fn bind_with_visits_blocks_in_order() {
        let m = Model::init(&dims(), 0.1, 0.1, 1).unwrap();
        let mut g = Graph::new();
        let mut seen = Vec::new();
        let bm = m.bind_with(&mut |name, mat| {
            seen.push(name);
            g.param(mat.clone())
        });
        assert_eq!(seen, BLOCK_NAMES);
        for ((_, block), v) in m.blocks().into_iter().zip(bm.vars()) {
            assert_eq!(g.value(v), block);
        }
    }

    #[test]
    fn reports_without_evidence_keep_their_slot() {
        let m = Model::init(&dims(), 0.1, 0.1, 1).unwrap();
        let mut g = Graph::new();
        let bm = m.bind(&mut g, &|_| false);
        let report = |id: u64, toks: &[TokenId]| Report {
            id,
            sentences: vec![toks.to_vec()],
            true_concepts: Default::default(),
        };
        let phrase = |toks: &[TokenId]| EvidencePhrase {
            tokens: toks.to_vec(),
            source_report: 0,
            concept: None,
        };
        let r0 = report(0, &[1, 2]);
        let r1 = report(1, &[3, 4]);
        let r2 = report(2, &[5]);
        let ev0 = [phrase(&[1, 2])];
        let ev2 = [phrase(&[5])];
        let tb = encode_reports(&mut g, &bm, &[(&r0, &ev0), (&r1, &[]), (&r2, &ev2)]).unwrap();
        assert_eq!(tb.n_without_evidence(), 1);
        let h = g.value(tb.h).clone();
        assert_eq!(h.rows(), 3);

        let alone = encode_reports(&mut g, &bm, &[(&r1, &[])]).unwrap();
        assert!(h.select_rows(&[1]).max_abs_diff(g.value(alone.h)) < 1e-15);
        let first = encode_reports(&mut g, &bm, &[(&r0, &ev0)]).unwrap();
        assert!(h.select_rows(&[0]).max_abs_diff(g.value(first.h)) < 1e-15);
    }

    #[test]
    fn image_batch_segments_cover_lesions() {
        let m = Model::init(&dims(), 0.1, 0.1, 1).unwrap();
        let mut g = Graph::new();
        let bm = m.bind(&mut g, &|_| true);
        let a = Matrix::filled(4, 3, 0.5);
        let b = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let ib = encode_images(&mut g, &bm, &[&a, &b]).unwrap();
        assert_eq!(ib.segments, vec![(0, 2), (2, 2)]);
        assert_eq!(g.shape(ib.lesions), (4, 6));
        let h = ib.aggregates(&mut g).unwrap();
        assert_eq!(g.shape(h), (2, 5));
    }
}
