use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConceptId, ConceptWorld, Corpus, ImageSample, PairedSample, Report, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Matrix};

/// Knobs for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub n_concepts: usize,
    pub tokens_per_concept: usize,
    pub background_tokens: usize,
    pub d_pix: usize,
    pub grid_side: usize,
    pub noise_sigma: f64,
    /// L2 norm of each lesion signature.
    pub signature_norm: f64,
    pub phrase_len_min: usize,
    pub phrase_len_max: usize,
    pub max_concepts_per_sample: usize,
    pub max_lesion_patches: usize,
    pub n_images: usize,
    pub pairing_ratio: f64,
    /// Defaults to the number of unpaired images.
    pub n_unpaired_reports: Option<usize>,
    /// Draw unpaired images from a second world with shifted background.
    pub cross_domain: bool,
    pub cross_domain_shift: f64,
    pub cross_domain_sigma_scale: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            tokens_per_concept: 40,
            background_tokens: 200,
            d_pix: 16,
            grid_side: 7,
            noise_sigma: 0.3,
            signature_norm: 2.0,
            phrase_len_min: 3,
            phrase_len_max: 6,
            max_concepts_per_sample: 3,
            max_lesion_patches: 4,
            n_images: 1000,
            pairing_ratio: 0.10,
            n_unpaired_reports: None,
            cross_domain: false,
            cross_domain_shift: 0.15,
            cross_domain_sigma_scale: 1.3,
        }
    }
}

impl GenerationConfig {
    /// 1000 images, 10% paired.
    pub fn reference() -> Self {
        Self::default()
    }

    /// 1000 images, 5% paired.
    pub fn pairing_5pct() -> Self {
        Self {
            pairing_ratio: 0.05,
            ..Self::default()
        }
    }

    /// 1000 images, 10% paired.
    pub fn pairing_10pct() -> Self {
        Self::reference()
    }

    /// A few hundred samples for quick runs.
    pub fn small() -> Self {
        Self {
            n_images: 240,
            pairing_ratio: 0.25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if !(self.pairing_ratio > 0.0 && self.pairing_ratio <= 1.0) {
            return fail("pairing_ratio must lie in (0, 1]");
        }
        if self.n_concepts < 2 {
            return fail("n_concepts must be at least 2");
        }
        if self.n_images == 0
            || self.tokens_per_concept == 0
            || self.background_tokens == 0
            || self.d_pix == 0
            || self.grid_side == 0
        {
            return fail("counts must be at least 1");
        }
        if self.phrase_len_min < 2 || self.phrase_len_max < self.phrase_len_min {
            return fail("phrase length range must satisfy 2 <= min <= max");
        }
        if self.max_concepts_per_sample == 0 || self.max_concepts_per_sample > self.n_concepts {
            return fail("max_concepts_per_sample must lie in [1, n_concepts]");
        }
        if self.max_lesion_patches == 0 {
            return fail("max_lesion_patches must be at least 1");
        }
        let worst_case = self.max_concepts_per_sample * self.max_lesion_patches;
        if worst_case > self.grid_side * self.grid_side {
            return fail("grid too small for the lesion budget");
        }
        if !(self.noise_sigma >= 0.0) || !(self.signature_norm > 0.0) {
            return fail("noise_sigma must be >= 0 and signature_norm > 0");
        }
        if self.n_concepts > 1 && self.d_pix < 2 {
            return fail("d_pix must be at least 2 to separate concepts");
        }
        Ok(())
    }

    /// Default sampling settings on the geometry and vocabulary of an
    /// existing world, e.g. for drawing held-out data from a loaded corpus.
    pub fn for_world(world: &ConceptWorld) -> Self {
        let base = Self::default();
        let cells = world.grid_side * world.grid_side;
        let max_concepts = base.max_concepts_per_sample.min(world.n_concepts);
        Self {
            n_concepts: world.n_concepts,
            tokens_per_concept: world.concept_vocab.first().map_or(1, Vec::len),
            background_tokens: world.background_vocab.len(),
            d_pix: world.d_pix(),
            grid_side: world.grid_side,
            noise_sigma: world.background_noise_sigma,
            max_concepts_per_sample: max_concepts,
            max_lesion_patches: base.max_lesion_patches.min(cells / max_concepts).max(1),
            ..base
        }
    }

    pub fn n_paired(&self) -> usize {
        ((self.n_images as f64 * self.pairing_ratio).round() as usize).clamp(1, self.n_images)
    }
}

fn build_world(cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<ConceptWorld> {
    let mut next: TokenId = 0;
    let mut take = |n: usize| {
        let ids: Vec<TokenId> = (next..next + n as TokenId).collect();
        next += n as TokenId;
        ids
    };
    let concept_vocab: Vec<Vec<TokenId>> = (0..cfg.n_concepts)
        .map(|_| take(cfg.tokens_per_concept))
        .collect();
    let background_vocab = take(cfg.background_tokens);

    // rejection-sample signatures until pairwise cosine < 0.5
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_concepts);
    let mut attempts = 0usize;
    while sigs.len() < cfg.n_concepts {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(
                "could not draw separated lesion signatures; raise d_pix",
            ));
        }
        let v: Vec<f64> = (0..cfg.d_pix).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::numerics::norm(&v);
        if n < 1e-6 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x * cfg.signature_norm / n).collect();
        if sigs.iter().all(|s| cosine(s, &v) < 0.5) {
            sigs.push(v);
        }
    }
    let flat: Vec<f64> = sigs.into_iter().flatten().collect();
    Ok(ConceptWorld {
        n_concepts: cfg.n_concepts,
        concept_vocab,
        background_vocab,
        lesion_signatures: Matrix::from_vec(cfg.n_concepts, cfg.d_pix, flat)?,
        background_noise_sigma: cfg.noise_sigma,
        background_shift: 0.0,
        grid_side: cfg.grid_side,
    })
}

struct Sampler<'a> {
    cfg: &'a GenerationConfig,
    rng: ChaCha8Rng,
    next_image_id: u64,
    next_report_id: u64,
}

impl Sampler<'_> {
    fn concepts(&mut self, n_concepts: usize) -> BTreeSet<ConceptId> {
        let count = self.rng.random_range(1..=self.cfg.max_concepts_per_sample);
        let all: Vec<ConceptId> = (0..n_concepts).collect();
        all.choose_multiple(&mut self.rng, count).copied().collect()
    }

    fn image(&mut self, world: &ConceptWorld, concepts: &BTreeSet<ConceptId>) -> ImageSample {
        let side = world.grid_side;
        let p = world.n_patches();
        let d = world.d_pix();
        let noise = Normal::new(
            world.background_shift,
            world.background_noise_sigma.max(0.0),
        )
        .expect("sigma validated non-negative");
        let mut patches = Matrix::from_fn(p, d, |_, _| noise.sample(&mut self.rng));

        let mut taken = vec![false; p];
        let mut lesion_mask = BTreeMap::new();
        for &c in concepts {
            let size = self.rng.random_range(1..=self.cfg.max_lesion_patches);
            let free: Vec<usize> = (0..p).filter(|&i| !taken[i]).collect();
            let start = *free.choose(&mut self.rng).expect("grid has room");
            let mut region = vec![start];
            taken[start] = true;
            // grow a 4-connected blob; stop early if boxed in
            while region.len() < size {
                let mut frontier: Vec<usize> = region
                    .iter()
                    .flat_map(|&i| neighbours(i, side))
                    .filter(|&j| !taken[j])
                    .collect();
                frontier.sort_unstable();
                frontier.dedup();
                let Some(&next) = frontier.choose(&mut self.rng) else {
                    break;
                };
                taken[next] = true;
                region.push(next);
            }
            region.sort_unstable();
            let sig = world.lesion_signatures.row(c).to_vec();
            for &i in &region {
                for (v, s) in patches.row_mut(i).iter_mut().zip(&sig) {
                    *v += s;
                }
            }
            lesion_mask.insert(c, region);
        }
        let id = self.next_image_id;
        self.next_image_id += 1;
        ImageSample {
            id,
            patches,
            lesion_mask,
            true_concepts: concepts.clone(),
        }
    }

    fn report(&mut self, world: &ConceptWorld, concepts: &BTreeSet<ConceptId>) -> Report {
        let mut order: Vec<ConceptId> = concepts.iter().copied().collect();
        order.shuffle(&mut self.rng);
        let sentences = order
            .into_iter()
            .map(|c| {
                let len = self
                    .rng
                    .random_range(self.cfg.phrase_len_min..=self.cfg.phrase_len_max);
                let n_concept = self.rng.random_range(1..=(len - 1).min(3));
                let mut s: Vec<TokenId> = Vec::with_capacity(len);
                for _ in 0..n_concept {
                    s.push(*world.concept_vocab[c].choose(&mut self.rng).expect("vocab"));
                }
                for _ in n_concept..len {
                    s.push(*world.background_vocab.choose(&mut self.rng).expect("vocab"));
                }
                s.shuffle(&mut self.rng);
                s
            })
            .collect();
        let id = self.next_report_id;
        self.next_report_id += 1;
        Report {
            id,
            sentences,
            true_concepts: concepts.clone(),
        }
    }
}

fn neighbours(i: usize, side: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / side, i % side);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(i - side);
    }
    if r + 1 < side {
        out.push(i + side);
    }
    if c > 0 {
        out.push(i - 1);
    }
    if c + 1 < side {
        out.push(i + 1);
    }
    out.into_iter()
}

/// Draws a world and a corpus from one RNG stream seeded by `seed`.
pub fn generate_corpus(cfg: &GenerationConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(cfg, &mut rng)?;
    let shifted = cfg.cross_domain.then(|| ConceptWorld {
        background_noise_sigma: world.background_noise_sigma * cfg.cross_domain_sigma_scale,
        background_shift: cfg.cross_domain_shift,
        ..world.clone()
    });

    let mut s = Sampler {
        cfg,
        rng,
        next_image_id: 0,
        next_report_id: 0,
    };
    let n_paired = cfg.n_paired();
    let n_unpaired_images = cfg.n_images - n_paired;
    let n_unpaired_reports = cfg.n_unpaired_reports.unwrap_or(n_unpaired_images);

    let mut paired = Vec::with_capacity(n_paired);
    for _ in 0..n_paired {
        let concepts = s.concepts(world.n_concepts);
        let image = s.image(&world, &concepts);
        let report = s.report(&world, &concepts);
        paired.push(PairedSample { image, report });
    }
    let image_world = shifted.as_ref().unwrap_or(&world);
    let unpaired_images = (0..n_unpaired_images)
        .map(|_| {
            let c = s.concepts(world.n_concepts);
            s.image(image_world, &c)
        })
        .collect();
    let unpaired_reports = (0..n_unpaired_reports)
        .map(|_| {
            let c = s.concepts(world.n_concepts);
            s.report(&world, &c)
        })
        .collect();

    Ok(Corpus {
        paired,
        unpaired_images,
        unpaired_reports,
        world,
        unpaired_image_world: shifted,
        pairing_ratio: cfg.pairing_ratio,
        seed,
    })
}

/// Fresh paired samples from an existing world, for evaluation.
pub fn generate_heldout(
    world: &ConceptWorld,
    cfg: &GenerationConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    cfg.validate()?;
    if cfg.d_pix != world.d_pix() || cfg.grid_side != world.grid_side {
        return Err(Error::config(
            "held-out config does not match the world's geometry",
        ));
    }
    let mut s = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_image_id: 1_000_000_000,
        next_report_id: 1_000_000_000,
    };
    Ok((0..n)
        .map(|_| {
            let concepts = s.concepts(world.n_concepts);
            let image = s.image(world, &concepts);
            let report = s.report(world, &concepts);
            PairedSample { image, report }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_images: usize, ratio: f64) -> GenerationConfig {
        GenerationConfig {
            n_images,
            pairing_ratio: ratio,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn full_pairing_has_no_unpaired() {
        let c = generate_corpus(&small(100, 1.0), 1).unwrap();
        assert_eq!(c.paired.len(), 100);
        assert!(c.unpaired_images.is_empty());
        assert!(c.unpaired_reports.is_empty());
    }

    #[test]
    fn ten_percent_pairing() {
        let c = generate_corpus(&small(1000, 0.10), 2).unwrap();
        assert!((c.paired.len() as i64 - 100).abs() <= 1);
        assert_eq!(c.unpaired_images.len(), 1000 - c.paired.len());
        assert!(!c.unpaired_reports.is_empty());
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = small(50, 0.2);
        assert_eq!(
            generate_corpus(&cfg, 9).unwrap(),
            generate_corpus(&cfg, 9).unwrap()
        );
        assert_ne!(
            generate_corpus(&cfg, 9).unwrap(),
            generate_corpus(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            generate_corpus(&small(10, 0.0), 0),
            Err(Error::Config(_))
        ));
        assert!(generate_corpus(&small(10, 1.5), 0).is_err());
        assert!(generate_corpus(&small(0, 0.5), 0).is_err());
        let one_concept = GenerationConfig {
            n_concepts: 1,
            max_concepts_per_sample: 1,
            ..small(10, 0.5)
        };
        assert!(generate_corpus(&one_concept, 0).is_err());
    }

    #[test]
    fn world_invariants() {
        let c = generate_corpus(&small(20, 0.5), 3).unwrap();
        let w = &c.world;
        let mut seen = BTreeSet::new();
        for v in &w.concept_vocab {
            for t in v {
                assert!(seen.insert(*t), "vocabularies overlap");
            }
        }
        for i in 0..w.n_concepts {
            for j in 0..i {
                assert!(cosine(w.lesion_signatures.row(i), w.lesion_signatures.row(j)) < 0.5);
            }
        }
    }

    #[test]
    fn sample_invariants() {
        let c = generate_corpus(&small(200, 0.3), 4).unwrap();
        let table = c.world.token_concepts();
        for p in &c.paired {
            assert_eq!(p.image.true_concepts, p.report.true_concepts);
        }
        let images = c.paired.iter().map(|p| &p.image).chain(&c.unpaired_images);
        for img in images {
            assert!((1..=3).contains(&img.true_concepts.len()));
            let mut used = BTreeSet::new();
            for (&concept, patches) in &img.lesion_mask {
                assert!(img.true_concepts.contains(&concept));
                assert!((1..=4).contains(&patches.len()));
                for &p in patches {
                    assert!(used.insert(p), "masks overlap");
                }
            }
            assert_eq!(img.lesion_mask.len(), img.true_concepts.len());
        }
        let reports = c
            .paired
            .iter()
            .map(|p| &p.report)
            .chain(&c.unpaired_reports);
        for r in reports {
            for s in &r.sentences {
                let concepts: BTreeSet<_> = s.iter().filter_map(|&t| table[t as usize]).collect();
                assert_eq!(concepts.len(), 1);
                assert!(s.iter().any(|&t| table[t as usize].is_none()));
            }
        }
    }

    #[test]
    fn cross_domain_shifts_unpaired_images() {
        let cfg = GenerationConfig {
            cross_domain: true,
            ..small(100, 0.2)
        };
        let c = generate_corpus(&cfg, 5).unwrap();
        let shifted = c.unpaired_image_world.as_ref().unwrap();
        assert_eq!(shifted.lesion_signatures, c.world.lesion_signatures);
        assert!(shifted.background_shift > 0.0);
    }

    #[test]
    fn heldout_uses_world_geometry() {
        let cfg = small(20, 0.5);
        let c = generate_corpus(&cfg, 6).unwrap();
        let held = generate_heldout(&c.world, &cfg, 15, 99).unwrap();
        assert_eq!(held.len(), 15);
        assert_eq!(held[0].image.patches.shape(), (49, 16));
        let bad = GenerationConfig { d_pix: 8, ..cfg };
        assert!(generate_heldout(&c.world, &bad, 3, 1).is_err());
    }

    #[test]
    fn for_world_recovers_the_generating_settings() {
        let cfg = small(40, 0.5);
        let c = generate_corpus(&cfg, 3).unwrap();
        let back = GenerationConfig::for_world(&c.world);
        assert_eq!(
            generate_heldout(&c.world, &back, 5, 9).unwrap(),
            generate_heldout(&c.world, &cfg, 5, 9).unwrap()
        );
    }
}
