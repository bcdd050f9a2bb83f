use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EvidenceExtractor, EvidencePhrase, ImageSample, Report};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-batch sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub paired: usize,
    pub images: usize,
    pub reports: usize,
}

impl BatchPlan {
    /// `round(fraction·B)` paired samples (at least one); the remainder is
    /// split between unpaired images and reports, images taking the odd one.
    /// When one unpaired pool is empty the other takes the whole remainder;
    /// with no unpaired data the batch is entirely paired.
    pub fn new(corpus: &Corpus, batch_size: usize, paired_fraction: f64) -> Result<Self> {
        if !(paired_fraction > 0.0 && paired_fraction <= 1.0) {
            return Err(Error::config("paired fraction must lie in (0, 1]"));
        }
        let total =
            corpus.paired.len() + corpus.unpaired_images.len() + corpus.unpaired_reports.len();
        if total < batch_size {
            return Err(Error::config(format!(
                "corpus holds {total} samples, fewer than the batch size {batch_size}"
            )));
        }
        let paired = ((paired_fraction * batch_size as f64).round() as usize).clamp(1, batch_size);
        let rest = batch_size - paired;
        let (ni, nr) = (corpus.unpaired_images.len(), corpus.unpaired_reports.len());
        let (paired, images, reports) = match (ni > 0, nr > 0) {
            (true, true) => (paired, rest - rest / 2, rest / 2),
            (true, false) => (paired, rest, 0),
            (false, true) => (paired, 0, rest),
            (false, false) => {
                if rest > 0 {
                    log::warn!("no unpaired samples; batches hold {batch_size} paired samples");
                }
                (batch_size, 0, 0)
            }
        };
        let plan = Self {
            paired,
            images,
            reports,
        };
        for (name, need, have) in [
            ("paired samples", plan.paired, corpus.paired.len()),
            ("unpaired images", plan.images, ni),
            ("unpaired reports", plan.reports, nr),
        ] {
            if need > have {
                return Err(Error::config(format!(
                    "batch needs {need} {name} but the corpus has {have}"
                )));
            }
        }
        Ok(plan)
    }

    pub fn batch_size(&self) -> usize {
        self.paired + self.images + self.reports
    }

    /// Batches per epoch: enough to visit the largest pool once relative to
    /// its per-batch share.
    pub fn batches_per_epoch(&self, corpus: &Corpus) -> usize {
        [
            (self.paired, corpus.paired.len()),
            (self.images, corpus.unpaired_images.len()),
            (self.reports, corpus.unpaired_reports.len()),
        ]
        .iter()
        .filter(|(need, _)| *need > 0)
        .map(|(need, have)| have / need)
        .max()
        .unwrap_or(0)
    }
}

/// Indices into the corpus pools. Images are `paired ++ images`, reports
/// `paired ++ reports`, so the seed relations are the identity on the
/// paired prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub paired: Vec<usize>,
    pub images: Vec<usize>,
    pub reports: Vec<usize>,
}

impl Batch {
    pub fn n_images(&self) -> usize {
        self.paired.len() + self.images.len()
    }

    pub fn n_reports(&self) -> usize {
        self.paired.len() + self.reports.len()
    }

    /// `Y`: `N_I × N_R` with ones on the paired diagonal.
    pub fn seed_relations(&self) -> Matrix {
        let mut y = Matrix::zeros(self.n_images(), self.n_reports());
        for i in 0..self.paired.len() {
            y[(i, i)] = 1.0;
        }
        y
    }

    pub fn image_ids(&self, corpus: &Corpus) -> Vec<u64> {
        self.paired
            .iter()
            .map(|&i| corpus.paired[i].image.id)
            .chain(self.images.iter().map(|&i| corpus.unpaired_images[i].id))
            .collect()
    }

    pub fn report_ids(&self, corpus: &Corpus) -> Vec<u64> {
        self.paired
            .iter()
            .map(|&i| corpus.paired[i].report.id)
            .chain(self.reports.iter().map(|&i| corpus.unpaired_reports[i].id))
            .collect()
    }
}

/// Endless deterministic stream over `0..n`: consecutive shuffles.
struct Cycle {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One epoch of batches. Each pool is shuffled from `epoch_seed`; pools that
/// run out before the largest one are reshuffled and reused. The partial
/// batch at the end of the largest pool is dropped.
pub fn make_batches(
    corpus: &Corpus,
    batch_size: usize,
    paired_fraction: f64,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    let plan = BatchPlan::new(corpus, batch_size, paired_fraction)?;
    let n = plan.batches_per_epoch(corpus);
    if n == 0 {
        return Err(Error::config("corpus too small for a single batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut pools = [
        Cycle::new(corpus.paired.len()),
        Cycle::new(corpus.unpaired_images.len()),
        Cycle::new(corpus.unpaired_reports.len()),
    ];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let [p, i, r] = &mut pools;
        out.push(Batch {
            paired: p.take(plan.paired, &mut rng),
            images: i.take(plan.images, &mut rng),
            reports: r.take(plan.reports, &mut rng),
        });
    }
    Ok(out)
}

/// Extracted evidence for every report of a corpus, keyed by report id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTable(BTreeMap<u64, Vec<EvidencePhrase>>);

impl EvidenceTable {
    pub fn extract(corpus: &Corpus, extractor: &dyn EvidenceExtractor) -> Result<Self> {
        let reports = corpus
            .paired
            .iter()
            .map(|p| &p.report)
            .chain(&corpus.unpaired_reports);
        Self::extract_reports(reports, extractor)
    }

    pub fn extract_reports<'a>(
        reports: impl IntoIterator<Item = &'a Report>,
        extractor: &dyn EvidenceExtractor,
    ) -> Result<Self> {
        let mut table = BTreeMap::new();
        for r in reports {
            table.insert(r.id, extractor.extract(r)?);
        }
        Ok(Self(table))
    }

    /// Phrases of report `id`; empty when the report was never extracted.
    pub fn get(&self, id: u64) -> &[EvidencePhrase] {
        self.0.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A batch resolved against its corpus and evidence.
#[derive(Debug, Clone)]
pub struct BatchView<'a> {
    pub images: Vec<&'a ImageSample>,
    pub reports: Vec<&'a Report>,
    pub evidence: Vec<&'a [EvidencePhrase]>,
    pub n_paired: usize,
}

impl<'a> BatchView<'a> {
    pub fn new(corpus: &'a Corpus, evidence: &'a EvidenceTable, batch: &Batch) -> Result<Self> {
        let check = |idx: &[usize], len: usize, what: &str| -> Result<()> {
            match idx.iter().find(|&&i| i >= len) {
                Some(i) => Err(Error::input(format!(
                    "batch {what} index {i} out of range {len}"
                ))),
                None => Ok(()),
            }
        };
        check(&batch.paired, corpus.paired.len(), "paired")?;
        check(&batch.images, corpus.unpaired_images.len(), "image")?;
        check(&batch.reports, corpus.unpaired_reports.len(), "report")?;
        let images: Vec<&ImageSample> = batch
            .paired
            .iter()
            .map(|&i| &corpus.paired[i].image)
            .chain(batch.images.iter().map(|&i| &corpus.unpaired_images[i]))
            .collect();
        let reports: Vec<&Report> = batch
            .paired
            .iter()
            .map(|&i| &corpus.paired[i].report)
            .chain(batch.reports.iter().map(|&i| &corpus.unpaired_reports[i]))
            .collect();
        let evidence = reports.iter().map(|r| evidence.get(r.id)).collect();
        Ok(Self {
            images,
            reports,
            evidence,
            n_paired: batch.paired.len(),
        })
    }

    /// Only the paired prefix.
    pub fn paired_only(&self) -> Self {
        Self {
            images: self.images[..self.n_paired].to_vec(),
            reports: self.reports[..self.n_paired].to_vec(),
            evidence: self.evidence[..self.n_paired].to_vec(),
            n_paired: self.n_paired,
        }
    }

    pub fn seed_relations(&self) -> Matrix {
        let mut y = Matrix::zeros(self.images.len(), self.reports.len());
        for i in 0..self.n_paired {
            y[(i, i)] = 1.0;
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenerationConfig};

    fn corpus(n: usize, ratio: f64) -> Corpus {
        let cfg = GenerationConfig {
            n_images: n,
            pairing_ratio: ratio,
            ..Default::default()
        };
        generate_corpus(&cfg, 3).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let c = corpus(200, 0.1);
        let plan = BatchPlan::new(&c, 20, 0.1).unwrap();
        assert_eq!(
            plan,
            BatchPlan {
                paired: 2,
                images: 9,
                reports: 9
            }
        );
        for b in make_batches(&c, 20, 0.1, 7).unwrap() {
            assert_eq!((b.paired.len(), b.images.len(), b.reports.len()), (2, 9, 9));
        }
    }

    #[test]
    fn full_pairing_gives_identity_seed() {
        let c = corpus(64, 0.5);
        let batches = make_batches(&c, 8, 1.0, 1).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert!(b.images.is_empty() && b.reports.is_empty());
            assert_eq!(b.seed_relations(), Matrix::identity(8));
        }
        // every paired sample visited once per epoch
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.paired.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_seed_controls_order() {
        let c = corpus(100, 0.2);
        let a = make_batches(&c, 10, 0.2, 5).unwrap();
        assert_eq!(a, make_batches(&c, 10, 0.2, 5).unwrap());
        assert_ne!(a, make_batches(&c, 10, 0.2, 6).unwrap());
    }

    #[test]
    fn small_pools_cycle_and_partial_batch_drops() {
        let c = corpus(100, 0.1); // 10 paired, 90 images, 90 reports
        let batches = make_batches(&c, 16, 0.25, 0).unwrap();
        // images: 6 per batch → 15 batches; paired 4 per batch cycles
        assert_eq!(batches.len(), 15);
        let table = EvidenceTable::default();
        let view = BatchView::new(&c, &table, &batches[3]).unwrap();
        assert_eq!(view.images.len(), 10);
        assert_eq!(view.reports.len(), 10);
        assert_eq!(view.seed_relations(), batches[3].seed_relations());
    }

    #[test]
    fn insufficient_data_is_a_config_error() {
        let c = corpus(10, 0.1);
        assert!(matches!(
            make_batches(&c, 32, 0.1, 0),
            Err(Error::Config(_))
        ));
        let c = corpus(100, 0.02); // 2 paired
        assert!(matches!(
            make_batches(&c, 40, 0.5, 0),
            Err(Error::Config(_))
        ));
    }
}
