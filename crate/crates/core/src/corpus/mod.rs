//! Synthetic image/report world with ground truth.
//!
//! Images are grids of patch feature vectors. A present concept plants its
//! lesion signature on a small connected group of patches; everything else
//! is noise. Reports are lists of sentences, one per present concept, each
//! mixing tokens from that concept's private vocabulary with shared
//! background tokens. Only a fraction of images come with their report.

mod extract;
mod generate;
mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

pub use extract::{
    EvidenceExtractor, ExtractorBackend, GroundTruthExtractor, LlmExtractor, LlmExtractorConfig,
    RuleExtractor, DEFAULT_PROMPT_TEMPLATE,
};
pub use generate::{generate_corpus, generate_heldout, GenerationConfig};
pub use io::{load_corpus, save_corpus, CORPUS_SCHEMA_VERSION};

pub type TokenId = u32;
pub type ConceptId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub n_concepts: usize,
    /// `concept_vocab[c]` holds the tokens only concept `c` emits.
    pub concept_vocab: Vec<Vec<TokenId>>,
    pub background_vocab: Vec<TokenId>,
    /// One row per concept, in pixel-feature space.
    pub lesion_signatures: Matrix,
    pub background_noise_sigma: f64,
    /// Mean added to every pixel feature; nonzero only for shifted domains.
    pub background_shift: f64,
    pub grid_side: usize,
}

impl ConceptWorld {
    pub fn vocab_size(&self) -> usize {
        self.concept_vocab.iter().map(Vec::len).sum::<usize>() + self.background_vocab.len()
    }

    pub fn d_pix(&self) -> usize {
        self.lesion_signatures.cols()
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Dense token → concept table (`None` for background tokens).
    pub fn token_concepts(&self) -> Vec<Option<ConceptId>> {
        let mut table = vec![None; self.vocab_size()];
        for (c, toks) in self.concept_vocab.iter().enumerate() {
            for &t in toks {
                table[t as usize] = Some(c);
            }
        }
        table
    }

    /// Printable word for a token, used when reports are rendered as text.
    pub fn token_word(&self, token: TokenId) -> String {
        self.word_with(&self.token_concepts(), token)
    }

    fn word_with(&self, concepts: &[Option<ConceptId>], token: TokenId) -> String {
        match concepts.get(token as usize).copied().flatten() {
            Some(c) => {
                let j = self.concept_vocab[c]
                    .iter()
                    .position(|&t| t == token)
                    .unwrap_or(0);
                format!("finding{c}x{j}")
            }
            None => format!("w{token}"),
        }
    }

    /// Inverse of [`ConceptWorld::token_word`] over the whole vocabulary.
    pub fn word_table(&self) -> BTreeMap<String, TokenId> {
        let mut table = BTreeMap::new();
        for (c, toks) in self.concept_vocab.iter().enumerate() {
            for (j, &t) in toks.iter().enumerate() {
                table.insert(format!("finding{c}x{j}"), t);
            }
        }
        for &t in &self.background_vocab {
            table.insert(format!("w{t}"), t);
        }
        table
    }

    /// Report sentences rendered as plain text, one sentence per line.
    pub fn render_report(&self, report: &Report) -> String {
        let concepts = self.token_concepts();
        report
            .sentences
            .iter()
            .map(|s| {
                let words: Vec<String> = s.iter().map(|&t| self.word_with(&concepts, t)).collect();
                format!("{}.", words.join(" "))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Prompt phrase for zero-shot classification: the concept's full vocabulary.
    pub fn class_prompt(&self, concept: ConceptId) -> Vec<TokenId> {
        self.concept_vocab[concept].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: u64,
    pub sentences: Vec<Vec<TokenId>>,
    pub true_concepts: BTreeSet<ConceptId>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.sentences.iter().all(Vec::is_empty)
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.sentences.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: u64,
    /// P × d_pix
    pub patches: Matrix,
    /// concept → patch indices carrying its signature
    pub lesion_mask: BTreeMap<ConceptId, Vec<usize>>,
    pub true_concepts: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub image: ImageSample,
    pub report: Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub paired: Vec<PairedSample>,
    pub unpaired_images: Vec<ImageSample>,
    pub unpaired_reports: Vec<Report>,
    pub world: ConceptWorld,
    /// Set when unpaired images come from a shifted domain.
    pub unpaired_image_world: Option<ConceptWorld>,
    pub pairing_ratio: f64,
    pub seed: u64,
}

impl Corpus {
    pub fn total_images(&self) -> usize {
        self.paired.len() + self.unpaired_images.len()
    }

    pub fn total_reports(&self) -> usize {
        self.paired.len() + self.unpaired_reports.len()
    }

    /// A corpus holding only the paired subset.
    pub fn paired_only(&self) -> Corpus {
        Corpus {
            paired: self.paired.clone(),
            unpaired_images: Vec::new(),
            unpaired_reports: Vec::new(),
            world: self.world.clone(),
            unpaired_image_world: None,
            pairing_ratio: 1.0,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePhrase {
    pub tokens: Vec<TokenId>,
    pub source_report: u64,
    /// Generating concept, when the backend knows it.
    pub concept: Option<ConceptId>,
}
