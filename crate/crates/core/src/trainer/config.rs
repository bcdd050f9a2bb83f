use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ConceptWorld, ExtractorBackend};
use crate::error::{Error, Result};
use crate::evidence::Reduction;
use crate::model::ModelDims;
use crate::relation::DEFAULT_PROPAGATION_STEPS;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Evidence space, lesion distillation and propagated soft alignment.
    #[default]
    Lgdea,
    /// Symmetric InfoNCE over global embeddings of paired samples only.
    GlobalBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lgdea => "lgdea",
            Self::GlobalBaseline => "global_baseline",
        }
    }

    /// Whether the named parameter block is trained in this mode.
    pub fn is_active(self, block: &str) -> bool {
        match self {
            Self::Lgdea => block != "image.global_head",
            Self::GlobalBaseline => block.starts_with("text.") || block.starts_with("image."),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lgdea" => Ok(Self::Lgdea),
            "global_baseline" => Ok(Self::GlobalBaseline),
            other => Err(Error::Usage(format!(
                "unknown mode {other:?} (expected lgdea or global_baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub paired_evidence: f64,
    pub unpaired_evidence: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            paired_evidence: 1.0,
            unpaired_evidence: 1.0,
            align: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    /// phrase → prototype assignment
    pub tau_t: f64,
    /// lesion → prototype assignment
    pub tau_p: f64,
    /// intra-modal graphs
    pub tau_g: f64,
    /// global contrastive baseline
    pub tau_1: f64,
    /// evidence alignment
    pub tau_2: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_t: 0.1,
            tau_p: 0.1,
            tau_g: 0.1,
            tau_1: 0.07,
            tau_2: 0.07,
        }
    }
}

/// One stretch of training with its own epoch count, rate and batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Replaces `epochs`/`learning_rate`/`batch_size` when non-empty.
    pub phases: Vec<Phase>,
    /// Optimizer step budget. When set, training stops after exactly this
    /// many steps, cycling epochs of the last phase as needed.
    pub max_steps: Option<u64>,
    pub paired_fraction_per_batch: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub temperatures: Temperatures,
    pub d: usize,
    pub d_v: usize,
    /// prototypes
    pub k: usize,
    /// lesion queries
    pub l: usize,
    pub k_nn: usize,
    pub propagation_steps: usize,
    pub lambda_reg: f64,
    pub rec_reduction: Reduction,
    /// Rescale prototypes to unit norm after every optimizer step. The
    /// prototype bank is then excluded from weight decay.
    pub renormalize_prototypes: bool,
    pub extractor: ExtractorBackend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl TrainConfig {
    /// Fast preset: K=16 prototypes, L=8 lesion queries.
    pub fn small() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            mode: Mode::Lgdea,
            seed: 0,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            phases: Vec::new(),
            max_steps: None,
            paired_fraction_per_batch: 0.25,
            weight_decay: 1e-6,
            loss_weights: LossWeights::default(),
            temperatures: Temperatures::default(),
            d: 32,
            d_v: 32,
            k: 16,
            l: 8,
            k_nn: 5,
            propagation_steps: DEFAULT_PROPAGATION_STEPS,
            lambda_reg: 1e-2,
            rec_reduction: Reduction::Mean,
            renormalize_prototypes: true,
            extractor: ExtractorBackend::GroundTruth,
        }
    }

    /// K=64 prototypes and L=64 lesion queries.
    pub fn paper_shape() -> Self {
        Self {
            k: 64,
            l: 64,
            ..Self::small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "paper-shape" | "paper_shape" => Ok(Self::paper_shape()),
            other => Err(Error::Usage(format!(
                "unknown preset {other:?} (expected small or paper-shape)"
            ))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let probe: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        match probe
            .get("schema_version")
            .and_then(toml::Value::as_integer)
        {
            Some(v) if v == i64::from(CONFIG_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::config(format!(
                    "config schema_version {v}, expected {CONFIG_SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::config("config lacks schema_version")),
        }
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let counts = [
            ("batch_size", self.batch_size),
            ("d", self.d),
            ("d_v", self.d_v),
            ("l", self.l),
            ("k_nn", self.k_nn),
        ];
        for (name, v) in counts {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.k < 2 {
            return fail("k must be at least 2".into());
        }
        if self.phases.is_empty() && self.epochs == 0 && self.max_steps.is_none() {
            return fail("epochs must be positive".into());
        }
        for (i, p) in self.phases().iter().enumerate() {
            if p.batch_size < 2 {
                return fail(format!("phase {i}: batch_size must be at least 2"));
            }
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return fail(format!("phase {i}: learning_rate must be positive"));
            }
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive when set".into());
        }
        if !(self.paired_fraction_per_batch > 0.0 && self.paired_fraction_per_batch <= 1.0) {
            return fail("paired_fraction_per_batch must lie in (0, 1]".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative".into());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return fail("lambda_reg must be non-negative".into());
        }
        let w = self.loss_weights;
        for (name, v) in [
            ("rec", w.rec),
            ("paired_evidence", w.paired_evidence),
            ("unpaired_evidence", w.unpaired_evidence),
            ("align", w.align),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("loss weight {name} must be non-negative"));
            }
        }
        let t = self.temperatures;
        for (name, v) in [
            ("tau_t", t.tau_t),
            ("tau_p", t.tau_p),
            ("tau_g", t.tau_g),
            ("tau_1", t.tau_1),
            ("tau_2", t.tau_2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("temperature {name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn phases(&self) -> Vec<Phase> {
        if self.phases.is_empty() {
            vec![Phase {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
            }]
        } else {
            self.phases.clone()
        }
    }

    /// Weight decay applied to the named block.
    pub fn decay_for(&self, block: &str) -> f64 {
        if self.renormalize_prototypes && block == "prototypes.mu" {
            0.0
        } else {
            self.weight_decay
        }
    }

    pub fn model_dims(&self, world: &ConceptWorld) -> ModelDims {
        ModelDims {
            vocab: world.vocab_size(),
            d_pix: world.d_pix(),
            n_patches: world.n_patches(),
            d: self.d,
            d_v: self.d_v,
            k: self.k,
            l: self.l,
        }
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
