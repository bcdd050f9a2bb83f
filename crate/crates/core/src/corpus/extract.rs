//! Evidence extraction backends: report → list of short finding phrases.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{ConceptId, ConceptWorld, EvidencePhrase, Report, TokenId};
use crate::error::{Error, Result};

pub trait EvidenceExtractor {
    fn extract(&self, report: &Report) -> Result<Vec<EvidencePhrase>>;
}

fn ensure_non_empty(report: &Report) -> Result<()> {
    if report.is_empty() {
        Err(Error::input(format!("report {} has no tokens", report.id)))
    } else {
        Ok(())
    }
}

/// Oracle backend: one phrase per concept-bearing sentence holding exactly
/// that sentence's concept tokens.
pub struct GroundTruthExtractor {
    token_concept: Vec<Option<ConceptId>>,
}

impl GroundTruthExtractor {
    pub fn new(world: &ConceptWorld) -> Self {
        Self {
            token_concept: world.token_concepts(),
        }
    }
}

impl EvidenceExtractor for GroundTruthExtractor {
    fn extract(&self, report: &Report) -> Result<Vec<EvidencePhrase>> {
        ensure_non_empty(report)?;
        let mut out = Vec::new();
        for sentence in &report.sentences {
            let concept_tokens: Vec<(TokenId, ConceptId)> = sentence
                .iter()
                .filter_map(|&t| {
                    self.token_concept
                        .get(t as usize)
                        .copied()
                        .flatten()
                        .map(|c| (t, c))
                })
                .collect();
            let Some(&(_, concept)) = concept_tokens.first() else {
                continue;
            };
            out.push(EvidencePhrase {
                tokens: concept_tokens.iter().map(|&(t, _)| t).collect(),
                source_report: report.id,
                concept: Some(concept),
            });
        }
        Ok(out)
    }
}

/// Sentence splitter that keeps every sentence containing at least one
/// non-background token, verbatim.
pub struct RuleExtractor {
    is_background: Vec<bool>,
}

impl RuleExtractor {
    pub fn new(world: &ConceptWorld) -> Self {
        let mut is_background = vec![false; world.vocab_size()];
        for &t in &world.background_vocab {
            is_background[t as usize] = true;
        }
        Self { is_background }
    }
}

impl EvidenceExtractor for RuleExtractor {
    fn extract(&self, report: &Report) -> Result<Vec<EvidencePhrase>> {
        ensure_non_empty(report)?;
        Ok(report
            .sentences
            .iter()
            .filter(|s| {
                s.iter()
                    .any(|&t| !self.is_background.get(t as usize).copied().unwrap_or(false))
            })
            .map(|s| EvidencePhrase {
                tokens: s.clone(),
                source_report: report.id,
                concept: None,
            })
            .collect())
    }
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = include_str!("../../assets/evidence_prompt.txt");

pub const ENV_ENDPOINT: &str = "LGDEA_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "LGDEA_LLM_API_KEY";

#[derive(Debug, Clone)]
pub struct LlmExtractorConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    /// Must contain the `{report}` placeholder.
    pub prompt_template: String,
    pub cache_dir: Option<PathBuf>,
    pub timeout: Duration,
}

impl LlmExtractorConfig {
    /// Endpoint and key from `LGDEA_LLM_ENDPOINT` / `LGDEA_LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| Error::config(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            cache_dir: None,
            timeout: Duration::from_secs(60),
        })
    }
}

/// Sends the rendered report to an HTTP completion endpoint and reads back
/// one phrase per line.
///
/// Requests are plain-text POSTs. Responses are cached on disk under the
/// SHA-256 of endpoint and prompt, so reruns are deterministic once every
/// report has been fetched.
pub struct LlmExtractor {
    config: LlmExtractorConfig,
    world: ConceptWorld,
    words: BTreeMap<String, TokenId>,
    agent: ureq::Agent,
    cache_lock: Mutex<()>,
}

impl LlmExtractor {
    pub fn new(config: LlmExtractorConfig, world: &ConceptWorld) -> Result<Self> {
        if !config.prompt_template.contains("{report}") {
            return Err(Error::config(
                "prompt template lacks the {report} placeholder",
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            words: world.word_table(),
            world: world.clone(),
            config,
            agent,
            cache_lock: Mutex::new(()),
        })
    }

    pub fn prompt_for(&self, report: &Report) -> String {
        self.config
            .prompt_template
            .replace("{report}", &self.world.render_report(report))
    }

    fn cache_path(&self, prompt: &str) -> Option<PathBuf> {
        let dir = self.config.cache_dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(self.config.endpoint.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        Some(dir.join(format!("{}.txt", hex::encode(h.finalize()))))
    }

    fn fetch(&self, prompt: &str) -> Result<String> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .content_type("text/plain; charset=utf-8");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(prompt).map_err(|e| Error::Extraction {
            message: format!("request to {} failed: {e}", self.config.endpoint),
            raw: String::new(),
        })?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Extraction {
                message: format!("could not read response body: {e}"),
                raw: String::new(),
            })?;
        if !status.is_success() {
            return Err(Error::Extraction {
                message: format!("endpoint returned HTTP {status}"),
                raw: body,
            });
        }
        Ok(body)
    }

    fn completion(&self, prompt: &str) -> Result<String> {
        let cache = self.cache_path(prompt);
        if let Some(path) = &cache {
            if let Ok(hit) = std::fs::read_to_string(path) {
                return Ok(hit);
            }
        }
        let body = self.fetch(prompt)?;
        if let Some(path) = cache {
            let _guard = self.cache_lock.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, &body).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(body)
    }

    /// Parses a line-per-phrase response. Unknown words are dropped; a line
    /// with no known word is dropped. Text with content but no parseable
    /// phrase at all is an error carrying the raw response.
    pub fn parse_response(&self, report: &Report, raw: &str) -> Result<Vec<EvidencePhrase>> {
        let concepts = self.world.token_concepts();
        let mut out = Vec::new();
        for line in raw.lines() {
            let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
            if line.is_empty() || line.eq_ignore_ascii_case("none") {
                continue;
            }
            let tokens: Vec<TokenId> = line
                .split(|c: char| !c.is_ascii_alphanumeric())
                .filter_map(|w| self.words.get(w).copied())
                .collect();
            if tokens.is_empty() {
                continue;
            }
            let concept = tokens.iter().find_map(|&t| concepts[t as usize]);
            out.push(EvidencePhrase {
                tokens,
                source_report: report.id,
                concept,
            });
        }
        let has_content = raw
            .lines()
            .any(|l| !l.trim().is_empty() && !l.trim().eq_ignore_ascii_case("none"));
        if out.is_empty() && has_content {
            return Err(Error::Extraction {
                message: "response contained no recognisable phrase".into(),
                raw: raw.to_string(),
            });
        }
        Ok(out)
    }
}

impl EvidenceExtractor for LlmExtractor {
    fn extract(&self, report: &Report) -> Result<Vec<EvidencePhrase>> {
        ensure_non_empty(report)?;
        let prompt = self.prompt_for(report);
        let raw = self.completion(&prompt)?;
        self.parse_response(report, &raw)
    }
}

/// Backend selection by name, as used from configuration and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorBackend {
    #[default]
    GroundTruth,
    Rule,
    Llm,
}

impl ExtractorBackend {
    pub fn build(self, world: &ConceptWorld) -> Result<Box<dyn EvidenceExtractor + Send + Sync>> {
        Ok(match self {
            Self::GroundTruth => Box::new(GroundTruthExtractor::new(world)),
            Self::Rule => Box::new(RuleExtractor::new(world)),
            Self::Llm => Box::new(LlmExtractor::new(LlmExtractorConfig::from_env()?, world)?),
        })
    }
}
