//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! ```toml
//! [kb]
//! path = "out/kb.atomrag"
//!
//! [gateway]
//! # exactly one of: endpoint, mock_script, synthetic
//! endpoint = "https://api.openai.com/v1"
//! chat_model = "gpt-4o"
//! embedding_model = "text-embedding-3-small"
//! api_key_env = "OPENAI_API_KEY"
//! embedding_dim = 1536
//!
//! [output]
//! dir = "out"
//! ```
//!
//! The remaining sections (`chunking`, `extraction`, `ingest`, `retrieval`,
//! `solver`, `collection`, `eval`, `synthetic`) take the field names of the
//! matching library config types; missing fields keep their defaults.
//! `retrieval` feeds the solver, and `solver` feeds collection.

use std::fs;
use std::path::{Path, PathBuf};

use atomrag::chunking::ChunkingConfig;
use atomrag::decomposer::CollectionConfig;
use atomrag::evaluation::EvalConfig;
use atomrag::gateway::{
    HashEmbedder, HttpConfig, HttpGateway, LlmGateway, MockGateway, RetryPolicy, ScriptFile,
};
use atomrag::extraction::ExtractionConfig;
use atomrag::ingest::IngestConfig;
use atomrag::retrieval::RetrievalConfig;
use atomrag::solver::SolverConfig;
use atomrag::synthetic::{ChainSpec, MockStyle, SyntheticBench};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kb: KbSection,
    pub gateway: GatewaySection,
    pub chunking: ChunkingConfig,
    pub extraction: ExtractionConfig,
    pub ingest: IngestSection,
    pub retrieval: RetrievalConfig,
    pub solver: SolverConfig,
    pub collection: CollectionConfig,
    pub eval: EvalConfig,
    pub synthetic: ChainSpec,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct KbSection {
    pub path: Option<PathBuf>,
}

/// Which extraction passes run at ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    pub atomize: bool,
    pub distill: bool,
    pub tags: bool,
}

impl Default for IngestSection {
    fn default() -> Self {
        let d = IngestConfig::default();
        Self {
            atomize: d.atomize,
            distill: d.distill,
            tags: d.tags,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySection {
    pub endpoint: Option<String>,
    pub mock_script: Option<PathBuf>,
    /// Oracle-backed mock over the corpus described by `[synthetic]`.
    pub synthetic: Option<MockStyle>,
    pub chat_model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub embedding_dim: usize,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Dimension of the hash embedder used with `mock_script`.
    pub mock_embedding_dim: usize,
    pub mock_embedding_seed: u64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let http = HttpConfig::default();
        Self {
            endpoint: None,
            mock_script: None,
            synthetic: None,
            chat_model: http.chat_model,
            embedding_model: http.embedding_model,
            api_key_env: "OPENAI_API_KEY".into(),
            embedding_dim: http.embedding_dim,
            timeout_secs: http.timeout_secs,
            max_in_flight: http.max_in_flight,
            retry: http.retry,
            mock_embedding_dim: atomrag::gateway::MOCK_EMBEDDING_DIM,
            mock_embedding_seed: 0,
        }
    }
}

pub struct Gateway {
    pub inner: Box<dyn LlmGateway>,
    /// Scripted replies are consumed in call order, so runs stay sequential.
    pub sequential: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn ingest_config(&self, parallel: usize) -> IngestConfig {
        IngestConfig {
            chunking: self.chunking.clone(),
            extraction: self.extraction.clone(),
            atomize: self.ingest.atomize,
            distill: self.ingest.distill,
            tags: self.ingest.tags,
            parallel,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            retrieval: self.retrieval.clone(),
            ..self.solver.clone()
        }
    }

    pub fn collection_config(&self, parallel: usize) -> CollectionConfig {
        CollectionConfig {
            solver: self.solver_config(),
            parallel,
            ..self.collection.clone()
        }
    }

    pub fn eval_config(&self, parallel: usize, judge: bool) -> EvalConfig {
        EvalConfig {
            judge: judge || self.eval.judge,
            parallel,
        }
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let g = &self.gateway;
        let configured = [g.endpoint.is_some(), g.mock_script.is_some(), g.synthetic.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if configured != 1 {
            return Err(CliError::usage(
                "configure exactly one of gateway.endpoint, gateway.mock_script or gateway.synthetic",
            ));
        }
        if let Some(style) = g.synthetic {
            let bench = SyntheticBench::generate(&self.synthetic).map_err(CliError::usage)?;
            return Ok(Gateway {
                inner: Box::new(bench.mock_gateway(style)),
                sequential: false,
            });
        }
        if let Some(path) = &g.mock_script {
            let script = ScriptFile::load(path).map_err(CliError::usage)?.into_script();
            if g.mock_embedding_dim == 0 {
                return Err(CliError::usage("gateway.mock_embedding_dim must be positive"));
            }
            let embedder = HashEmbedder::new(g.mock_embedding_dim, g.mock_embedding_seed);
            return Ok(Gateway {
                inner: Box::new(MockGateway::with_embedder(script, embedder)),
                sequential: true,
            });
        }
        let api_key = std::env::var(&g.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            tracing::warn!(var = %g.api_key_env, "no API key in environment; sending unauthenticated requests");
        }
        let http = HttpConfig {
            base_url: g.endpoint.clone().unwrap_or_default(),
            chat_model: g.chat_model.clone(),
            embedding_model: g.embedding_model.clone(),
            api_key,
            embedding_dim: g.embedding_dim,
            timeout_secs: g.timeout_secs,
            max_in_flight: g.max_in_flight,
            retry: g.retry.clone(),
        };
        Ok(Gateway {
            inner: Box::new(HttpGateway::new(http).map_err(CliError::usage)?),
            sequential: false,
        })
    }
}
