//! Optional TOML configuration file. Values here sit below environment
//! variables and command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use forge_core::dataset::ActionKind;
use forge_core::grounding::Evaluator;
use forge_core::grpo::{GrpoConfig, ToyEnvSpec};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub reviewer: ReviewerSection,
    pub grpo: Option<GrpoConfig>,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub sampler: SamplerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub evaluator: Option<Evaluator>,
    pub tau: Option<f64>,
    pub fallback_radius: Option<f64>,
    pub boundary_inclusive: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewerSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token_var: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_concurrent: Option<usize>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    pub n_queries: Option<usize>,
    pub batch_queries: Option<usize>,
    pub target_lo: Option<f64>,
    pub target_hi: Option<f64>,
    pub box_half: Option<f64>,
    pub init_distance: Option<f64>,
    pub scale: Option<f64>,
    pub sigma: Option<f64>,
}

impl ToySection {
    pub fn env_spec(&self) -> ToyEnvSpec {
        let d = ToyEnvSpec::default();
        ToyEnvSpec {
            n_queries: self.n_queries.unwrap_or(d.n_queries),
            batch_queries: self.batch_queries.unwrap_or(d.batch_queries),
            target_lo: self.target_lo.unwrap_or(d.target_lo),
            target_hi: self.target_hi.unwrap_or(d.target_hi),
            box_half: self.box_half.unwrap_or(d.box_half),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub target: Option<BTreeMap<ActionKind, f64>>,
    pub batch_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
