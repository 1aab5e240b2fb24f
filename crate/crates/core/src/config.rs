//! Pipeline configuration: model roles, retrieval and render settings,
//! tool argv templates, gateway mode. Loaded from a single TOML file with
//! environment overrides layered on top.

use crate::gateway::{GatewayMode, ModelRole, RetryPolicy, RoleConfig};
use crate::render::ToolConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
}

fn default_model() -> String {
    "gpt-5-mini".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub solver: RoleConfig,
    pub planner: RoleConfig,
    pub coder: RoleConfig,
    pub judge: RoleConfig,
    pub vision: RoleConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        // Generation roles sample; judging roles are deterministic.
        let gen = |t| RoleConfig {
            model: default_model(),
            temperature: t,
        };
        ModelsConfig {
            solver: gen(0.7),
            planner: gen(0.7),
            coder: gen(0.7),
            judge: gen(0.0),
            vision: gen(0.0),
        }
    }
}

impl ModelsConfig {
    pub fn for_role(&self, role: ModelRole) -> &RoleConfig {
        match role {
            ModelRole::Solver => &self.solver,
            ModelRole::Planner => &self.planner,
            ModelRole::Coder => &self.coder,
            ModelRole::Judge => &self.judge,
            ModelRole::VisionJudge => &self.vision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub chunk_size: usize,
    pub overlap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<PathBuf>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 5,
            chunk_size: 1200,
            overlap: 200,
            index_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub timeout_s: u64,
    pub pool_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            timeout_s: 600,
            pool_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cassette: Option<PathBuf>,
    /// Live-transport command: receives the request as JSON on stdin and
    /// prints the completion (text or JSON) on stdout. Credentials such as
    /// PSA_API_KEY reach it through the environment.
    pub live_cmd: Vec<String>,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: GatewayMode::Replay,
            cassette: None,
            live_cmd: Vec::new(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root under which `runs/<question_id>/...` is created.
    pub out_dir: PathBuf,
    pub csv: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("."),
            csv: PathBuf::from("results.csv"),
        }
    }
}

/// Everything the pipeline needs to run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub models: ModelsConfig,
    pub retrieval: RetrievalConfig,
    pub render: RenderConfig,
    pub tools: ToolConfig,
    pub gateway: GatewayConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Applies `PSA_MODEL_<ROLE>` overrides from an environment snapshot.
    pub fn apply_env_overrides<I>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            match key.as_str() {
                "PSA_MODEL_SOLVER" => self.models.solver.model = value,
                "PSA_MODEL_PLANNER" => self.models.planner.model = value,
                "PSA_MODEL_CODER" => self.models.coder.model = value,
                "PSA_MODEL_JUDGE" => self.models.judge.model = value,
                "PSA_MODEL_VISION" => self.models.vision.model = value,
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_sane() {
        let c = PipelineConfig::default();
        assert_eq!(c.retrieval.k, 5);
        assert_eq!(c.retrieval.chunk_size, 1200);
        assert_eq!(c.retrieval.overlap, 200);
        assert_eq!(c.render.timeout_s, 600);
        assert_eq!(c.render.pool_size, 2);
        assert_eq!(c.gateway.mode, GatewayMode::Replay);
        assert_eq!(c.models.judge.temperature, 0.0);
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let text = r#"
[models.solver]
model = "local-llm"
temperature = 0.3

[render]
timeout_s = 30
pool_size = 1

[gateway]
mode = "record"
cassette = "fixture.jsonl"
"#;
        let c: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(c.models.solver.model, "local-llm");
        assert_eq!(c.models.planner.model, "gpt-5-mini");
        assert_eq!(c.render.timeout_s, 30);
        assert_eq!(c.gateway.mode, GatewayMode::Record);
        assert_eq!(c.gateway.cassette, Some(PathBuf::from("fixture.jsonl")));
    }

    #[test]
    fn env_overrides_win() {
        let mut c = PipelineConfig::default();
        c.apply_env_overrides([
            ("PSA_MODEL_SOLVER".to_string(), "alt-solver".to_string()),
            ("PSA_MODEL_VISION".to_string(), "alt-vision".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ]);
        assert_eq!(c.models.solver.model, "alt-solver");
        assert_eq!(c.models.vision.model, "alt-vision");
        assert_eq!(c.models.coder.model, "gpt-5-mini");
    }
}
