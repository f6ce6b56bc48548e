//! Run configuration: one JSON document covering task, geometry, network,
//! schedule, training and evaluation. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{DegradeSpec, Task};
use crate::error::{CdpError, Result};
use crate::masking::PolicyGeometry;
use crate::model::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeomSection {
    pub history_len: usize,
    pub target_len: usize,
    pub valid_len: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    /// Defaults to four windows when absent.
    #[serde(default)]
    pub temporal_period: Option<usize>,
    #[serde(default = "one")]
    pub n_obs_tokens: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub max_steps: usize,
    pub noise_scale: f64,
    pub dropout_prob: f64,
    pub use_cache: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub geom: GeomSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::PushtLite,
            geom: GeomSection {
                history_len: 16,
                target_len: 12,
                valid_len: 8,
                chunk: 8,
            },
            model: ModelSection {
                d_model: 32,
                n_heads: 2,
                n_blocks: 2,
                d_ff: 64,
                temporal_period: None,
                n_obs_tokens: 1,
            },
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection {
                episodes: 100,
                max_steps: 300,
                noise_scale: 0.0,
                dropout_prob: 0.0,
                use_cache: true,
                seed: 0,
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CdpError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CdpError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Keys sorted, no whitespace: the form echoed into checkpoints.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Canonical JSON of the parts that fix the parameter layout and meaning.
    pub fn architecture_json(&self) -> String {
        let v = serde_json::json!({
            "task": self.task,
            "geom": self.geom,
            "model": self.model,
            "schedule": self.schedule,
        });
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn geometry(&self) -> Result<PolicyGeometry> {
        let g = PolicyGeometry {
            history_len: self.geom.history_len,
            target_len: self.geom.target_len,
            valid_len: self.geom.valid_len,
            chunk: self.geom.chunk,
            cached_len: 0,
        };
        g.validate().map_err(|e| CdpError::Config(format!("geom: {e}")))?;
        Ok(g)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let geom = self.geometry()?;
        let m = ModelConfig {
            action_dim: self.task.action_dim(),
            obs_dim: self.task.obs_dim(),
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_blocks: self.model.n_blocks,
            d_ff: self.model.d_ff,
            temporal_period: self
                .model
                .temporal_period
                .unwrap_or_else(|| ModelConfig::default_period(&geom)),
            n_obs_tokens: self.model.n_obs_tokens,
            geom,
            schedule: self.schedule.clone(),
        };
        m.validate().map_err(|e| CdpError::Config(format!("model: {e}")))?;
        Ok(m)
    }

    pub fn degrade(&self) -> DegradeSpec {
        DegradeSpec {
            noise_scale: self.eval.noise_scale,
            dropout_prob: self.eval.dropout_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train
            .validate()
            .map_err(|e| CdpError::Config(format!("train: {e}")))?;
        self.degrade()
            .validate()
            .map_err(|e| CdpError::Config(format!("eval: {e}")))?;
        if self.eval.episodes == 0 || self.eval.max_steps == 0 {
            return Err(CdpError::Config("eval: episodes and max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model_config().unwrap().temporal_period, 4 * 28);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let s = RunConfig::default().canonical_json();
        let eval = s.find("\"eval\"").unwrap();
        let geom = s.find("\"geom\"").unwrap();
        let task = s.find("\"task\"").unwrap();
        assert!(eval < geom && geom < task);
        assert!(!s.contains(' '));
    }

    #[test]
    fn unknown_keys_and_bad_geometry_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["model"]["dropout"] = serde_json::json!(0.1);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(CdpError::Config(_))));
        let mut c = RunConfig::default();
        c.geom.history_len = 20;
        let err = RunConfig::from_json(&c.canonical_json()).unwrap_err().to_string();
        assert!(err.contains("geom"), "{err}");
        let mut c = RunConfig::default();
        c.train.sigma = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("train"));
    }
}
