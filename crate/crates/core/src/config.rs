//! JSON run configuration: parsing, defaults, validation and value origins.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PidError, Result};
use crate::eval::EvalSettings;
use crate::grid::GridConfig;
use crate::loss::LossConfig;
use crate::mlp::Activation;
use crate::student::{StudentConfig, TimeEmbedding};
use crate::teacher::{Component, TeacherSpec};
use crate::trainer::{TrainConfig, TrainSettings};

fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    6.0
}
fn default_sigma0() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSection {
    Gmm { dim: usize, components: Vec<Component> },
    /// Equal-weight isotropic Gaussians evenly spaced on a circle in 2-D.
    Ring {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_sigma0")]
        sigma0: f64,
    },
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection::Ring { modes: default_modes(), radius: default_radius(), sigma0: default_sigma0() }
    }
}

impl TeacherSection {
    pub fn build(&self) -> Result<TeacherSpec> {
        match self {
            TeacherSection::Gmm { dim, components } => TeacherSpec::new(*dim, components.clone()),
            TeacherSection::Ring { modes, radius, sigma0 } => TeacherSpec::ring(*modes, *radius, *sigma0),
        }
    }
}

/// Network settings; input width and `T` are derived from the teacher and grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub sigma_data: f64,
    pub time_embedding: TimeEmbedding,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            hidden_dims: vec![64, 64, 64],
            activation: Activation::Silu,
            sigma_data: 0.5,
            time_embedding: TimeEmbedding::Scalar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    User,
    Default,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolvedConfig {
    pub teacher: TeacherSection,
    pub grid: GridConfig,
    pub student: StudentSection,
    pub loss: LossConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    /// Dotted leaf path to where its value came from. Not serialized.
    #[serde(skip)]
    pub sources: BTreeMap<String, Source>,
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |node, key| node.get(key))
}

impl ResolvedConfig {
    /// Parses, applies defaults and validates.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut cfg: ResolvedConfig =
            serde_json::from_str(text).map_err(|e| PidError::Parse(format!("config: {e}")))?;
        let user: Value = serde_json::from_str(text).map_err(|e| PidError::Parse(format!("config: {e}")))?;
        let resolved = serde_json::to_value(&cfg).map_err(|e| PidError::Parse(e.to_string()))?;
        let mut leaves = Vec::new();
        leaf_paths(&resolved, "", &mut leaves);
        cfg.sources = leaves
            .into_iter()
            .map(|p| {
                let src = if lookup(&user, &p).is_some() { Source::User } else { Source::Default };
                (p, src)
            })
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.eval.validate()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let teacher = self.teacher.build()?;
        let student = StudentConfig {
            input_dim: teacher.dim,
            hidden_dims: self.student.hidden_dims.clone(),
            activation: self.student.activation,
            t_max: self.grid.t_max,
            sigma_data: self.student.sigma_data,
            time_embedding: self.student.time_embedding,
        };
        Ok(TrainConfig { teacher, grid: self.grid, student, loss: self.loss, train: self.train })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PidError::Parse(e.to_string()))
    }

    pub fn source(&self, path: &str) -> Option<Source> {
        self.sources.get(path).copied()
    }
}

pub fn load_config(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PidError::Input(format!("cannot read config {}: {e}", path.display())))?;
    ResolvedConfig::from_json_str(&text)
}
