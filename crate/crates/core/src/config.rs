//! TOML configuration documents. Every field has a built-in default; CLI
//! flags are applied on top by the command handlers.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalParams;
use crate::fusion::FusionConfig;
use crate::synth::SynthConfig;
use crate::tta::{default_view_plan, Flip, ViewPlan, DEFAULT_SIZES};

/// Sizes x flips, expanded with [`ViewPlan::grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub sizes: Vec<u32>,
    #[serde(default = "default_flips")]
    pub flips: Vec<String>,
}

fn default_flips() -> Vec<String> {
    vec!["none".into()]
}

impl PlanSpec {
    pub fn to_plan(&self) -> Result<ViewPlan> {
        let flips: Vec<Flip> = self
            .flips
            .iter()
            .map(|f| f.parse())
            .collect::<Result<_>>()?;
        ViewPlan::grid(&self.sizes, &flips)
    }
}

/// Settings shared by `fuse`, `run` and `eval`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plan: Option<PlanSpec>,
    pub fusion: FusionConfig,
    pub eval: EvalParams,
    pub lenient: bool,
}

impl RunConfig {
    pub fn view_plan(&self) -> Result<ViewPlan> {
        match &self.plan {
            Some(spec) => spec.to_plan(),
            None => Ok(default_view_plan()),
        }
    }
}

/// One row of the strategy comparison: a named view plan and its fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    #[serde(flatten)]
    pub plan: PlanSpec,
    /// Overrides the bench-wide fusion settings for this strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
}

impl Strategy {
    pub fn new(name: &str, sizes: &[u32], flips: &[&str]) -> Self {
        Self {
            name: name.into(),
            plan: PlanSpec {
                sizes: sizes.to_vec(),
                flips: flips.iter().map(|s| s.to_string()).collect(),
            },
            fusion: None,
        }
    }
}

/// Single-view 1280, 2560 and 3200 runs, then the 3-scale plan without and
/// with horizontal flips.
pub fn default_strategies() -> Vec<Strategy> {
    vec![
        Strategy::new("single-1280", &[1280], &["none"]),
        Strategy::new("single-2560", &[2560], &["none"]),
        Strategy::new("single-3200", &[3200], &["none"]),
        Strategy::new("multiscale", &DEFAULT_SIZES, &["none"]),
        Strategy::new("multiscale+flip", &DEFAULT_SIZES, &["none", "h"]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub fusion: FusionConfig,
    pub eval: EvalParams,
    #[serde(rename = "strategy")]
    pub strategies: Vec<Strategy>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalParams::default(),
            strategies: default_strategies(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fusion.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::validation("no strategies configured"));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.strategies {
            if !names.insert(s.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate strategy name '{}'",
                    s.name
                )));
            }
            s.plan
                .to_plan()
                .map_err(|e| Error::validation(format!("strategy '{}': {e}", s.name)))?;
            if let Some(f) = &s.fusion {
                f.validate()?;
            }
        }
        Ok(())
    }
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config serializes to TOML")
}
