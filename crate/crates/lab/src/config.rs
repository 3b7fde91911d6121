//! Experiment configuration: TOML with dotted section keys, layered as
//! built-in defaults < file < `key=value` overrides.

use std::path::{Path, PathBuf};

use csi_llm_core::channel::NormMode;
use csi_llm_core::config::{
    BackboneConfig, EvalConfig, HParams, InitMode, ModelVariant, ScenarioConfig, SpeedSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train/val/test sample counts; must add up to the dataset size.
    pub split: [usize; 3],
    pub norm: NormMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: [17640, 1680, 1680],
            norm: NormMode::GlobalStd,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Parent of run directories; `CSI_LLM_RUNS_DIR` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs_root: Option<String>,
    /// External dataset to use instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Checkpoint evaluated when the run has not trained one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Pretrained transformer weights (file or directory).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Scenarios to run; empty means just `scenario.speed_kmh`.
    pub speeds: Vec<SpeedSpec>,
    pub variants: Vec<ModelVariant>,
    /// Init modes compared by the ablation stage.
    pub ablation_modes: [InitMode; 2],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            speeds: Vec::new(),
            variants: ModelVariant::ALL.to_vec(),
            ablation_modes: [InitMode::Pretrained, InitMode::Random],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub scenario: ScenarioConfig,
    pub backbone: BackboneConfig,
    pub hparams: HParams,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            scenario: ScenarioConfig::default(),
            backbone: BackboneConfig::default(),
            hparams: HParams::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn core_err(e: csi_llm_core::Error) -> LabError {
    match e {
        csi_llm_core::Error::Config { field, reason } => LabError::config(field, reason),
        other => LabError::Core(other),
    }
}

impl ExperimentConfig {
    /// Scenarios the pipeline iterates over, each with its speed applied.
    pub fn scenarios(&self) -> Vec<ScenarioConfig> {
        if self.sweep.speeds.is_empty() {
            vec![self.scenario.clone()]
        } else {
            self.sweep
                .speeds
                .iter()
                .map(|s| self.scenario.clone().with_speed(s.clone()))
                .collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id.starts_with('.')
        {
            return Err(LabError::config("run_id", "must be a plain directory name"));
        }
        for sc in self.scenarios() {
            sc.validate().map_err(core_err)?;
        }
        self.backbone.validate().map_err(core_err)?;
        self.hparams.validate(&self.scenario).map_err(core_err)?;
        if self.hparams.l_m > self.backbone.max_positions {
            return Err(LabError::config(
                "hparams.l_m",
                format!(
                    "exceeds backbone.max_positions = {}",
                    self.backbone.max_positions
                ),
            ));
        }
        if self.paths.dataset.is_none()
            && self.data.split.iter().sum::<usize>() != self.scenario.n_samples
        {
            return Err(LabError::config(
                "data.split",
                format!(
                    "counts must add up to scenario.n_samples = {}",
                    self.scenario.n_samples
                ),
            ));
        }
        let anchor = self.eval.resolved_anchor(self.hparams.l_m);
        if anchor >= self.scenario.n_steps {
            return Err(LabError::config(
                "eval.anchor",
                format!(
                    "target step {anchor} outside {} steps",
                    self.scenario.n_steps
                ),
            ));
        }
        if let Some(&l) = self.eval.lengths.iter().find(|&&l| l == 0 || l > anchor) {
            return Err(LabError::config(
                "eval.lengths",
                format!("length {l} needs 1..={anchor} steps before the target"),
            ));
        }
        if self.eval.rollout_context == 0
            || self.eval.rollout_start + self.eval.rollout_context > self.scenario.n_steps
        {
            return Err(LabError::config(
                "eval.rollout_context",
                "context does not fit the trajectory",
            ));
        }
        if self.eval.horizon == 0 {
            return Err(LabError::config("eval.horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parse_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            LabError::config(error_key(&e), e.message().to_string())
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let key = e.path().to_string();
                LabError::config(key, e.into_inner().to_string())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `file` (if any) over the defaults, then applies `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?,
            None => String::new(),
        };
        Self::parse_str(&text, overrides)
    }

    pub fn runs_root(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os("CSI_LLM_RUNS_DIR") {
            return PathBuf::from(dir);
        }
        PathBuf::from(self.paths.runs_root.as_deref().unwrap_or("runs"))
    }
}

fn error_key(e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => format!("<file> bytes {}..{}", span.start, span.end),
        None => "<file>".into(),
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| LabError::config(item, "override must look like `section.key=value`"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::config(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The in-repo reduced profile used by tests and smoke runs.
pub fn ci_profile() -> ExperimentConfig {
    ExperimentConfig {
        run_id: "ci".into(),
        scenario: ScenarioConfig::ci(),
        backbone: BackboneConfig::ci(),
        hparams: HParams::ci(),
        data: DataConfig {
            split: [160, 20, 20],
            norm: NormMode::GlobalStd,
        },
        ..ExperimentConfig::default()
    }
}
