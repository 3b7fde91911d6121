//! Configuration types shared by every stage. Defaults reproduce the
//! full-size setup (32×4 antennas, 8 PRBs, 12-layer 768-wide backbone);
//! `ci()` constructors give the reduced profile used by the test suites.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
/// PRB width: 12 subcarriers at 15 kHz.
pub const PRB_SPACING_HZ: f64 = 180e3;
/// Path delays are drawn uniformly in `[0, MAX_PATH_DELAY_S]`.
pub const MAX_PATH_DELAY_S: f64 = 1e-6;

/// One speed for every sample, or a list from which each sample draws one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpeedSpec {
    Single(f64),
    Mixture(Vec<f64>),
}

impl SpeedSpec {
    pub fn speeds(&self) -> &[f64] {
        match self {
            SpeedSpec::Single(v) => core::slice::from_ref(v),
            SpeedSpec::Mixture(v) => v,
        }
    }

    /// Short scenario label: `30kmh` or `mix`.
    pub fn tag(&self) -> String {
        match self {
            SpeedSpec::Single(v) => format!("{}kmh", v),
            SpeedSpec::Mixture(_) => String::from("mix"),
        }
    }
}

/// Per-step CSI tensor geometry `[2, n_tx, n_rx, n_prb]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepShape {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_prb: usize,
}

impl StepShape {
    pub const fn feature_dim(&self) -> usize {
        2 * self.n_tx * self.n_rx * self.n_prb
    }

    /// Complex entries per plane.
    pub const fn plane_len(&self) -> usize {
        self.n_tx * self.n_rx * self.n_prb
    }

    pub fn dims(&self) -> [usize; 4] {
        [2, self.n_tx, self.n_rx, self.n_prb]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub speed_kmh: SpeedSpec,
    pub carrier_hz: f64,
    pub tti_s: f64,
    pub n_steps: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_prb: usize,
    pub n_paths: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            speed_kmh: SpeedSpec::Single(30.0),
            carrier_hz: 2e9,
            tti_s: 5e-3,
            n_steps: 20,
            n_tx: 32,
            n_rx: 4,
            n_prb: 8,
            n_paths: 12,
            n_samples: 21_000,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Reduced geometry for tests: 8×2 antennas, 4 PRBs, 200 samples.
    pub fn ci() -> Self {
        Self {
            n_tx: 8,
            n_rx: 2,
            n_prb: 4,
            n_samples: 200,
            ..Self::default()
        }
    }

    pub fn with_speed(mut self, speed: SpeedSpec) -> Self {
        self.speed_kmh = speed;
        self
    }

    pub fn step_shape(&self) -> StepShape {
        StepShape {
            n_tx: self.n_tx,
            n_rx: self.n_rx,
            n_prb: self.n_prb,
        }
    }

    /// Floats per sample: `n_steps · 2 · n_tx · n_rx · n_prb`.
    pub fn sample_len(&self) -> usize {
        self.n_steps * self.step_shape().feature_dim()
    }

    /// Maximum Doppler shift `v·f_c/c` for a speed in km/h.
    pub fn doppler_hz(&self, speed_kmh: f64) -> f64 {
        speed_kmh / 3.6 * self.carrier_hz / SPEED_OF_LIGHT
    }

    pub fn validate(&self) -> Result<()> {
        let speeds = self.speed_kmh.speeds();
        if speeds.is_empty() {
            return Err(Error::config("scenario.speed_kmh", "speed list is empty"));
        }
        for &v in speeds {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    "scenario.speed_kmh",
                    format!("speed must be finite and > 0, got {v}"),
                ));
            }
        }
        if !(self.carrier_hz.is_finite() && self.carrier_hz > 0.0) {
            return Err(Error::config(
                "scenario.carrier_hz",
                "must be finite and > 0",
            ));
        }
        if !(self.tti_s.is_finite() && self.tti_s > 0.0) {
            return Err(Error::config("scenario.tti_s", "must be finite and > 0"));
        }
        if self.n_steps < 2 {
            return Err(Error::config("scenario.n_steps", "must be at least 2"));
        }
        for (name, v) in [
            ("scenario.n_tx", self.n_tx),
            ("scenario.n_rx", self.n_rx),
            ("scenario.n_prb", self.n_prb),
            ("scenario.n_paths", self.n_paths),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        for &v in speeds {
            let fd = self.doppler_hz(v);
            if !(fd.is_finite() && fd > 0.0) {
                return Err(Error::config(
                    "scenario.speed_kmh",
                    format!("derived Doppler {fd} Hz is not finite and positive"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    /// Every parameter updates.
    Full,
    /// Only the CSI embedding and the output head update; transformer blocks,
    /// positional table and final layer norm stay frozen.
    HeadsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Hidden width of the nonlinear output projection and the fixed-step heads.
    pub proj_hidden: usize,
    pub init_mode: InitMode,
    pub trainable_scope: TrainableScope,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            model_dim: 768,
            n_heads: 12,
            ff_dim: 3072,
            max_positions: 1024,
            proj_hidden: 1024,
            init_mode: InitMode::Pretrained,
            trainable_scope: TrainableScope::Full,
        }
    }
}

impl BackboneConfig {
    /// Two layers, width 64, four heads.
    pub fn ci() -> Self {
        Self {
            n_layers: 2,
            model_dim: 64,
            n_heads: 4,
            ff_dim: 256,
            max_positions: 1024,
            proj_hidden: 256,
            init_mode: InitMode::Random,
            trainable_scope: TrainableScope::Full,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone.n_layers", self.n_layers),
            ("backbone.model_dim", self.model_dim),
            ("backbone.n_heads", self.n_heads),
            ("backbone.ff_dim", self.ff_dim),
            ("backbone.max_positions", self.max_positions),
            ("backbone.proj_hidden", self.proj_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "backbone.n_heads",
                format!(
                    "model_dim {} is not divisible by n_heads {}",
                    self.model_dim, self.n_heads
                ),
            ));
        }
        Ok(())
    }

    /// Transformer parameters excluding the text vocabulary table:
    /// positional table, blocks and final layer norm.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.model_dim;
        let f = self.ff_dim;
        let per_block = 2 * d // ln_1
            + d * 3 * d + 3 * d // c_attn
            + d * d + d // attn c_proj
            + 2 * d // ln_2
            + d * f + f // c_fc
            + f * d + d; // mlp c_proj
        self.max_positions * d + self.n_layers * per_block + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    PlainSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowOffsetPolicy {
    FixedZero,
    RandomInRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HParams {
    /// Longest training window (tokens per sequence).
    pub l_m: usize,
    /// Effective batch size (samples per optimizer step).
    pub batch_size: usize,
    /// Samples per forward/backward pass; 0 derives it from `memory_budget_mb`.
    pub micro_batch: usize,
    pub memory_budget_mb: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub window_offset_policy: WindowOffsetPolicy,
    /// Samples per inference pass during evaluation.
    pub eval_batch: usize,
}

impl Default for HParams {
    fn default() -> Self {
        Self {
            l_m: 16,
            batch_size: 512,
            micro_batch: 0,
            memory_budget_mb: 1024,
            lr: 1e-3,
            max_epochs: 50,
            max_steps: 0,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            window_offset_policy: WindowOffsetPolicy::RandomInRange,
            eval_batch: 64,
        }
    }
}

impl HParams {
    pub fn ci() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self, scenario: &ScenarioConfig) -> Result<()> {
        if self.l_m == 0 {
            return Err(Error::config("hparams.l_m", "must be at least 1"));
        }
        if self.l_m + 1 > scenario.n_steps {
            return Err(Error::config(
                "hparams.l_m",
                format!(
                    "l_m + 1 = {} exceeds scenario.n_steps = {}",
                    self.l_m + 1,
                    scenario.n_steps
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hparams.batch_size", "must be at least 1"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("hparams.eval_batch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("hparams.lr", "must be finite and >= 0"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("hparams.max_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Dimensions of the CSI embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub max_positions: usize,
}

impl EmbeddingConfig {
    pub fn new(shape: StepShape, backbone: &BackboneConfig) -> Self {
        Self {
            feature_dim: shape.feature_dim(),
            model_dim: backbone.model_dim,
            max_positions: backbone.max_positions,
        }
    }

    pub fn validate(&self, l_m: usize) -> Result<()> {
        if self.feature_dim == 0 || self.model_dim == 0 {
            return Err(Error::config(
                "embedding",
                "feature_dim and model_dim must be > 0",
            ));
        }
        if self.max_positions < l_m {
            return Err(Error::config(
                "backbone.max_positions",
                format!("{} is smaller than l_m = {l_m}", self.max_positions),
            ));
        }
        Ok(())
    }

    /// Whether the embedding reduces dimensionality. Non-compressive
    /// geometries are legal but unusual.
    pub fn is_compressive(&self) -> bool {
        self.feature_dim > self.model_dim
    }
}

/// Which predictor a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    CsiLlm,
    Fixed4,
    Fixed8,
    Fixed16,
    Parallel4,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::CsiLlm,
        ModelVariant::Fixed4,
        ModelVariant::Fixed8,
        ModelVariant::Fixed16,
        ModelVariant::Parallel4,
    ];

    /// Native context length of a fixed-step head; `None` for Csi-LLM.
    pub fn fixed_context(&self) -> Option<usize> {
        match self {
            ModelVariant::CsiLlm => None,
            ModelVariant::Fixed4 | ModelVariant::Parallel4 => Some(4),
            ModelVariant::Fixed8 => Some(8),
            ModelVariant::Fixed16 => Some(16),
        }
    }

    /// Steps emitted per call.
    pub fn output_steps(&self) -> usize {
        match self {
            ModelVariant::Parallel4 => 4,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::CsiLlm => "csi-llm",
            ModelVariant::Fixed4 => "fixed4",
            ModelVariant::Fixed8 => "fixed8",
            ModelVariant::Fixed16 => "fixed16",
            ModelVariant::Parallel4 => "parallel4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub lengths: Vec<usize>,
    /// First context step of the rollout (0-based).
    pub rollout_start: usize,
    pub rollout_context: usize,
    pub horizon: usize,
    /// Index of the one-step target; 0 selects `l_m`.
    pub anchor: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: vec![2, 4, 8, 16],
            rollout_start: 0,
            rollout_context: 4,
            horizon: 16,
            anchor: 0,
        }
    }
}

impl EvalConfig {
    pub fn resolved_anchor(&self, l_m: usize) -> usize {
        if self.anchor == 0 {
            l_m
        } else {
            self.anchor
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doppler_at_30_kmh() {
        let s = ScenarioConfig::default();
        // (30/3.6)·2e9/2.998e8
        assert!((s.doppler_hz(30.0) - 55.5926).abs() < 1e-3);
    }

    #[test]
    fn invalid_dimensions_name_the_field() {
        let s = ScenarioConfig {
            n_rx: 0,
            ..ScenarioConfig::default()
        };
        match s.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scenario.n_rx"),
            other => panic!("unexpected {other:?}"),
        }
        let s = ScenarioConfig::default().with_speed(SpeedSpec::Mixture(vec![30.0, -1.0]));
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let s = ScenarioConfig {
            n_steps: 1,
            ..ScenarioConfig::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn default_backbone_is_117m_without_vocab() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.model_dim, c.n_heads), (12, 768, 12));
        // 124.44M total minus the 50257×768 vocabulary table.
        let n = c.backbone_param_count() as f64;
        let reference = 124_439_808.0 - 50_257.0 * 768.0;
        assert!((n - reference).abs() / reference < 0.01, "{n}");
    }

    #[test]
    fn heads_must_divide_width() {
        let c = BackboneConfig {
            n_heads: 5,
            ..BackboneConfig::ci()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn l_m_needs_a_target() {
        let s = ScenarioConfig::ci();
        let hp = HParams {
            l_m: 20,
            ..HParams::default()
        };
        assert!(hp.validate(&s).is_err());
        HParams::default().validate(&s).unwrap();
    }
}
