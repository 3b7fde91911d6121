//! NMSE metric, one-step grids, autoregressive rollout and the init ablation.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::channel::ChannelDataset;
use crate::config::{BackboneConfig, HParams, InitMode, ModelVariant, StepShape};
use crate::error::{Error, Result};
use crate::model::CsiModel;
use crate::real::Real;
use crate::training::{train_csi_llm, TrainingData};

/// Linear NMSE floor used before the dB conversion.
pub const NMSE_FLOOR: f64 = 1e-12;

pub fn to_db(linear: f64) -> f64 {
    10.0 * libm::log10(linear.max(NMSE_FLOOR))
}

/// Ratio definition used by [`nmse_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmseKind {
    /// `‖H − Ĥ‖² / ‖H‖²`.
    #[default]
    Squared,
    /// `‖H − Ĥ‖ / ‖H‖`, the unsquared ratio.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        Self {
            linear,
            db: to_db(linear),
        }
    }
}

/// Squared-norm NMSE over all entries of one step tensor.
pub fn nmse(actual: &[f32], predicted: &[f32]) -> Result<Nmse> {
    nmse_with(actual, predicted, NmseKind::Squared)
}

pub fn nmse_with(actual: &[f32], predicted: &[f32], kind: NmseKind) -> Result<Nmse> {
    if actual.len() != predicted.len() {
        return Err(Error::dim("nmse", actual.len(), predicted.len()));
    }
    let mut err = 0.0f64;
    let mut power = 0.0f64;
    for (&a, &p) in actual.iter().zip(predicted) {
        let (a, p) = (a as f64, p as f64);
        err += (a - p) * (a - p);
        power += a * a;
    }
    if power == 0.0 {
        return Err(Error::ZeroReference);
    }
    let ratio = err / power;
    let linear = match kind {
        NmseKind::Squared => ratio,
        NmseKind::Literal => libm::sqrt(ratio),
    };
    Ok(Nmse::from_linear(linear))
}

/// Mean linear NMSE over `step_len`-sized tensors, converted to dB afterwards.
pub fn batch_nmse(
    actual: &[f32],
    predicted: &[f32],
    step_len: usize,
    kind: NmseKind,
) -> Result<Nmse> {
    if actual.len() != predicted.len() {
        return Err(Error::dim("batch nmse", actual.len(), predicted.len()));
    }
    if step_len == 0 || actual.is_empty() || !actual.len().is_multiple_of(step_len) {
        return Err(Error::Empty("batch nmse input"));
    }
    let n = actual.len() / step_len;
    let mut sum = 0.0;
    for (a, p) in actual.chunks(step_len).zip(predicted.chunks(step_len)) {
        sum += nmse_with(a, p, kind)?.linear;
    }
    Ok(Nmse::from_linear(sum / n as f64))
}

/// Repeats the final context step.
pub fn no_prediction(context: &[f32], step_len: usize) -> Result<Vec<f32>> {
    if step_len == 0 || context.len() < step_len {
        return Err(Error::Empty("no-prediction context"));
    }
    Ok(context[context.len() - step_len..].to_vec())
}

/// Anything that maps contexts to future steps.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a, T> {
    Model(&'a CsiModel<T>),
    NoPrediction,
}

impl<T: Real> Predictor<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(m) => m.variant.name(),
            Predictor::NoPrediction => "no-prediction",
        }
    }

    pub fn variant(&self) -> Option<ModelVariant> {
        match self {
            Predictor::Model(m) => Some(m.variant),
            Predictor::NoPrediction => None,
        }
    }

    pub fn supports_context(&self, len: usize) -> bool {
        match self {
            Predictor::Model(m) => m.supports_context(len),
            Predictor::NoPrediction => len >= 1,
        }
    }

    pub fn output_steps(&self) -> usize {
        match self {
            Predictor::Model(m) => m.output_steps(),
            Predictor::NoPrediction => 1,
        }
    }

    /// Largest context the predictor accepts, if bounded.
    fn max_context(&self) -> Option<usize> {
        match self {
            Predictor::Model(m) => Some(
                m.variant
                    .fixed_context()
                    .unwrap_or(m.config().max_positions),
            ),
            Predictor::NoPrediction => None,
        }
    }

    /// `[batch, output_steps, F]` from `[batch, len, F]` contexts.
    pub fn predict(
        &self,
        contexts: &[f32],
        batch: usize,
        len: usize,
        step_len: usize,
    ) -> Result<Vec<f32>> {
        match self {
            Predictor::Model(m) => m.predict(contexts, batch, len),
            Predictor::NoPrediction => {
                if contexts.len() != batch * len * step_len {
                    return Err(Error::dim(
                        "no-prediction input",
                        batch * len * step_len,
                        contexts.len(),
                    ));
                }
                let mut out = Vec::with_capacity(batch * step_len);
                for ctx in contexts.chunks(len * step_len) {
                    out.extend(no_prediction(ctx, step_len)?);
                }
                Ok(out)
            }
        }
    }

    /// [`Predictor::predict`] in chunks of `chunk` samples. One-step and
    /// rollout evaluation share this path so their outputs agree bit for bit.
    pub fn predict_chunked(
        &self,
        contexts: &[f32],
        batch: usize,
        len: usize,
        step_len: usize,
        chunk: usize,
    ) -> Result<Vec<f32>> {
        let per = len * step_len;
        let mut out = Vec::with_capacity(batch * self.output_steps() * step_len);
        for part in contexts.chunks(chunk.max(1) * per) {
            out.extend(self.predict(part, part.len() / per, len, step_len)?);
        }
        Ok(out)
    }
}

/// One prediction event over an evaluation set: every sample predicts
/// `target_step` from `context_length` preceding steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scenario: String,
    pub variant: String,
    pub context_length: usize,
    /// 0-based index of the predicted step within each trajectory.
    pub target_step: usize,
    /// `[n_samples, F]`.
    pub predicted: Vec<f32>,
    /// Ground truth, absent when the trajectory ends before `target_step`.
    pub actual: Option<Vec<f32>>,
    pub nmse: Option<Nmse>,
}

impl PredictionRecord {
    pub fn nmse_db(&self) -> Option<f64> {
        self.nmse.map(|n| n.db)
    }
}

/// One column of a Table-III-style grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepGrid {
    pub scenario: String,
    pub variant: String,
    pub anchor: usize,
    /// `(length, record)`; absent where the predictor cannot serve the length.
    pub cells: Vec<(usize, Option<PredictionRecord>)>,
}

impl OneStepGrid {
    pub fn cell(&self, len: usize) -> Option<&PredictionRecord> {
        self.cells
            .iter()
            .find(|(l, _)| *l == len)
            .and_then(|(_, r)| r.as_ref())
    }

    pub fn db(&self, len: usize) -> Option<f64> {
        self.cell(len).and_then(PredictionRecord::nmse_db)
    }
}

/// Evaluation settings shared by the one-step and rollout protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub scenario: String,
    pub chunk: usize,
    pub kind: NmseKind,
}

impl EvalSettings {
    pub fn new(scenario: impl Into<String>, chunk: usize) -> Self {
        Self {
            scenario: scenario.into(),
            chunk,
            kind: NmseKind::Squared,
        }
    }
}

fn gather_steps(ds: &ChannelDataset, start: usize, len: usize) -> Vec<f32> {
    let shape = ds.shape();
    let mut out = Vec::with_capacity(ds.len() * len * shape.feature_dim());
    for s in &ds.samples {
        out.extend_from_slice(s.steps(shape, start, len));
    }
    out
}

fn first_step_of(pred: &[f32], batch: usize, k: usize, f: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(batch * f);
    for b in 0..batch {
        out.extend_from_slice(&pred[b * k * f..b * k * f + f]);
    }
    out
}

fn check_eval_set(ds: &ChannelDataset) -> Result<(StepShape, usize)> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    ds.validate()?;
    Ok((ds.shape(), ds.scenario.n_steps))
}

/// One-step NMSE for each context length: context `[anchor−l, anchor)`,
/// target `anchor` (0-based), so all lengths predict the same step. Lengths
/// the predictor cannot serve are recorded as absent cells.
pub fn one_step_eval<T: Real>(
    predictor: &Predictor<'_, T>,
    test: &ChannelDataset,
    lengths: &[usize],
    anchor: usize,
    settings: &EvalSettings,
) -> Result<OneStepGrid> {
    let (shape, n_steps) = check_eval_set(test)?;
    if anchor >= n_steps {
        return Err(Error::config(
            "eval.anchor",
            alloc::format!("target step {anchor} is outside {n_steps}-step trajectories"),
        ));
    }
    let f = shape.feature_dim();
    let mut cells = Vec::with_capacity(lengths.len());
    for &l in lengths {
        if l == 0 || l > anchor {
            return Err(Error::config(
                "eval.lengths",
                alloc::format!("length {l} needs 1..={anchor} context steps before the anchor"),
            ));
        }
        if !predictor.supports_context(l) {
            cells.push((l, None));
            continue;
        }
        let contexts = gather_steps(test, anchor - l, l);
        let pred = predictor.predict_chunked(&contexts, test.len(), l, f, settings.chunk)?;
        let predicted = first_step_of(&pred, test.len(), predictor.output_steps(), f);
        let actual = gather_steps(test, anchor, 1);
        let nmse = batch_nmse(&actual, &predicted, f, settings.kind)?;
        cells.push((
            l,
            Some(PredictionRecord {
                scenario: settings.scenario.clone(),
                variant: String::from(predictor.name()),
                context_length: l,
                target_step: anchor,
                predicted,
                actual: Some(actual),
                nmse: Some(nmse),
            }),
        ));
    }
    Ok(OneStepGrid {
        scenario: settings.scenario.clone(),
        variant: String::from(predictor.name()),
        anchor,
        cells,
    })
}

/// How the rollout window evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowPolicy {
    /// Every prediction stays in the window (variable-length models).
    RetainAll,
    /// The window keeps only the newest `l` steps (fixed-step models).
    SlidingFixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub scenario: String,
    pub variant: String,
    pub context_start: usize,
    pub context_length: usize,
    pub horizon: usize,
    pub window_policy: WindowPolicy,
    /// The window grew beyond the training length `l_m`.
    pub beyond_trained_length: bool,
    /// The window reached the positional limit and had to drop old steps.
    pub truncated_to_positions: bool,
    /// One record per future step; `context_length` is the window size used.
    pub records: Vec<PredictionRecord>,
}

impl RolloutResult {
    /// Mean linear NMSE over the steps that have ground truth, in dB.
    pub fn mean_nmse(&self) -> Option<Nmse> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.nmse.map(|n| n.linear))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(Nmse::from_linear(
                vals.iter().sum::<f64>() / vals.len() as f64,
            ))
        }
    }
}

/// Continuous autoregressive prediction from true steps
/// `[context_start, context_start + context_len)` for `horizon` future steps.
/// Predictions are fed back as context; ground truth beyond the context is
/// only read for scoring.
pub fn rollout<T: Real>(
    predictor: &Predictor<'_, T>,
    test: &ChannelDataset,
    context_start: usize,
    context_len: usize,
    horizon: usize,
    trained_length: usize,
    settings: &EvalSettings,
) -> Result<RolloutResult> {
    let (shape, n_steps) = check_eval_set(test)?;
    let f = shape.feature_dim();
    if context_len == 0 || context_start + context_len > n_steps {
        return Err(Error::config(
            "eval.rollout_context",
            alloc::format!(
                "context {context_start}+{context_len} does not fit {n_steps}-step trajectories"
            ),
        ));
    }
    if horizon == 0 {
        return Err(Error::config("eval.horizon", "must be at least 1"));
    }
    let k = predictor.output_steps();
    if !horizon.is_multiple_of(k) {
        return Err(Error::config(
            "eval.horizon",
            alloc::format!(
                "{} emits {k} steps per call; horizon {horizon} is not a multiple",
                predictor.name()
            ),
        ));
    }
    let sliding = matches!(predictor.variant(), Some(v) if v.fixed_context().is_some());
    if sliding && !predictor.supports_context(context_len) {
        return Err(Error::UnsupportedLength {
            model: String::from(predictor.name()),
            len: context_len,
        });
    }
    let policy = if sliding {
        WindowPolicy::SlidingFixed
    } else {
        WindowPolicy::RetainAll
    };
    let limit = predictor.max_context();

    let n = test.len();
    // Per-sample windows, [n][steps·F].
    let context = gather_steps(test, context_start, context_len);
    let mut windows: Vec<Vec<f32>> = context
        .chunks(context_len * f)
        .map(|c| c.to_vec())
        .collect();
    let mut records = Vec::with_capacity(horizon);
    let mut beyond = false;
    let mut truncated = false;
    let first_target = context_start + context_len;

    while records.len() < horizon {
        let mut len = windows[0].len() / f;
        if let Some(max) = limit {
            if len > max {
                truncated |= policy == WindowPolicy::RetainAll;
                len = max;
            }
        }
        beyond |= policy == WindowPolicy::RetainAll && len > trained_length;
        let mut flat = Vec::with_capacity(n * len * f);
        for w in &windows {
            flat.extend_from_slice(&w[w.len() - len * f..]);
        }
        let pred = predictor.predict_chunked(&flat, n, len, f, settings.chunk)?;
        for j in 0..k {
            let target = first_target + records.len();
            let mut predicted = Vec::with_capacity(n * f);
            for b in 0..n {
                let row = &pred[(b * k + j) * f..(b * k + j + 1) * f];
                predicted.extend_from_slice(row);
                windows[b].extend_from_slice(row);
            }
            let (actual, nmse) = if target < n_steps {
                let actual = gather_steps(test, target, 1);
                let nmse = batch_nmse(&actual, &predicted, f, settings.kind)?;
                (Some(actual), Some(nmse))
            } else {
                (None, None)
            };
            records.push(PredictionRecord {
                scenario: settings.scenario.clone(),
                variant: String::from(predictor.name()),
                context_length: len,
                target_step: target,
                predicted,
                actual,
                nmse,
            });
        }
        if policy == WindowPolicy::SlidingFixed {
            for w in &mut windows {
                let keep = context_len * f;
                let cut = w.len() - keep;
                w.drain(..cut);
            }
        }
    }
    Ok(RolloutResult {
        scenario: settings.scenario.clone(),
        variant: String::from(predictor.name()),
        context_start,
        context_length: context_len,
        horizon,
        window_policy: policy,
        beyond_trained_length: beyond,
        truncated_to_positions: truncated,
        records,
    })
}

/// Normalized splits of one scenario.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioSplits<'a> {
    pub tag: &'a str,
    pub train: &'a ChannelDataset,
    pub val: Option<&'a ChannelDataset>,
    pub test: &'a ChannelDataset,
}

/// One side of the ablation: a Csi-LLM trained per scenario under one init mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub init_mode: InitMode,
    pub grids: Vec<OneStepGrid>,
    pub final_val_loss: Vec<Option<f64>>,
}

/// Side-by-side one-step NMSE of two init modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub lengths: Vec<usize>,
    pub scenarios: Vec<String>,
    pub arms: [AblationArm; 2],
}

/// `(scenario, length, left dB, right dB)` rows in scenario-major order.
pub type AblationRow = (String, usize, Option<f64>, Option<f64>);

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut out = Vec::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            for &l in &self.lengths {
                out.push((
                    s.clone(),
                    l,
                    self.arms[0].grids[i].db(l),
                    self.arms[1].grids[i].db(l),
                ));
            }
        }
        out
    }
}

/// Trains a Csi-LLM per scenario under each of `modes` with otherwise
/// identical settings and seeds, then evaluates both one-step grids.
#[allow(clippy::too_many_arguments)]
pub fn ablation_compare<T: Real>(
    scenarios: &[ScenarioSplits<'_>],
    cfg: &BackboneConfig,
    hp: &HParams,
    pretrained: Option<&Backbone<T>>,
    lengths: &[usize],
    anchor: usize,
    chunk: usize,
    modes: [InitMode; 2],
) -> Result<AblationReport> {
    if scenarios.is_empty() {
        return Err(Error::Empty("ablation scenarios"));
    }
    let mut arms = Vec::with_capacity(2);
    for (arm, mode) in modes.into_iter().enumerate() {
        let label = if modes[0] == modes[1] {
            alloc::format!("csi-llm/{}-{}", init_name(mode), ["a", "b"][arm])
        } else {
            alloc::format!("csi-llm/{}", init_name(mode))
        };
        let arm_cfg = BackboneConfig {
            init_mode: mode,
            ..cfg.clone()
        };
        let mut grids = Vec::with_capacity(scenarios.len());
        let mut val = Vec::with_capacity(scenarios.len());
        for sc in scenarios {
            let data = TrainingData {
                train: sc.train,
                val: sc.val,
            };
            let ck = train_csi_llm(data, &arm_cfg, hp, pretrained)?;
            log::info!("ablation {:?} {}: {} steps", mode, sc.tag, ck.step);
            let settings = EvalSettings::new(sc.tag, chunk);
            let mut grid = one_step_eval(
                &Predictor::Model(&ck.model),
                sc.test,
                lengths,
                anchor,
                &settings,
            )?;
            grid.variant = label.clone();
            for (_, rec) in &mut grid.cells {
                if let Some(rec) = rec {
                    rec.variant = label.clone();
                }
            }
            grids.push(grid);
            val.push(ck.loss_curve.last().and_then(|r| r.val_loss));
        }
        arms.push(AblationArm {
            init_mode: mode,
            grids,
            final_val_loss: val,
        });
    }
    let right = arms.pop().expect("two arms");
    let left = arms.pop().expect("two arms");
    Ok(AblationReport {
        lengths: lengths.to_vec(),
        scenarios: scenarios.iter().map(|s| String::from(s.tag)).collect(),
        arms: [left, right],
    })
}

pub fn init_name(mode: InitMode) -> &'static str {
    match mode {
        InitMode::Pretrained => "pretrained",
        InitMode::Random => "random",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_synthetic_dataset, normalize, NormMode};
    use crate::config::ScenarioConfig;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nmse_reference_values() {
        let h = [1.0f32, -2.0, 0.5, 3.0];
        let same = nmse(&h, &h).unwrap();
        assert_eq!(same.linear, 0.0);
        assert_eq!(same.db, -120.0);
        let zero = nmse(&h, &[0.0; 4]).unwrap();
        assert_eq!((zero.linear, zero.db), (1.0, 0.0));
        let double: Vec<f32> = h.iter().map(|v| 2.0 * v).collect();
        assert_eq!(nmse(&h, &double).unwrap().linear, 1.0);
        assert!(matches!(nmse(&[0.0; 4], &h), Err(Error::ZeroReference)));
        assert!(matches!(nmse(&h, &h[..3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn literal_is_square_root() {
        let a = [3.0f32, 4.0];
        let p = [3.0f32, 0.0];
        assert!((nmse(&a, &p).unwrap().linear - 16.0 / 25.0).abs() < 1e-15);
        assert!((nmse_with(&a, &p, NmseKind::Literal).unwrap().linear - 0.8).abs() < 1e-15);
    }

    #[test]
    fn batch_averages_linear_before_db() {
        let a = [1.0f32, 1.0];
        let p = [1.0f32, 0.0];
        let b = batch_nmse(&a, &p, 1, NmseKind::Squared).unwrap();
        assert_eq!(b.linear, 0.5);
        assert!((b.db - to_db(0.5)).abs() < 1e-12);
    }

    #[test]
    fn no_prediction_returns_last_step() {
        let ctx = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(no_prediction(&ctx, 2).unwrap(), vec![5.0, 6.0]);
        assert_eq!(no_prediction(&ctx[..2], 2).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(no_prediction(&[], 2), Err(Error::Empty(_))));
    }

    fn test_set(n: usize) -> ChannelDataset {
        let sc = ScenarioConfig {
            n_tx: 2,
            n_rx: 1,
            n_prb: 2,
            ..ScenarioConfig::ci()
        };
        normalize(
            &generate_synthetic_dataset(&sc, n).unwrap(),
            NormMode::GlobalStd,
        )
        .unwrap()
        .0
    }

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            n_layers: 1,
            model_dim: 16,
            n_heads: 2,
            ff_dim: 32,
            max_positions: 32,
            proj_hidden: 16,
            ..BackboneConfig::ci()
        }
    }

    fn model(variant: ModelVariant) -> CsiModel<f32> {
        let ds = test_set(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        CsiModel::new(variant, ds.shape(), &tiny_cfg(), &mut rng).unwrap()
    }

    #[test]
    fn fixed_models_leave_foreign_cells_absent() {
        let ds = test_set(5);
        let m = model(ModelVariant::Fixed4);
        let s = EvalSettings::new("30kmh", 2);
        let grid = one_step_eval(&Predictor::Model(&m), &ds, &[2, 4, 8], 16, &s).unwrap();
        assert!(grid.cell(2).is_none() && grid.cell(8).is_none());
        assert!(grid.cell(4).is_some());

        let m = model(ModelVariant::CsiLlm);
        let grid = one_step_eval(&Predictor::Model(&m), &ds, &[2, 4, 8, 16], 16, &s).unwrap();
        assert!(grid.cells.iter().all(|(_, r)| r.is_some()));
        assert!(grid
            .cells
            .iter()
            .all(|(_, r)| r.as_ref().unwrap().target_step == 16));
    }

    #[test]
    fn constant_channel_is_free_for_no_prediction() {
        let mut ds = test_set(3);
        let shape = ds.shape();
        for s in &mut ds.samples {
            let first = s.step(shape, 0).to_vec();
            for chunk in s.csi.chunks_mut(shape.feature_dim()) {
                chunk.copy_from_slice(&first);
            }
        }
        let grid = one_step_eval(
            &Predictor::<f32>::NoPrediction,
            &ds,
            &[1, 4],
            16,
            &EvalSettings::new("c", 8),
        )
        .unwrap();
        assert_eq!(grid.cell(1).unwrap().nmse.unwrap().linear, 0.0);
    }

    #[test]
    fn rollout_shapes_and_truth_coverage() {
        let ds = test_set(4);
        let s = EvalSettings::new("30kmh", 3);
        let m = model(ModelVariant::CsiLlm);
        let r = rollout(&Predictor::Model(&m), &ds, 0, 4, 16, 16, &s).unwrap();
        assert_eq!(r.records.len(), 16);
        assert!(r.records.iter().all(|rec| rec.nmse.is_some()));
        assert_eq!(r.records.last().unwrap().context_length, 19);
        assert_eq!(r.records[0].target_step, 4);
        assert!(r.beyond_trained_length);

        let r = rollout(&Predictor::Model(&m), &ds, 0, 4, 20, 16, &s).unwrap();
        assert_eq!(r.records.iter().filter(|rec| rec.nmse.is_none()).count(), 4);

        let p4 = model(ModelVariant::Parallel4);
        let r = rollout(&Predictor::Model(&p4), &ds, 0, 4, 16, 16, &s).unwrap();
        assert_eq!(r.records.len(), 16);
        assert!(r.records.iter().all(|rec| rec.context_length == 4));
        assert!(matches!(
            rollout(&Predictor::Model(&p4), &ds, 0, 4, 6, 16, &s),
            Err(Error::Config { .. })
        ));
        let f4 = model(ModelVariant::Fixed4);
        assert!(matches!(
            rollout(&Predictor::Model(&f4), &ds, 0, 3, 4, 16, &s),
            Err(Error::UnsupportedLength { .. })
        ));
    }

    #[test]
    fn horizon_one_matches_one_step() {
        let ds = test_set(5);
        let s = EvalSettings::new("30kmh", 2);
        for variant in [
            ModelVariant::CsiLlm,
            ModelVariant::Fixed4,
            ModelVariant::Parallel4,
        ] {
            let m = model(variant);
            let p = Predictor::Model(&m);
            let grid = one_step_eval(&p, &ds, &[4], 16, &s).unwrap();
            let r = rollout(
                &p,
                &ds,
                12,
                4,
                if variant == ModelVariant::Parallel4 {
                    4
                } else {
                    1
                },
                16,
                &s,
            )
            .unwrap();
            assert_eq!(grid.cell(4).unwrap(), &r.records[0], "{variant:?}");
        }
    }

    #[test]
    fn no_prediction_rollout_holds_last_context_step() {
        let ds = test_set(2);
        let r = rollout(
            &Predictor::<f32>::NoPrediction,
            &ds,
            0,
            4,
            3,
            16,
            &EvalSettings::new("x", 4),
        )
        .unwrap();
        let shape = ds.shape();
        let last: Vec<f32> = ds
            .samples
            .iter()
            .flat_map(|s| s.step(shape, 3).to_vec())
            .collect();
        for rec in &r.records {
            assert_eq!(rec.predicted, last);
        }
    }

    #[test]
    fn window_slides_at_position_limit() {
        let ds = test_set(2);
        let cfg = BackboneConfig {
            max_positions: 6,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = CsiModel::<f32>::new(ModelVariant::CsiLlm, ds.shape(), &cfg, &mut rng).unwrap();
        let r = rollout(
            &Predictor::Model(&m),
            &ds,
            0,
            4,
            8,
            4,
            &EvalSettings::new("x", 4),
        )
        .unwrap();
        assert!(r.truncated_to_positions);
        assert_eq!(r.records.last().unwrap().context_length, 6);
    }
}
