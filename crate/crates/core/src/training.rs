//! Next-step objective, training windows and the optimization loop.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::channel::{ChannelDataset, ChannelSample, NormStats};
use crate::config::{
    BackboneConfig, HParams, InitMode, ModelVariant, ScenarioConfig, StepShape, WindowOffsetPolicy,
};
use crate::error::{Error, Result};
use crate::model::CsiModel;
use crate::optim::Optimizer;
use crate::real::Real;

/// `Σ_i mean((targets[i] − predictions[i])²)` over `positions` equally sized
/// step tensors.
pub fn next_step_loss<T: Real>(predictions: &[T], targets: &[T], positions: usize) -> Result<f64> {
    Ok(next_step_loss_with_grad(predictions, targets, positions)?.0)
}

/// [`next_step_loss`] together with its gradient w.r.t. `predictions`.
pub fn next_step_loss_with_grad<T: Real>(
    predictions: &[T],
    targets: &[T],
    positions: usize,
) -> Result<(f64, Vec<T>)> {
    if predictions.len() != targets.len() {
        return Err(Error::dim(
            "next_step_loss",
            targets.len(),
            predictions.len(),
        ));
    }
    if positions == 0 || predictions.is_empty() || !predictions.len().is_multiple_of(positions) {
        return Err(Error::dim(
            "next_step_loss positions",
            alloc::format!("a divisor of {}", predictions.len()),
            positions,
        ));
    }
    let step = predictions.len() / positions;
    let inv = 1.0 / step as f64;
    let g_scale = T::lit(2.0 * inv);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(predictions.len());
    for i in 0..positions {
        let mut sq = 0.0;
        for j in i * step..(i + 1) * step {
            let diff = predictions[j] - targets[j];
            sq += diff.as_f64() * diff.as_f64();
            grad.push(diff * g_scale);
        }
        loss += sq * inv;
    }
    Ok((loss, grad))
}

/// Plain MSE over all entries (baseline objective) with its gradient.
pub fn mse_loss_with_grad<T: Real>(predictions: &[T], targets: &[T]) -> Result<(f64, Vec<T>)> {
    next_step_loss_with_grad(predictions, targets, 1)
}

/// An input/target pair cut from one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingWindow<'a> {
    pub offset: usize,
    pub inputs: &'a [f32],
    pub targets: &'a [f32],
}

fn draw_offset<R: Rng + ?Sized>(
    max_offset: usize,
    policy: WindowOffsetPolicy,
    rng: &mut R,
) -> usize {
    match policy {
        WindowOffsetPolicy::FixedZero => 0,
        WindowOffsetPolicy::RandomInRange => rng.random_range(0..=max_offset),
    }
}

/// Csi-LLM window: inputs are steps `o..o+l_m`, targets `o+1..o+l_m+1`.
pub fn make_training_window<'a, R: Rng + ?Sized>(
    sample: &'a ChannelSample,
    shape: StepShape,
    l_m: usize,
    policy: WindowOffsetPolicy,
    rng: &mut R,
) -> Result<TrainingWindow<'a>> {
    let n = sample.n_steps(shape);
    if n < l_m + 1 {
        return Err(Error::config(
            "hparams.l_m",
            alloc::format!("sequence of {n} steps is too short for l_m = {l_m}"),
        ));
    }
    let offset = draw_offset(n - l_m - 1, policy, rng);
    Ok(TrainingWindow {
        offset,
        inputs: sample.steps(shape, offset, l_m),
        targets: sample.steps(shape, offset + 1, l_m),
    })
}

/// Fixed-step window: `context` steps in, the following `outputs` steps out.
pub fn make_baseline_window<'a, R: Rng + ?Sized>(
    sample: &'a ChannelSample,
    shape: StepShape,
    context: usize,
    outputs: usize,
    policy: WindowOffsetPolicy,
    rng: &mut R,
) -> Result<TrainingWindow<'a>> {
    let n = sample.n_steps(shape);
    if n < context + outputs {
        return Err(Error::config(
            "variant",
            alloc::format!("sequence of {n} steps is too short for {context} + {outputs}"),
        ));
    }
    let offset = draw_offset(n - context - outputs, policy, rng);
    Ok(TrainingWindow {
        offset,
        inputs: sample.steps(shape, offset, context),
        targets: sample.steps(shape, offset + context, outputs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Trained model plus everything needed to reproduce and evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: CsiModel<T>,
    pub hparams: HParams,
    pub scenario: ScenarioConfig,
    pub norm_stats: Option<NormStats>,
    pub step: u64,
    pub loss_curve: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl<T> Checkpoint<T> {
    pub fn variant(&self) -> ModelVariant {
        self.model.variant
    }
}

/// Training split plus an optional validation split, both normalized with the
/// same statistics.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub train: &'a ChannelDataset,
    pub val: Option<&'a ChannelDataset>,
}

/// Rough activation footprint of one sample's forward+backward, in bytes.
pub fn activation_bytes_per_sample<T: Real>(
    cfg: &BackboneConfig,
    len: usize,
    feature_dim: usize,
) -> usize {
    let (d, f, h) = (cfg.model_dim, cfg.ff_dim, cfg.n_heads);
    let per_block = 10 * len * d + 2 * len * f + h * len * len;
    let floats = cfg.n_layers * per_block + 4 * len * d + 2 * len * (cfg.proj_hidden + feature_dim);
    // Backward transients roughly match the cached forward state.
    2 * floats * core::mem::size_of::<T>()
}

/// Samples per forward pass: explicit `micro_batch`, or the largest count
/// whose activations fit the memory budget. Gradients accumulate over
/// micro-batches so the effective batch stays `batch_size`.
pub fn micro_batch_size<T: Real>(
    hp: &HParams,
    cfg: &BackboneConfig,
    len: usize,
    feature_dim: usize,
) -> usize {
    if hp.micro_batch > 0 {
        return hp.micro_batch.min(hp.batch_size);
    }
    let per = activation_bytes_per_sample::<T>(cfg, len, feature_dim).max(1);
    let budget = hp.memory_budget_mb.saturating_mul(1 << 20);
    (budget / per).clamp(1, hp.batch_size)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_WINDOW: u64 = 3;

/// Builds the initial model for `variant`, transferring pretrained
/// transformer weights when `cfg.init_mode` asks for them.
pub fn init_model<T: Real>(
    variant: ModelVariant,
    shape: StepShape,
    cfg: &BackboneConfig,
    seed: u64,
    pretrained: Option<&Backbone<T>>,
) -> Result<CsiModel<T>> {
    let mut rng = rng_stream(seed, STREAM_INIT);
    let mut model = CsiModel::new(variant, shape, cfg, &mut rng)?;
    match (cfg.init_mode, pretrained) {
        (InitMode::Random, _) => {}
        (InitMode::Pretrained, Some(src)) => model.load_pretrained_backbone(src)?,
        (InitMode::Pretrained, None) => {
            return Err(Error::config(
                "backbone.init_mode",
                "pretrained initialization needs a weight source",
            ))
        }
    }
    Ok(model)
}

/// One window per sample; returns `(inputs, targets, len)` batches.
fn collect_windows<R: Rng + ?Sized>(
    model: &CsiModel<impl Real>,
    samples: &[&ChannelSample],
    l_m: usize,
    policy: WindowOffsetPolicy,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>, usize)> {
    let shape = model.shape;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let len = match model.variant.fixed_context() {
        None => l_m,
        Some(l) => l,
    };
    for s in samples {
        let w = match model.variant.fixed_context() {
            None => make_training_window(s, shape, l_m, policy, rng)?,
            Some(l) => make_baseline_window(s, shape, l, model.output_steps(), policy, rng)?,
        };
        inputs.extend_from_slice(w.inputs);
        targets.extend_from_slice(w.targets);
    }
    Ok((inputs, targets, len))
}

/// Mean per-sample loss over `ds` with offset-0 windows. Gradients are
/// accumulated into scratch space and cleared.
pub fn evaluate_loss<T: Real>(
    model: &mut CsiModel<T>,
    ds: &ChannelDataset,
    hp: &HParams,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("loss evaluation set"));
    }
    let refs: Vec<&ChannelSample> = ds.samples.iter().collect();
    let chunk = hp.eval_batch.max(1);
    let mut total = 0.0;
    let mut rng = rng_stream(0, 0);
    for part in refs.chunks(chunk) {
        let (x, y, len) =
            collect_windows(model, part, hp.l_m, WindowOffsetPolicy::FixedZero, &mut rng)?;
        total += model.accumulate_gradients(&x, &y, part.len(), len, 0.0)?;
    }
    model.zero_grad();
    Ok(total / ds.len() as f64)
}

/// Trains `variant` on `data`. Csi-LLM uses the summed next-step objective over
/// an `l_m`-token window; fixed-step baselines regress their `k` target steps.
/// The returned checkpoint holds the parameters of the best validation epoch
/// (the last epoch when there is no validation split).
pub fn train<T: Real>(
    variant: ModelVariant,
    data: TrainingData<'_>,
    cfg: &BackboneConfig,
    hp: &HParams,
    pretrained: Option<&Backbone<T>>,
) -> Result<Checkpoint<T>> {
    let train = data.train;
    let scenario = &train.scenario;
    hp.validate(scenario)?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(val) = data.val {
        let norm_key = |ds: &ChannelDataset| ds.norm_stats.as_ref().map(|n| (n.mode, n.scale));
        if val.scenario.step_shape() != scenario.step_shape() || norm_key(val) != norm_key(train) {
            return Err(Error::config(
                "datasets",
                "train and validation splits must share geometry and normalization",
            ));
        }
    }
    if let Some(l) = variant.fixed_context() {
        if l + variant.output_steps() > scenario.n_steps {
            return Err(Error::config(
                "variant",
                alloc::format!(
                    "{} needs {} steps per sample",
                    variant.name(),
                    l + variant.output_steps()
                ),
            ));
        }
    }

    let mut model = init_model(variant, scenario.step_shape(), cfg, hp.seed, pretrained)?;
    let mut opt = Optimizer::<T>::new(hp.optimizer, hp.lr, cfg.trainable_scope);
    let mut shuffle_rng = rng_stream(hp.seed, STREAM_SHUFFLE);
    let mut window_rng = rng_stream(hp.seed, STREAM_WINDOW);
    let window_len = variant.fixed_context().unwrap_or(hp.l_m);
    let micro = micro_batch_size::<T>(hp, cfg, window_len, scenario.step_shape().feature_dim());

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<T>>)> = None;
    let mut last_finite = (0u64, f64::NAN);
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..hp.max_epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in order.chunks(hp.batch_size) {
            if hp.max_steps > 0 && opt.steps_taken() >= hp.max_steps {
                break;
            }
            let samples: Vec<&ChannelSample> =
                batch_idx.iter().map(|&i| &train.samples[i]).collect();
            model.zero_grad();
            let scale = 1.0 / samples.len() as f64;
            let mut batch_loss = 0.0;
            for part in samples.chunks(micro) {
                let (x, y, len) = collect_windows(
                    &model,
                    part,
                    hp.l_m,
                    hp.window_offset_policy,
                    &mut window_rng,
                )?;
                batch_loss += model.accumulate_gradients(&x, &y, part.len(), len, scale)?;
            }
            let mean = batch_loss * scale;
            if !mean.is_finite() {
                return Err(Error::Divergence {
                    step: opt.steps_taken() + 1,
                    last_finite_step: last_finite.0,
                    last_finite_loss: last_finite.1,
                });
            }
            opt.step(&mut model);
            last_finite = (opt.steps_taken(), mean);
            epoch_loss += batch_loss;
            seen += samples.len();
        }
        if seen == 0 {
            break 'epochs;
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = match data.val {
            Some(v) if !v.is_empty() => Some(evaluate_loss(&mut model, v, hp)?),
            _ => None,
        };
        log::info!(
            "{} epoch {epoch}: step {} train {train_loss:.5} val {:?}",
            variant.name(),
            opt.steps_taken(),
            val_loss
        );
        curve.push(EpochRecord {
            epoch,
            step: opt.steps_taken(),
            train_loss,
            val_loss,
        });
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: opt.steps_taken(),
                    last_finite_step: last_finite.0,
                    last_finite_loss: last_finite.1,
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                let snapshot = model
                    .named_params()
                    .iter()
                    .map(|(_, p)| p.value.clone())
                    .collect();
                best = Some((v, epoch, snapshot));
            }
        }
        if hp.max_steps > 0 && opt.steps_taken() >= hp.max_steps {
            break;
        }
    }

    let (best_val_loss, best_epoch) = match best {
        Some((v, epoch, snapshot)) => {
            for ((_, p), s) in model.named_params_mut().into_iter().zip(snapshot) {
                p.value = s;
            }
            (Some(v), Some(epoch))
        }
        None => (None, None),
    };
    model.zero_grad();
    Ok(Checkpoint {
        model,
        hparams: hp.clone(),
        scenario: scenario.clone(),
        norm_stats: train.norm_stats.clone(),
        step: opt.steps_taken(),
        loss_curve: curve,
        best_epoch,
        best_val_loss,
    })
}

/// Next-step (autoregressive) training of the Csi-LLM predictor.
pub fn train_csi_llm<T: Real>(
    data: TrainingData<'_>,
    cfg: &BackboneConfig,
    hp: &HParams,
    pretrained: Option<&Backbone<T>>,
) -> Result<Checkpoint<T>> {
    train(ModelVariant::CsiLlm, data, cfg, hp, pretrained)
}

/// Supervised training of a fixed-step baseline.
pub fn train_baseline<T: Real>(
    data: TrainingData<'_>,
    variant: ModelVariant,
    cfg: &BackboneConfig,
    hp: &HParams,
    pretrained: Option<&Backbone<T>>,
) -> Result<Checkpoint<T>> {
    if variant == ModelVariant::CsiLlm {
        return Err(Error::config(
            "variant",
            String::from("csi-llm is not a baseline"),
        ));
    }
    train(variant, data, cfg, hp, pretrained)
}
