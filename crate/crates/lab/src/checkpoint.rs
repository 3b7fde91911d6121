//! Checkpoint files: model tensors in safetensors plus a JSON description
//! under the `config` metadata key.

use std::collections::HashMap;
use std::path::Path;

use csi_llm_core::channel::NormStats;
use csi_llm_core::config::{BackboneConfig, HParams, ModelVariant, ScenarioConfig, StepShape};
use csi_llm_core::model::CsiModel;
use csi_llm_core::training::{Checkpoint, EpochRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensors::{self, F32View};

pub const FORMAT: &str = "csi-llm-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Description {
    format: String,
    version: u32,
    variant: ModelVariant,
    shape: StepShape,
    backbone: BackboneConfig,
    hparams: HParams,
    scenario: ScenarioConfig,
    norm_stats: Option<NormStats>,
    step: u64,
    loss_curve: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint<f32>) -> Result<()> {
    let path = path.as_ref();
    let desc = Description {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        variant: ck.model.variant,
        shape: ck.model.shape,
        backbone: ck.model.config().clone(),
        hparams: ck.hparams.clone(),
        scenario: ck.scenario.clone(),
        norm_stats: ck.norm_stats.clone(),
        step: ck.step,
        loss_curve: ck.loss_curve.clone(),
        best_epoch: ck.best_epoch,
        best_val_loss: ck.best_val_loss,
    };
    let json = serde_json::to_string_pretty(&desc).expect("checkpoint description serializes");
    let views = ck
        .model
        .named_params()
        .into_iter()
        .map(|(n, p)| {
            (
                n,
                F32View {
                    data: &p.value,
                    shape: p.shape.clone(),
                },
            )
        })
        .collect();
    tensors::write(path, views, HashMap::from([("config".to_string(), json)]))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint<f32>> {
    let path = path.as_ref();
    let bytes = tensors::read_bytes(path)?;
    let meta = tensors::metadata(path, &bytes)?;
    let json = meta
        .get("config")
        .ok_or_else(|| LabError::format(path, "not a checkpoint: no `config` metadata"))?;
    let desc: Description = serde_json::from_str(json)
        .map_err(|e| LabError::format(path, format!("checkpoint metadata: {e}")))?;
    if desc.format != FORMAT || desc.version != FORMAT_VERSION {
        return Err(LabError::format(
            path,
            format!(
                "unsupported checkpoint format {} v{}",
                desc.format, desc.version
            ),
        ));
    }
    let st = tensors::parse(path, &bytes)?;
    // Values are overwritten below; the init only fixes shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CsiModel::<f32>::new(desc.variant, desc.shape, &desc.backbone, &mut rng)?;
    for (name, p) in model.named_params_mut() {
        let shape = p.shape.clone();
        tensors::copy_into(path, &st, &name, &name, &shape, &mut p.value)?;
    }
    Ok(Checkpoint {
        model,
        hparams: desc.hparams,
        scenario: desc.scenario,
        norm_stats: desc.norm_stats,
        step: desc.step,
        loss_curve: desc.loss_curve,
        best_epoch: desc.best_epoch,
        best_val_loss: desc.best_val_loss,
    })
}
