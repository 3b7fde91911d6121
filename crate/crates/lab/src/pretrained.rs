//! Pretrained transformer weights in the published GPT-2 (117M) safetensors
//! layout.
//!
//! Tensor name → parameter mapping (an optional `transformer.` prefix is
//! stripped first). Linear weights are stored `[in, out]`, which is also the
//! in-memory layout, so no transposes are needed.
//!
//! | file tensor                  | shape          | parameter                     |
//! |------------------------------|----------------|-------------------------------|
//! | `wpe.weight`                 | `[P, d]`       | positional table              |
//! | `h.{i}.ln_1.weight` / `.bias`| `[d]`          | pre-attention LayerNorm       |
//! | `h.{i}.attn.c_attn.weight`   | `[d, 3d]`      | fused Q/K/V projection        |
//! | `h.{i}.attn.c_attn.bias`     | `[3d]`         |                               |
//! | `h.{i}.attn.c_proj.weight`   | `[d, d]`       | attention output projection   |
//! | `h.{i}.attn.c_proj.bias`     | `[d]`          |                               |
//! | `h.{i}.ln_2.weight` / `.bias`| `[d]`          | pre-MLP LayerNorm             |
//! | `h.{i}.mlp.c_fc.weight`      | `[d, 4d]`      | MLP expansion                 |
//! | `h.{i}.mlp.c_fc.bias`        | `[4d]`         |                               |
//! | `h.{i}.mlp.c_proj.weight`    | `[4d, d]`      | MLP contraction               |
//! | `h.{i}.mlp.c_proj.bias`      | `[d]`          |                               |
//! | `ln_f.weight` / `.bias`      | `[d]`          | final LayerNorm               |
//!
//! Ignored: `wte.weight` and `lm_head.weight` (text vocabulary), and the
//! `h.{i}.attn.bias` / `h.{i}.attn.masked_bias` causal-mask buffers.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use csi_llm_core::backbone::Backbone;
use csi_llm_core::config::BackboneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::tensors::{self, F32View};

const PREFIX: &str = "transformer.";

fn is_ignored(name: &str) -> bool {
    name == "wte.weight"
        || name == "lm_head.weight"
        || name.ends_with(".attn.bias") && !name.ends_with("c_attn.bias")
        || name.ends_with(".attn.masked_bias")
}

/// A directory is searched for `model.safetensors`.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.safetensors")
    } else {
        path.to_path_buf()
    }
}

/// Reads a backbone shaped by `cfg` from `path`. Missing tensors, extra
/// transformer layers and shape mismatches are errors naming the tensor.
pub fn load_pretrained(path: impl AsRef<Path>, cfg: &BackboneConfig) -> Result<Backbone<f32>> {
    let path = resolve(path.as_ref());
    let bytes = tensors::read_bytes(&path)?;
    let st = tensors::parse(&path, &bytes)?;
    let stored: HashMap<String, String> = st
        .names()
        .into_iter()
        .map(|n| (n.strip_prefix(PREFIX).unwrap_or(n).to_string(), n.clone()))
        .collect();

    let layers: BTreeSet<usize> = stored
        .keys()
        .filter_map(|n| n.strip_prefix("h.")?.split('.').next()?.parse().ok())
        .collect();
    if layers.len() != cfg.n_layers {
        return Err(LabError::format(
            &path,
            format!(
                "source has {} transformer layers, config expects {}",
                layers.len(),
                cfg.n_layers
            ),
        ));
    }

    // Values are overwritten below; the init only fixes shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = Backbone::<f32>::random(cfg, &mut rng)?;
    let mut used = BTreeSet::new();
    for (name, p) in backbone.named_params_mut() {
        let key = stored
            .get(&name)
            .ok_or_else(|| LabError::format(&path, format!("missing tensor `{name}`")))?;
        let shape = p.shape.clone();
        tensors::copy_into(&path, &st, &name, key, &shape, &mut p.value)?;
        used.insert(name);
    }
    for name in stored.keys() {
        if !used.contains(name) && !is_ignored(name) {
            log::warn!("{}: ignoring unexpected tensor `{name}`", path.display());
        }
    }
    Ok(backbone)
}

/// Writes `backbone` in the published layout plus a `[vocab, d]` token table,
/// which loaders discard.
pub fn write_pretrained(
    path: impl AsRef<Path>,
    backbone: &Backbone<f32>,
    vocab: usize,
    seed: u64,
) -> Result<()> {
    use rand_distr::{Distribution, Normal};
    let path = path.as_ref();
    let d = backbone.model_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let wte: Vec<f32> = (0..vocab * d).map(|_| normal.sample(&mut rng)).collect();
    let mut views: Vec<(String, F32View<'_>)> = backbone
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
    views.push((
        "wte.weight".into(),
        F32View {
            data: &wte,
            shape: vec![vocab, d],
        },
    ));
    let meta = HashMap::from([("format".to_string(), "pt".to_string())]);
    tensors::write(path, views, meta)
}

/// Seeded stand-in for a downloaded checkpoint, for offline runs and tests.
pub fn synthesize_pretrained(
    path: impl AsRef<Path>,
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::<f32>::random(cfg, &mut rng)?;
    write_pretrained(path, &backbone, 16, seed)
}
