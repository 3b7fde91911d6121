//! One CSI time step ↔ one token.
//!
//! A step tensor `[2, n_tx, n_rx, n_prb]` is flattened row-major, so plane
//! `p`, tx `t`, rx `r`, PRB `b` lands at `((p·n_tx + t)·n_rx + r)·n_prb + b`,
//! then compressed by a shared affine map to the model width. Positional rows
//! come from the backbone's learned table.

use alloc::vec::Vec;

use crate::backbone::position_rows;
use crate::config::{EmbeddingConfig, StepShape};
use crate::error::{Error, Result};
use crate::nn::{Linear, Param};
use crate::real::Real;

/// A single CSI step with explicit dimensions `[2, n_tx, n_rx, n_prb]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTensor {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl StepTensor {
    pub fn zeros(shape: StepShape) -> Self {
        Self {
            dims: shape.dims(),
            data: alloc::vec![0.0; shape.feature_dim()],
        }
    }

    pub fn get(&self, p: usize, t: usize, r: usize, b: usize) -> f32 {
        self.data[self.index(p, t, r, b)]
    }

    pub fn set(&mut self, p: usize, t: usize, r: usize, b: usize, v: f32) {
        let i = self.index(p, t, r, b);
        self.data[i] = v;
    }

    fn index(&self, p: usize, t: usize, r: usize, b: usize) -> usize {
        let [_, n_tx, n_rx, n_prb] = self.dims;
        ((p * n_tx + t) * n_rx + r) * n_prb + b
    }
}

pub fn flat_index(shape: StepShape, p: usize, t: usize, r: usize, b: usize) -> usize {
    ((p * shape.n_tx + t) * shape.n_rx + r) * shape.n_prb + b
}

pub fn flatten_step(step: &StepTensor, shape: StepShape) -> Result<Vec<f32>> {
    if step.dims != shape.dims() || step.data.len() != shape.feature_dim() {
        return Err(Error::dim(
            "flatten_step",
            alloc::format!("{:?}", shape.dims()),
            alloc::format!("{:?}", step.dims),
        ));
    }
    // Storage is already row-major in (plane, tx, rx, prb) order.
    Ok(step.data.clone())
}

pub fn unflatten_step(flat: &[f32], shape: StepShape) -> Result<StepTensor> {
    if flat.len() != shape.feature_dim() {
        return Err(Error::dim(
            "unflatten_step",
            shape.feature_dim(),
            flat.len(),
        ));
    }
    Ok(StepTensor {
        dims: shape.dims(),
        data: flat.to_vec(),
    })
}

/// Embedded token sequence `[length, model_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub embeddings: Vec<T>,
    pub length: usize,
    pub model_dim: usize,
    /// Time-step index covered by each token.
    pub source_steps: Vec<usize>,
}

/// Applies the shared affine embedding to `rows` flattened steps.
pub fn embed_steps<T: Real>(steps: &[f32], rows: usize, embed: &Linear<T>) -> Result<Vec<T>> {
    if steps.len() != rows * embed.d_in() {
        return Err(Error::dim("embed_steps", rows * embed.d_in(), steps.len()));
    }
    let x: Vec<T> = steps.iter().map(|&v| T::of_f32(v)).collect();
    Ok(embed.forward(&x, rows))
}

/// `embeddings[i] = affine(flatten(step_i)) + position_token(i)`.
pub fn embed_sequence<T: Real>(
    steps: &[f32],
    len: usize,
    embed: &Linear<T>,
    positional: &Param<T>,
    cfg: &EmbeddingConfig,
) -> Result<TokenSequence<T>> {
    if len == 0 || len > cfg.max_positions {
        return Err(Error::Length {
            context: "embed_sequence",
            len,
            max: cfg.max_positions,
        });
    }
    if embed.d_in() != cfg.feature_dim || embed.d_out() != cfg.model_dim {
        return Err(Error::dim(
            "embedding weights",
            alloc::format!("[{}, {}]", cfg.feature_dim, cfg.model_dim),
            alloc::format!("[{}, {}]", embed.d_in(), embed.d_out()),
        ));
    }
    let mut embeddings = embed_steps(steps, len, embed)?;
    let pos = position_tokens(len, positional)?;
    embeddings.iter_mut().zip(pos).for_each(|(e, &p)| *e += p);
    Ok(TokenSequence {
        embeddings,
        length: len,
        model_dim: cfg.model_dim,
        source_steps: (0..len).collect(),
    })
}

/// First `len` rows of the positional table.
pub fn position_tokens<T: Real>(len: usize, table: &Param<T>) -> Result<&[T]> {
    position_rows(table, len)
}

/// Logs a warning when the embedding does not compress.
pub fn check_compression(cfg: &EmbeddingConfig) {
    if !cfg.is_compressive() {
        log::warn!(
            "CSI embedding is not compressive: feature_dim {} <= model_dim {}",
            cfg.feature_dim,
            cfg.model_dim
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneConfig, ScenarioConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_geometry_flattens_to_2048() {
        let shape = ScenarioConfig::default().step_shape();
        let z = StepTensor::zeros(shape);
        let flat = flatten_step(&z, shape).unwrap();
        assert_eq!(flat.len(), 2048);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_imaginary_plane_index() {
        let shape = ScenarioConfig::default().step_shape();
        let mut t = StepTensor::zeros(shape);
        t.set(1, 0, 0, 0, 1.0);
        let flat = flatten_step(&t, shape).unwrap();
        assert_eq!(flat.iter().position(|&v| v == 1.0), Some(1024));
        assert_eq!(flat_index(shape, 1, 0, 0, 0), 1024);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let shape = ScenarioConfig::ci().step_shape();
        let wrong = StepTensor::zeros(ScenarioConfig::default().step_shape());
        assert!(matches!(
            flatten_step(&wrong, shape),
            Err(Error::Dimension { .. })
        ));
        assert!(unflatten_step(&[0.0; 3], shape).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(n_tx in 1usize..5, n_rx in 1usize..4, n_prb in 1usize..4, seed in any::<u64>()) {
            let shape = StepShape { n_tx, n_rx, n_prb };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = StepTensor::zeros(shape);
            for p in 0..2 { for a in 0..n_tx { for r in 0..n_rx { for b in 0..n_prb {
                t.set(p, a, r, b, rand::Rng::random::<f32>(&mut rng));
            }}}}
            let flat = flatten_step(&t, shape).unwrap();
            for p in 0..2 { for a in 0..n_tx { for r in 0..n_rx { for b in 0..n_prb {
                prop_assert_eq!(flat[flat_index(shape, p, a, r, b)], t.get(p, a, r, b));
            }}}}
            prop_assert_eq!(unflatten_step(&flat, shape).unwrap(), t);
        }
    }

    fn setup(len: usize) -> (Linear<f32>, Param<f32>, EmbeddingConfig, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = ScenarioConfig::ci().step_shape();
        let cfg = EmbeddingConfig::new(shape, &BackboneConfig::ci());
        let embed = Linear::new(cfg.feature_dim, cfg.model_dim, 0.02, &mut rng);
        let table = Param::normal(&[cfg.max_positions, cfg.model_dim], 0.02, &mut rng);
        let steps: Vec<f32> = (0..len * cfg.feature_dim)
            .map(|_| rand::Rng::random::<f32>(&mut rng))
            .collect();
        (embed, table, cfg, steps)
    }

    #[test]
    fn sequence_shapes() {
        let (embed, table, cfg, steps) = setup(16);
        let seq = embed_sequence(&steps, 16, &embed, &table, &cfg).unwrap();
        assert_eq!(seq.embeddings.len(), 16 * cfg.model_dim);
        assert_eq!(seq.source_steps, (0..16).collect::<Vec<_>>());
        let one = embed_sequence(&steps[..cfg.feature_dim], 1, &embed, &table, &cfg).unwrap();
        assert_eq!(one.embeddings.len(), cfg.model_dim);
        let big = cfg.max_positions + 1;
        let long = alloc::vec![0.0f32; big * cfg.feature_dim];
        assert!(matches!(
            embed_sequence(&long, big, &embed, &table, &cfg),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn differing_step_only_changes_its_own_token() {
        let (embed, table, cfg, steps) = setup(6);
        let mut other = steps.clone();
        let k = 3;
        other[k * cfg.feature_dim + 7] += 1.0;
        let a = embed_sequence(&steps, 6, &embed, &table, &cfg).unwrap();
        let b = embed_sequence(&other, 6, &embed, &table, &cfg).unwrap();
        let d = cfg.model_dim;
        assert_eq!(a.embeddings[..k * d], b.embeddings[..k * d]);
        assert_ne!(
            a.embeddings[k * d..(k + 1) * d],
            b.embeddings[k * d..(k + 1) * d]
        );
        assert_eq!(a.embeddings[(k + 1) * d..], b.embeddings[(k + 1) * d..]);
    }

    #[test]
    fn permuting_steps_permutes_pre_positional_embeddings() {
        let (embed, _, cfg, steps) = setup(4);
        let f = cfg.feature_dim;
        let d = cfg.model_dim;
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f32> = perm
            .iter()
            .flat_map(|&i| steps[i * f..(i + 1) * f].to_vec())
            .collect();
        let a = embed_steps(&steps, 4, &embed).unwrap();
        let b = embed_steps(&permuted, 4, &embed).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b[dst * d..(dst + 1) * d], a[src * d..(src + 1) * d]);
        }
    }

    #[test]
    fn compression_holds_for_default_geometry() {
        let cfg = EmbeddingConfig::new(
            ScenarioConfig::default().step_shape(),
            &BackboneConfig::default(),
        );
        assert_eq!((cfg.feature_dim, cfg.model_dim), (2048, 768));
        assert!(cfg.is_compressive());
        check_compression(&cfg);
    }
}
