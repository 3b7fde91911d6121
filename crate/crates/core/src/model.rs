//! A complete predictor: CSI embedding → causal backbone → head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{Backbone, INIT_STD};
use crate::config::{BackboneConfig, EmbeddingConfig, ModelVariant, StepShape, TrainableScope};
use crate::error::{Error, Result};
use crate::heads::{FixedStepHead, Head, ProjectionHead};
use crate::nn::{Linear, Param};
use crate::real::Real;
use crate::tokenization::{check_compression, embed_steps};
use crate::training::{mse_loss_with_grad, next_step_loss_with_grad};

#[derive(Debug, Clone, PartialEq)]
pub struct CsiModel<T> {
    pub variant: ModelVariant,
    pub shape: StepShape,
    pub embed: Linear<T>,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
}

impl<T: Real> CsiModel<T> {
    /// Randomly initialized model. Use [`CsiModel::load_pretrained_backbone`]
    /// afterwards to transfer pretrained transformer weights; the CSI
    /// embedding and head always start fresh.
    pub fn new<R: Rng + ?Sized>(
        variant: ModelVariant,
        shape: StepShape,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let emb_cfg = EmbeddingConfig::new(shape, cfg);
        check_compression(&emb_cfg);
        let f = shape.feature_dim();
        let d = cfg.model_dim;
        let embed = Linear::new(f, d, INIT_STD, rng);
        let backbone = Backbone::random(cfg, rng)?;
        let head = match variant.fixed_context() {
            None => Head::Projection(ProjectionHead::new(d, cfg.proj_hidden, f, rng)),
            Some(l) => Head::Fixed(FixedStepHead::new(
                l,
                variant.output_steps(),
                d,
                cfg.proj_hidden,
                f,
                rng,
            )),
        };
        Ok(Self {
            variant,
            shape,
            embed,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn load_pretrained_backbone(&mut self, source: &Backbone<T>) -> Result<()> {
        self.backbone.load_from(source)
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.feature_dim()
    }

    pub fn supports_context(&self, len: usize) -> bool {
        match self.variant.fixed_context() {
            None => len >= 1 && len <= self.backbone.config.max_positions,
            Some(l) => len == l,
        }
    }

    pub fn output_steps(&self) -> usize {
        self.variant.output_steps()
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        out.push((String::from("csi_embed.weight"), &self.embed.weight));
        out.push((String::from("csi_embed.bias"), &self.embed.bias));
        out.extend(self.backbone.named_params());
        out.extend(self.head.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        out.push((String::from("csi_embed.weight"), &mut self.embed.weight));
        out.push((String::from("csi_embed.bias"), &mut self.embed.bias));
        out.extend(self.backbone.named_params_mut());
        out.extend(self.head.named_params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Whether `name` updates under `scope`.
    pub fn is_trainable(name: &str, scope: TrainableScope) -> bool {
        match scope {
            TrainableScope::Full => true,
            TrainableScope::HeadsOnly => {
                name.starts_with("csi_embed.") || name.starts_with("head.")
            }
        }
    }

    fn check_input(&self, steps: &[f32], batch: usize, len: usize) -> Result<()> {
        let f = self.feature_dim();
        if steps.len() != batch * len * f {
            return Err(Error::dim("model input", batch * len * f, steps.len()));
        }
        Ok(())
    }

    /// Backbone hidden states `[batch·len, d]` for flattened steps
    /// `[batch, len, feature_dim]`.
    pub fn hidden_states(&self, steps: &[f32], batch: usize, len: usize) -> Result<Vec<T>> {
        self.check_input(steps, batch, len)?;
        let tokens = embed_steps(steps, batch * len, &self.embed)?;
        Ok(self.backbone.forward(&tokens, batch, len)?.0)
    }

    /// Predicts the next `output_steps()` steps for each of `batch` contexts
    /// of `len` steps. Returns `[batch, output_steps, feature_dim]`.
    ///
    /// Csi-LLM uses only the final hidden state of every context.
    pub fn predict(&self, contexts: &[f32], batch: usize, len: usize) -> Result<Vec<f32>> {
        if !self.supports_context(len) {
            return Err(Error::UnsupportedLength {
                model: String::from(self.variant.name()),
                len,
            });
        }
        let hidden = self.hidden_states(contexts, batch, len)?;
        let d = self.backbone.model_dim();
        let out = match &self.head {
            Head::Projection(head) => {
                let mut last = Vec::with_capacity(batch * d);
                for b in 0..batch {
                    let row = b * len + len - 1;
                    last.extend_from_slice(&hidden[row * d..(row + 1) * d]);
                }
                head.mlp.forward(&last, batch).0
            }
            Head::Fixed(head) => {
                // Each sequence's rows are contiguous: [batch, len·d].
                head.mlp.forward(&hidden, batch).0
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model prediction"));
        }
        Ok(out.iter().map(|v| v.as_f32()).collect())
    }

    /// Forward + backward on one micro-batch. Accumulates the gradient of
    /// `scale · Σ_samples loss` and returns the unscaled per-sample loss sum.
    ///
    /// Csi-LLM: `inputs`/`targets` are `[batch, len, F]`, targets shifted by
    /// one step; the loss is the summed per-position MSE. Fixed-step heads:
    /// `inputs` is `[batch, l, F]`, `targets` `[batch, k, F]`, loss is the MSE
    /// over the `k` predicted steps.
    pub fn accumulate_gradients(
        &mut self,
        inputs: &[f32],
        targets: &[f32],
        batch: usize,
        len: usize,
        scale: f64,
    ) -> Result<f64> {
        if !self.supports_context(len) {
            return Err(Error::UnsupportedLength {
                model: String::from(self.variant.name()),
                len,
            });
        }
        self.check_input(inputs, batch, len)?;
        let f = self.feature_dim();
        let rows = batch * len;
        let x: Vec<T> = inputs.iter().map(|&v| T::of_f32(v)).collect();
        let tokens = self.embed.forward(&x, rows);
        let (hidden, cache) = self.backbone.forward(&tokens, batch, len)?;
        let target: Vec<T> = targets.iter().map(|&v| T::of_f32(v)).collect();

        let (head_rows, per_sample_targets) = match &self.head {
            Head::Projection(_) => (rows, len * f),
            Head::Fixed(h) => (batch, h.outputs * f),
        };
        if target.len() != batch * per_sample_targets {
            return Err(Error::dim(
                "training targets",
                batch * per_sample_targets,
                target.len(),
            ));
        }
        let (pred, head_cache) = self.head.mlp().forward(&hidden, head_rows);

        let mut d_pred = vec![T::zero(); pred.len()];
        let mut total = 0.0;
        for b in 0..batch {
            let span = b * per_sample_targets..(b + 1) * per_sample_targets;
            let (loss, grad) = match &self.head {
                Head::Projection(_) => {
                    next_step_loss_with_grad(&pred[span.clone()], &target[span.clone()], len)?
                }
                Head::Fixed(_) => mse_loss_with_grad(&pred[span.clone()], &target[span.clone()])?,
            };
            total += loss;
            let s = T::lit(scale);
            for (dst, g) in d_pred[span].iter_mut().zip(grad) {
                *dst = g * s;
            }
        }
        if !total.is_finite() {
            return Ok(total);
        }
        let d_hidden = self.head.mlp_mut().backward(&head_cache, &d_pred);
        let d_tokens = self.backbone.backward(&cache, &d_hidden);
        self.embed.backward(&x, &d_tokens, rows, false);
        Ok(total)
    }

    /// Structural summary for logs and reports.
    pub fn describe(&self) -> String {
        let c = self.config();
        format!(
            "{} (layers {}, d_model {}, heads {}, params {})",
            self.variant.name(),
            c.n_layers,
            c.model_dim,
            c.n_heads,
            self.param_count()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            n_layers: 1,
            model_dim: 16,
            n_heads: 2,
            ff_dim: 32,
            max_positions: 32,
            proj_hidden: 24,
            ..BackboneConfig::ci()
        }
    }

    fn shape() -> StepShape {
        StepShape {
            n_tx: 2,
            n_rx: 2,
            n_prb: 2,
        }
    }

    #[test]
    fn csi_llm_accepts_any_length_fixed_only_its_own() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CsiModel::<f32>::new(ModelVariant::CsiLlm, shape(), &tiny_cfg(), &mut rng).unwrap();
        for len in 1..=16 {
            let x = vec![0.3f32; 2 * len * 16];
            assert_eq!(m.predict(&x, 2, len).unwrap().len(), 2 * 16);
        }
        let f4 =
            CsiModel::<f32>::new(ModelVariant::Fixed4, shape(), &tiny_cfg(), &mut rng).unwrap();
        assert!(f4.predict(&vec![0.0; 4 * 16], 1, 4).is_ok());
        assert!(matches!(
            f4.predict(&[0.0; 2 * 16], 1, 2),
            Err(Error::UnsupportedLength { len: 2, .. })
        ));
        let p4 =
            CsiModel::<f32>::new(ModelVariant::Parallel4, shape(), &tiny_cfg(), &mut rng).unwrap();
        assert_eq!(p4.predict(&vec![0.1; 4 * 16], 1, 4).unwrap().len(), 4 * 16);
    }

    #[test]
    fn heads_only_scope() {
        assert!(CsiModel::<f32>::is_trainable(
            "head.fc1.weight",
            TrainableScope::HeadsOnly
        ));
        assert!(CsiModel::<f32>::is_trainable(
            "csi_embed.bias",
            TrainableScope::HeadsOnly
        ));
        assert!(!CsiModel::<f32>::is_trainable(
            "h.0.attn.c_attn.weight",
            TrainableScope::HeadsOnly
        ));
        assert!(!CsiModel::<f32>::is_trainable(
            "wpe.weight",
            TrainableScope::HeadsOnly
        ));
        assert!(CsiModel::<f32>::is_trainable(
            "wpe.weight",
            TrainableScope::Full
        ));
    }

    #[test]
    fn full_size_model_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = ScenarioConfig::default().step_shape();
        let cfg = BackboneConfig::default();
        let m = CsiModel::<f32>::new(ModelVariant::CsiLlm, shape, &cfg, &mut rng).unwrap();
        assert_eq!(m.backbone.param_count(), cfg.backbone_param_count());
        assert_eq!(m.embed.weight.shape, vec![2048, 768]);
    }
}
