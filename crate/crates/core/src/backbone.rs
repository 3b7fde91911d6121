//! GPT-2-style causal decoder: learned positional table, pre-norm blocks with
//! masked multi-head self-attention and a GELU MLP, final layer norm.
//!
//! Parameter names follow the published 117M checkpoint layout
//! (`wpe.weight`, `h.{i}.attn.c_attn.weight`, `ln_f.bias`, ...), so a
//! pretrained source maps onto this struct name-for-name.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear, Param};
use crate::real::{gemm, gemm_scaled, MatMut, MatRef, Real};

/// Initialization scale of the backbone family.
pub const INIT_STD: f64 = 0.02;

/// `allowed[i][j]` iff position `i` may attend to position `j` (`j ≤ i`).
pub fn causal_mask(len: usize) -> Vec<Vec<bool>> {
    (0..len)
        .map(|i| (0..len).map(|j| j <= i).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_1: LayerNorm<T>,
    pub c_attn: Linear<T>,
    pub attn_proj: Linear<T>,
    pub ln_2: LayerNorm<T>,
    pub c_fc: Linear<T>,
    pub mlp_proj: Linear<T>,
    n_heads: usize,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LayerNormCache<T>,
    m: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let proj_std = INIT_STD / libm::sqrt(2.0 * cfg.n_layers as f64);
        Self {
            ln_1: LayerNorm::new(d),
            c_attn: Linear::new(d, 3 * d, INIT_STD, rng),
            attn_proj: Linear::new(d, d, proj_std, rng),
            ln_2: LayerNorm::new(d),
            c_fc: Linear::new(d, cfg.ff_dim, INIT_STD, rng),
            mlp_proj: Linear::new(cfg.ff_dim, d, proj_std, rng),
            n_heads: cfg.n_heads,
        }
    }

    fn dim(&self) -> usize {
        self.ln_1.gamma.len()
    }

    pub fn forward(&self, x: &[T], batch: usize, len: usize) -> (Vec<T>, BlockCache<T>) {
        let rows = batch * len;
        let (a, ln1) = self.ln_1.forward(x, rows);
        let qkv = self.c_attn.forward(&a, rows);
        let (attn, probs) = self.attention(&qkv, batch, len);
        let o = self.attn_proj.forward(&attn, rows);
        let mut h: Vec<T> = x.iter().zip(&o).map(|(&u, &v)| u + v).collect();
        let (m, ln2) = self.ln_2.forward(&h, rows);
        let fc_pre = self.c_fc.forward(&m, rows);
        let fc_act = gelu(&fc_pre);
        let mo = self.mlp_proj.forward(&fc_act, rows);
        h.iter_mut().zip(&mo).for_each(|(u, &v)| *u += v);
        (
            h,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                m,
                fc_pre,
                fc_act,
            },
        )
    }

    /// Masked softmax attention for every (sequence, head). Returns merged
    /// head outputs `[rows, d]` and probabilities `[batch, heads, len, len]`.
    fn attention(&self, qkv: &[T], batch: usize, len: usize) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let nh = self.n_heads;
        let dh = d / nh;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); batch * len * d];
        let mut probs = vec![T::zero(); batch * nh * len * len];
        for b in 0..batch {
            let seq = &qkv[b * len * 3 * d..(b + 1) * len * 3 * d];
            for h in 0..nh {
                let p = &mut probs[(b * nh + h) * len * len..(b * nh + h + 1) * len * len];
                let q = MatRef::strided(&seq[h * dh..], len, dh, 3 * d);
                let k = MatRef::strided(&seq[d + h * dh..], len, dh, 3 * d);
                gemm_scaled(scale, q, k.t(), MatMut::new(p, len, len), false);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row[..=i].iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    row[..=i].iter_mut().for_each(|v| *v *= inv);
                    row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                }
                let v = MatRef::strided(&seq[2 * d + h * dh..], len, dh, 3 * d);
                let o = &mut out[b * len * d + h * dh..];
                gemm(
                    MatRef::new(p, len, len),
                    v,
                    MatMut::strided(o, len, dh, d),
                    false,
                );
            }
        }
        (out, probs)
    }

    fn attention_backward(
        &self,
        cache: &BlockCache<T>,
        d_out: &[T],
        batch: usize,
        len: usize,
    ) -> Vec<T> {
        let d = self.dim();
        let nh = self.n_heads;
        let dh = d / nh;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dqkv = vec![T::zero(); batch * len * 3 * d];
        let mut dp = vec![T::zero(); len * len];
        for b in 0..batch {
            let seq = &cache.qkv[b * len * 3 * d..(b + 1) * len * 3 * d];
            let dseq = &mut dqkv[b * len * 3 * d..(b + 1) * len * 3 * d];
            let dout = &d_out[b * len * d..];
            for h in 0..nh {
                let p = &cache.probs[(b * nh + h) * len * len..(b * nh + h + 1) * len * len];
                let dout_h = MatRef::strided(&dout[h * dh..], len, dh, d);
                let v = MatRef::strided(&seq[2 * d + h * dh..], len, dh, 3 * d);
                // dV = Pᵀ·dO
                gemm(
                    MatRef::new(p, len, len).t(),
                    dout_h,
                    MatMut::strided(&mut dseq[2 * d + h * dh..], len, dh, 3 * d),
                    false,
                );
                // dP = dO·Vᵀ, then softmax backward in place.
                gemm(dout_h, v.t(), MatMut::new(&mut dp, len, len), false);
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                let q = MatRef::strided(&seq[h * dh..], len, dh, 3 * d);
                let k = MatRef::strided(&seq[d + h * dh..], len, dh, 3 * d);
                // dQ = scale·dS·K, dK = scale·dSᵀ·Q
                gemm_scaled(
                    scale,
                    MatRef::new(&dp, len, len),
                    k,
                    MatMut::strided(&mut dseq[h * dh..], len, dh, 3 * d),
                    false,
                );
                gemm_scaled(
                    scale,
                    MatRef::new(&dp, len, len).t(),
                    q,
                    MatMut::strided(&mut dseq[d + h * dh..], len, dh, 3 * d),
                    false,
                );
            }
        }
        dqkv
    }

    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        dy: &[T],
        batch: usize,
        len: usize,
    ) -> Vec<T> {
        let rows = batch * len;
        // MLP branch.
        let d_act = self
            .mlp_proj
            .backward(&cache.fc_act, dy, rows, true)
            .unwrap();
        let d_pre = gelu_backward(&cache.fc_pre, &d_act);
        let d_m = self.c_fc.backward(&cache.m, &d_pre, rows, true).unwrap();
        let d_ln2 = self.ln_2.backward(&cache.ln2, &d_m, rows);
        let dh: Vec<T> = dy.iter().zip(&d_ln2).map(|(&a, &b)| a + b).collect();
        // Attention branch.
        let d_attn = self
            .attn_proj
            .backward(&cache.attn, &dh, rows, true)
            .unwrap();
        let d_qkv = self.attention_backward(cache, &d_attn, batch, len);
        let d_a = self.c_attn.backward(&cache.a, &d_qkv, rows, true).unwrap();
        let d_ln1 = self.ln_1.backward(&cache.ln1, &d_a, rows);
        dh.iter().zip(&d_ln1).map(|(&a, &b)| a + b).collect()
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.ln_1.weight"), &self.ln_1.gamma));
        out.push((format!("{prefix}.ln_1.bias"), &self.ln_1.beta));
        out.push((format!("{prefix}.attn.c_attn.weight"), &self.c_attn.weight));
        out.push((format!("{prefix}.attn.c_attn.bias"), &self.c_attn.bias));
        out.push((
            format!("{prefix}.attn.c_proj.weight"),
            &self.attn_proj.weight,
        ));
        out.push((format!("{prefix}.attn.c_proj.bias"), &self.attn_proj.bias));
        out.push((format!("{prefix}.ln_2.weight"), &self.ln_2.gamma));
        out.push((format!("{prefix}.ln_2.bias"), &self.ln_2.beta));
        out.push((format!("{prefix}.mlp.c_fc.weight"), &self.c_fc.weight));
        out.push((format!("{prefix}.mlp.c_fc.bias"), &self.c_fc.bias));
        out.push((format!("{prefix}.mlp.c_proj.weight"), &self.mlp_proj.weight));
        out.push((format!("{prefix}.mlp.c_proj.bias"), &self.mlp_proj.bias));
    }

    fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.ln_1.weight"), &mut self.ln_1.gamma));
        out.push((format!("{prefix}.ln_1.bias"), &mut self.ln_1.beta));
        out.push((
            format!("{prefix}.attn.c_attn.weight"),
            &mut self.c_attn.weight,
        ));
        out.push((format!("{prefix}.attn.c_attn.bias"), &mut self.c_attn.bias));
        out.push((
            format!("{prefix}.attn.c_proj.weight"),
            &mut self.attn_proj.weight,
        ));
        out.push((
            format!("{prefix}.attn.c_proj.bias"),
            &mut self.attn_proj.bias,
        ));
        out.push((format!("{prefix}.ln_2.weight"), &mut self.ln_2.gamma));
        out.push((format!("{prefix}.ln_2.bias"), &mut self.ln_2.beta));
        out.push((format!("{prefix}.mlp.c_fc.weight"), &mut self.c_fc.weight));
        out.push((format!("{prefix}.mlp.c_fc.bias"), &mut self.c_fc.bias));
        out.push((
            format!("{prefix}.mlp.c_proj.weight"),
            &mut self.mlp_proj.weight,
        ));
        out.push((format!("{prefix}.mlp.c_proj.bias"), &mut self.mlp_proj.bias));
    }
}

/// Transformer blocks, positional table and final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub wpe: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

pub struct BackboneCache<T> {
    batch: usize,
    len: usize,
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
}

impl<T: Real> Backbone<T> {
    /// Freshly initialized weights (normal, std 0.02; residual projections
    /// scaled by `1/√(2·n_layers)`).
    pub fn random<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let wpe = Param::normal(&[config.max_positions, config.model_dim], INIT_STD, rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(config, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            wpe,
            blocks,
            ln_f: LayerNorm::new(config.model_dim),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Rows `0..len` of the positional table, `[len, model_dim]`.
    pub fn position_tokens(&self, len: usize) -> Result<&[T]> {
        position_rows(&self.wpe, len)
    }

    /// Runs the decoder over `batch` sequences of `len` token embeddings
    /// (positional rows not yet added). Returns hidden states `[batch·len, d]`.
    pub fn forward(
        &self,
        tokens: &[T],
        batch: usize,
        len: usize,
    ) -> Result<(Vec<T>, BackboneCache<T>)> {
        let d = self.model_dim();
        if len == 0 || len > self.config.max_positions {
            return Err(Error::Length {
                context: "backbone forward",
                len,
                max: self.config.max_positions,
            });
        }
        if tokens.len() != batch * len * d {
            return Err(Error::dim(
                "backbone forward",
                batch * len * d,
                tokens.len(),
            ));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("backbone input tokens"));
        }
        let pos = self.position_tokens(len)?;
        let mut x = tokens.to_vec();
        for b in 0..batch {
            for (v, &p) in x[b * len * d..(b + 1) * len * d].iter_mut().zip(pos) {
                *v += p;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, batch, len);
            caches.push(c);
            x = y;
        }
        let (hidden, ln_f) = self.ln_f.forward(&x, batch * len);
        Ok((
            hidden,
            BackboneCache {
                batch,
                len,
                blocks: caches,
                ln_f,
            },
        ))
    }

    /// Backpropagates `d_hidden`; accumulates parameter gradients (including
    /// the positional table) and returns the gradient w.r.t. input tokens.
    pub fn backward(&mut self, cache: &BackboneCache<T>, d_hidden: &[T]) -> Vec<T> {
        let (batch, len) = (cache.batch, cache.len);
        let d = self.model_dim();
        let mut dx = self.ln_f.backward(&cache.ln_f, d_hidden, batch * len);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(c, &dx, batch, len);
        }
        for b in 0..batch {
            for (g, &v) in self.wpe.grad[..len * d]
                .iter_mut()
                .zip(&dx[b * len * d..(b + 1) * len * d])
            {
                *g += v;
            }
        }
        dx
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        out.push((String::from("wpe.weight"), &self.wpe));
        for (i, b) in self.blocks.iter().enumerate() {
            b.push_params(&format!("h.{i}"), &mut out);
        }
        out.push((String::from("ln_f.weight"), &self.ln_f.gamma));
        out.push((String::from("ln_f.bias"), &self.ln_f.beta));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        out.push((String::from("wpe.weight"), &mut self.wpe));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_params_mut(&format!("h.{i}"), &mut out);
        }
        out.push((String::from("ln_f.weight"), &mut self.ln_f.gamma));
        out.push((String::from("ln_f.bias"), &mut self.ln_f.beta));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Copies every tensor from a pretrained source with the same layout.
    /// Errors name the first tensor whose shape disagrees.
    pub fn load_from(&mut self, source: &Backbone<T>) -> Result<()> {
        if source.blocks.len() != self.blocks.len() {
            return Err(Error::dim(
                "pretrained layer count",
                self.blocks.len(),
                source.blocks.len(),
            ));
        }
        let src = source.named_params();
        for ((name, dst), (sname, s)) in self.named_params_mut().into_iter().zip(src) {
            debug_assert_eq!(name, sname);
            if dst.shape != s.shape {
                return Err(Error::Dimension {
                    context: "pretrained tensor",
                    expected: format!("{name} {:?}", dst.shape),
                    actual: format!("{:?}", s.shape),
                });
            }
            dst.value.copy_from_slice(&s.value);
        }
        Ok(())
    }
}

/// Rows `0..len` of a `[max_positions, d]` table.
pub fn position_rows<T: Real>(table: &Param<T>, len: usize) -> Result<&[T]> {
    let max = table.shape[0];
    if len == 0 || len > max {
        return Err(Error::Length {
            context: "position tokens",
            len,
            max,
        });
    }
    Ok(&table.value[..len * table.shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            model_dim: 16,
            n_heads: 4,
            ff_dim: 32,
            max_positions: 32,
            ..BackboneConfig::ci()
        }
    }

    fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn causal_mask_pattern() {
        assert_eq!(causal_mask(1), vec![vec![true]]);
        let m = causal_mask(3);
        assert_eq!(m.iter().flatten().filter(|&&a| a).count(), 6);
        for (i, row) in causal_mask(9).iter().enumerate() {
            assert_eq!(row.iter().filter(|&&a| a).count(), i + 1);
            assert!(row[..=i].iter().all(|&a| a));
        }
    }

    #[test]
    fn perturbing_a_later_token_leaves_earlier_outputs_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small();
        let bb = Backbone::<f64>::random(&cfg, &mut rng).unwrap();
        let len = 8;
        let x = tokens(&mut rng, len * 16);
        let (h0, _) = bb.forward(&x, 1, len).unwrap();
        for k in 0..len {
            let mut xp = x.clone();
            xp[k * 16 + 3] += 0.5;
            let (h1, _) = bb.forward(&xp, 1, len).unwrap();
            assert_eq!(&h0[..k * 16], &h1[..k * 16]);
            assert_ne!(&h0[k * 16..], &h1[k * 16..]);
        }
    }

    #[test]
    fn rejects_non_finite_and_overlong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::<f32>::random(&small(), &mut rng).unwrap();
        let mut x = vec![0.0f32; 2 * 16];
        x[5] = f32::NAN;
        assert!(matches!(bb.forward(&x, 1, 2), Err(Error::NonFinite(_))));
        let x = vec![0.0f32; 33 * 16];
        assert!(matches!(bb.forward(&x, 1, 33), Err(Error::Length { .. })));
    }

    #[test]
    fn position_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::<f32>::random(&small(), &mut rng).unwrap();
        assert_eq!(bb.position_tokens(4).unwrap(), &bb.wpe.value[..4 * 16]);
        assert_eq!(
            &bb.position_tokens(8).unwrap()[..4 * 16],
            bb.position_tokens(4).unwrap()
        );
        assert!(bb.position_tokens(0).is_err());
        assert!(bb.position_tokens(33).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = small();
        let mut bb = Backbone::<f64>::random(&cfg, &mut rng).unwrap();
        // Larger weights so attention is far from uniform.
        for (_, p) in bb.named_params_mut() {
            if p.shape.len() == 2 {
                p.value.iter_mut().for_each(|v| *v *= 10.0);
            }
        }
        let (batch, len) = (2, 5);
        let x = tokens(&mut rng, batch * len * 16);
        let w = tokens(&mut rng, batch * len * 16);
        let objective = |bb: &Backbone<f64>, x: &[f64]| -> f64 {
            let (h, _) = bb.forward(x, batch, len).unwrap();
            h.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bb.forward(&x, batch, len).unwrap();
        let dx = bb.backward(&cache, &w);
        let eps = 1e-5;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (objective(&bb, &xp) - objective(&bb, &xm)) / (2.0 * eps);
            let tol = 1e-5 * num.abs().max(dx[i].abs()) + 1e-8;
            assert!((num - dx[i]).abs() < tol, "input {i}: {} vs {num}", dx[i]);
        }
        let names: Vec<(String, Vec<f64>)> = bb
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        for (pi, (name, grad)) in names.iter().enumerate() {
            for j in (0..grad.len()).step_by(grad.len() / 3 + 1) {
                let mut plus = bb.clone();
                plus.named_params_mut()[pi].1.value[j] += eps;
                let mut minus = bb.clone();
                minus.named_params_mut()[pi].1.value[j] -= eps;
                let num = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * eps);
                // Key biases have an exactly-zero gradient; hence the absolute floor.
                let tol = 1e-5 * num.abs().max(grad[j].abs()) + 1e-8;
                assert!(
                    (num - grad[j]).abs() < tol,
                    "{name}[{j}]: {} vs {num}",
                    grad[j]
                );
            }
        }
    }
}
