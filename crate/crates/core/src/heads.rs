//! Output heads: the shared last-token projection and the fixed-context
//! baseline heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::INIT_STD;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, Linear, Param};
use crate::real::Real;

pub struct MlpCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    rows: usize,
}

/// `affine₂(gelu(affine₁(x)))`, final layer linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(d_in, hidden, INIT_STD, rng),
            fc2: Linear::new(hidden, d_out, INIT_STD, rng),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x, rows);
        let act = gelu(&pre);
        let y = self.fc2.forward(&act, rows);
        (
            y,
            MlpCache {
                input: x.to_vec(),
                pre,
                act,
                rows,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &[T]) -> Vec<T> {
        let d_act = self.fc2.backward(&cache.act, dy, cache.rows, true).unwrap();
        let d_pre = gelu_backward(&cache.pre, &d_act);
        self.fc1
            .backward(&cache.input, &d_pre, cache.rows, true)
            .unwrap()
    }

    fn push_params<'a>(&'a self, out: &mut Vec<(alloc::string::String, &'a Param<T>)>) {
        out.push(("head.fc1.weight".into(), &self.fc1.weight));
        out.push(("head.fc1.bias".into(), &self.fc1.bias));
        out.push(("head.fc2.weight".into(), &self.fc2.weight));
        out.push(("head.fc2.bias".into(), &self.fc2.bias));
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<(alloc::string::String, &'a mut Param<T>)>) {
        out.push(("head.fc1.weight".into(), &mut self.fc1.weight));
        out.push(("head.fc1.bias".into(), &mut self.fc1.bias));
        out.push(("head.fc2.weight".into(), &mut self.fc2.weight));
        out.push(("head.fc2.bias".into(), &mut self.fc2.bias));
    }
}

/// Maps one hidden state to one CSI step. Its size does not depend on the
/// context length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new<R: Rng + ?Sized>(
        model_dim: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(model_dim, hidden, feature_dim, rng),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.mlp.fc1.d_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.fc2.d_out()
    }

    /// Prediction of the step following the token `hidden_last`.
    pub fn project_next_step(&self, hidden_last: &[T]) -> Result<Vec<T>> {
        if hidden_last.len() != self.model_dim() {
            return Err(Error::dim(
                "project_next_step",
                self.model_dim(),
                hidden_last.len(),
            ));
        }
        if !hidden_last.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("project_next_step input"));
        }
        Ok(self.mlp.forward(hidden_last, 1).0)
    }

    /// Row `i` of the result predicts step `i + 1`.
    pub fn project_all_positions(&self, hidden: &[T], len: usize) -> Result<Vec<T>> {
        if len == 0 || hidden.len() != len * self.model_dim() {
            return Err(Error::dim(
                "project_all_positions",
                len * self.model_dim(),
                hidden.len(),
            ));
        }
        Ok(self.mlp.forward(hidden, len).0)
    }
}

/// Baseline head: concatenates all `context` hidden rows and emits `outputs`
/// steps. Valid only for its native context length.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedStepHead<T> {
    pub context: usize,
    pub outputs: usize,
    pub mlp: Mlp<T>,
}

impl<T: Real> FixedStepHead<T> {
    pub fn new<R: Rng + ?Sized>(
        context: usize,
        outputs: usize,
        model_dim: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            context,
            outputs,
            mlp: Mlp::new(context * model_dim, hidden, outputs * feature_dim, rng),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.mlp.fc1.d_in() / self.context
    }

    /// `hidden` is `[rows, model_dim]` for one sequence; returns
    /// `[outputs, feature_dim]`.
    pub fn fixed_step_predict(&self, hidden: &[T], rows: usize) -> Result<Vec<T>> {
        if rows != self.context {
            return Err(Error::UnsupportedLength {
                model: format!("fixed-step head (l = {})", self.context),
                len: rows,
            });
        }
        if hidden.len() != rows * self.model_dim() {
            return Err(Error::dim(
                "fixed_step_predict",
                rows * self.model_dim(),
                hidden.len(),
            ));
        }
        Ok(self.mlp.forward(hidden, 1).0)
    }
}

/// Either head, as held by a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Projection(ProjectionHead<T>),
    Fixed(FixedStepHead<T>),
}

impl<T: Real> Head<T> {
    pub fn mlp(&self) -> &Mlp<T> {
        match self {
            Head::Projection(h) => &h.mlp,
            Head::Fixed(h) => &h.mlp,
        }
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        match self {
            Head::Projection(h) => &mut h.mlp,
            Head::Fixed(h) => &mut h.mlp,
        }
    }

    pub fn named_params(&self) -> Vec<(alloc::string::String, &Param<T>)> {
        let mut out = Vec::new();
        self.mlp().push_params(&mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(alloc::string::String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.mlp_mut().push_params_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}
