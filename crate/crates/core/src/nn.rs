//! Dense layers with explicit forward caches and backward passes.
//!
//! Activations are row-major `[rows, width]` buffers; weights follow the
//! `[in, out]` convention so `y = x·W + b`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::{gemm, MatMut, MatRef, Real};

/// A parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let dist = Normal::new(0.0, std).unwrap();
        p.value
            .iter_mut()
            .for_each(|x| *x = T::lit(dist.sample(rng)));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[d_in, d_out], std, rng),
            bias: Param::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (di, dout) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len(), rows * di);
        let mut y = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            MatRef::new(x, rows, di),
            MatRef::new(&self.weight.value, di, dout),
            MatMut::new(&mut y, rows, dout),
            true,
        );
        y
    }

    /// Accumulates weight/bias gradients; returns `dx` when requested.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize, need_dx: bool) -> Option<Vec<T>> {
        let (di, dout) = (self.d_in(), self.d_out());
        gemm(
            MatRef::new(x, rows, di).t(),
            MatRef::new(dy, rows, dout),
            MatMut::new(&mut self.weight.grad, di, dout),
            true,
        );
        for r in 0..rows {
            for (g, &d) in self.bias.grad.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * di];
            gemm(
                MatRef::new(dy, rows, dout),
                MatRef::new(&self.weight.value, di, dout).t(),
                MatMut::new(&mut dx, rows, di),
                false,
            );
            dx
        })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Param::filled(&[d], T::one()),
            beta: Param::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.gamma.len();
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::lit(d as f64);
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = h * self.gamma.value[i] + self.beta.value[i];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T], rows: usize) -> Vec<T> {
        let d = self.gamma.len();
        let inv_d = T::one() / T::lit(d as f64);
        let mut dx = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for i in 0..d {
                self.gamma.grad[i] += g[i] * xh[i];
                self.beta.grad[i] += g[i];
                let dxh = g[i] * self.gamma.value[i];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
            }
            let rs = cache.rstd[r];
            for i in 0..d {
                let dxh = g[i] * self.gamma.value[i];
                dx[r * d + i] = rs * (dxh - inv_d * sum_dxh - xh[i] * inv_d * sum_dxh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, as used by the GPT-2 family.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

/// `dx = dy · gelu'(x)`.
pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
            g * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &[f64], w: &[f64]) -> f64 {
        y.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check(analytic: f64, numeric: f64) {
        let den = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / den < 1e-6,
            "analytic {analytic} numeric {numeric}"
        );
    }

    #[test]
    fn gelu_reference_points() {
        let y = gelu(&[0.0f64, 1.0, -1.0]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((y[2] + 0.158_808_009_392_523).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(&[x + h])[0] - gelu(&[x - h])[0]) / (2.0 * h);
            check(gelu_backward(&[x], &[1.0])[0], num);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 3;
        let d = 5;
        let mut ln = LayerNorm::<f64>::new(d);
        ln.gamma = Param::normal(&[d], 1.0, &mut rng);
        ln.beta = Param::normal(&[d], 1.0, &mut rng);
        let x: Vec<f64> = (0..rows * d)
            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
            .collect();
        let w: Vec<f64> = (0..rows * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, cache) = ln.forward(&x, rows);
        let dx = ln.backward(&cache, &w, rows);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (loss(&ln.forward(&xp, rows).0, &w) - loss(&ln.forward(&xm, rows).0, &w))
                / (2.0 * h);
            check(dx[i], num);
        }
        for i in 0..d {
            let mut lp = ln.clone();
            lp.gamma.value[i] += h;
            let mut lm = ln.clone();
            lm.gamma.value[i] -= h;
            let num =
                (loss(&lp.forward(&x, rows).0, &w) - loss(&lm.forward(&x, rows).0, &w)) / (2.0 * h);
            check(ln.gamma.grad[i], num);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::new(4, 3, 0.5, &mut rng);
        lin.bias = Param::normal(&[3], 0.5, &mut rng);
        let rows = 2;
        let x: Vec<f64> = (0..rows * 4).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..rows * 3).map(|_| rng.random::<f64>()).collect();
        let dx = lin.backward(&x, &w, rows, true).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num =
                (loss(&lin.forward(&xp, rows), &w) - loss(&lin.forward(&xm, rows), &w)) / (2.0 * h);
            check(dx[i], num);
        }
        for i in 0..12 {
            let mut lp = lin.clone();
            lp.weight.value[i] += h;
            let mut lm = lin.clone();
            lm.weight.value[i] -= h;
            let num =
                (loss(&lp.forward(&x, rows), &w) - loss(&lm.forward(&x, rows), &w)) / (2.0 * h);
            check(lin.weight.grad[i], num);
        }
    }
}
