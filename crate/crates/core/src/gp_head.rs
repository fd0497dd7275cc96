//! Gaussian-process output layer via random Fourier features.
//!
//! `Φ(x) = √(2/M)·cos(Wx + b)` with `W ~ N(0, 1/ℓ²)` and `b ~ U[0, 2π)`, both
//! frozen; `logits(x) = Φ(x)·β` with `β` the only trainable tensor. Under this
//! sampling `Φ(x)·Φ(x′)` is an unbiased estimate of the RBF kernel
//! `exp(−‖x−x′‖²/(2ℓ²))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};

#[derive(Clone, Debug, PartialEq)]
pub struct RffHead {
    /// `[M, D]`, frozen.
    pub w: Param,
    /// `[M]`, frozen.
    pub b: Param,
    /// `[M, C]`, trainable.
    pub beta: Param,
    pub length_scale: f64,
}

impl RffHead {
    pub fn init(dim: usize, classes: usize, features: usize, length_scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidParameter(format!(
                "RFF head needs positive dim and classes, got {dim} and {classes}"
            )));
        }
        if features == 0 {
            return Err(Error::InvalidParameter("RFF feature count M must be ≥ 1".into()));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "RFF length scale must be positive, got {length_scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(&[features, dim], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / length_scale
        });
        let b = Tensor::from_fn(&[features], |_| {
            rng.random_range(0.0..std::f64::consts::TAU)
        });
        Ok(RffHead {
            w: Param::new("gp.W", w),
            b: Param::new("gp.b", b),
            beta: Param::new("gp.beta", Tensor::zeros(&[features, classes])),
            length_scale,
        })
    }

    pub fn features(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.beta.value.shape()[1]
    }

    /// `[B, D]` → `[B, M]` random Fourier features.
    pub fn feature_map(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim() {
            return Err(Error::Shape {
                op: "rff_features",
                lhs: s.to_vec(),
                rhs: self.w.value.shape().to_vec(),
            });
        }
        let w_t = g.constant(self.w.value.transposed(0, 1)?);
        let b = g.constant(self.b.value.clone());
        let z = g.matmul(x, w_t)?;
        let z = g.add(z, b)?;
        let c = g.cos(z)?;
        g.scale(c, (2.0 / self.features() as f64).sqrt())
    }

    /// `[B, D]` → `[B, C]` logits; gradients reach `beta` only.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let phi = self.feature_map(g, x)?;
        let beta = self.beta.var(g);
        g.matmul(phi, beta)
    }

    /// Direct feature computation for one vector, outside any graph.
    pub fn rff_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape {
                op: "rff_features",
                lhs: vec![x.len()],
                rhs: self.w.value.shape().to_vec(),
            });
        }
        let scale = (2.0 / self.features() as f64).sqrt();
        Ok(self
            .w
            .value
            .data()
            .chunks(d)
            .zip(self.b.value.data())
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
                scale * z.cos()
            })
            .collect())
    }

    /// Monte-Carlo kernel estimate `Φ(x)·Φ(x′)`.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let fx = self.rff_features(x)?;
        let fy = self.rff_features(y)?;
        Ok(fx.iter().zip(&fy).map(|(a, b)| a * b).sum())
    }

    pub fn buffers(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

impl Module for RffHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.beta]
    }
}

/// Exact RBF kernel `exp(−‖x−y‖²/(2ℓ²))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}
