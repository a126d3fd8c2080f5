use serde::{Deserialize, Serialize};

use super::{axpy, dot, Rng, Tensor};
use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_out, d_in]),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut layer = Self::zeros(d_in, d_out);
        for w in layer.weight.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
        layer
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(self
            .weight
            .row_iter()
            .zip(self.bias.data())
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.d_in()];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grads.weight.row_mut(o));
            grads.bias.data_mut()[o] += g;
            axpy(g, self.weight.row(o), &mut dx);
        }
        dx
    }
}

/// Two fully connected layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub first: Linear,
    pub second: Linear,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FfnCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Ffn {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            first: Linear::zeros(d_in, d_hidden),
            second: Linear::zeros(d_hidden, d_out),
        }
    }

    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        let first = Linear::init(d_in, d_hidden, rng);
        let second = Linear::init(d_hidden, d_out, rng);
        Self { first, second }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.first.d_in(), self.first.d_out(), self.second.d_out())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, FfnCache)> {
        let pre = self.first.forward(x)?;
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let out = self.second.forward(&hidden)?;
        Ok((
            out,
            FfnCache {
                input: x.to_vec(),
                pre_activation: pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &FfnCache, dy: &[f64], grads: &mut Ffn) -> Vec<f64> {
        let mut dh = self.second.backward(&cache.hidden, dy, &mut grads.second);
        for (g, &z) in dh.iter_mut().zip(&cache.pre_activation) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        self.first.backward(&cache.input, &dh, &mut grads.first)
    }
}
