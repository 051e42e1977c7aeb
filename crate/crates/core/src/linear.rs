//! Dense affine layer shared by the encoder and the scaling generator.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

/// `y = W x + b` with `W` stored row-major as `[out_dim × in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform initialization in `±sqrt(gain / in_dim)`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Self::zeros(dim, dim);
        for i in 0..dim {
            layer.weight[i * dim + i] = 1.0;
        }
        layer
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("linear input", self.in_dim, x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dW += g xᵀ`, `db += g` into `acc` and returns `Wᵀ g`.
    pub(crate) fn backward_accumulate(&self, x: &[f64], grad_out: &[f64], acc: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            acc.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let acc_row = &mut acc.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                acc_row[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    pub(crate) fn read_flat(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.len();
        let nb = self.bias.len();
        self.weight.copy_from_slice(&src[..nw]);
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

/// Parameter containers that can be viewed as one flat real vector.
///
/// Optimizers, checkpoints and finite-difference checks all work on the flat
/// view; the ordering is layer by layer, weights before biases.
pub trait FlatParams {
    fn num_params(&self) -> usize;
    fn write_flat(&self, out: &mut Vec<f64>);
    fn read_flat(&mut self, src: &[f64]) -> Result<()>;

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_flat(&mut out);
        out
    }
}

pub(crate) fn layers_num_params(layers: &[Linear]) -> usize {
    layers.iter().map(Linear::num_params).sum()
}

pub(crate) fn layers_read_flat(layers: &mut [Linear], src: &[f64], context: &'static str) -> Result<()> {
    check_len(context, layers_num_params(layers), src.len())?;
    let mut offset = 0;
    for layer in layers {
        offset += layer.read_flat(&src[offset..]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_manual() {
        let layer = Linear {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 2.0, -1.0, 0.5],
            bias: vec![0.1, -0.2],
        };
        let y = layer.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 * 3.0 + 2.0 * -1.0 + 0.1, -3.0 - 0.5 - 0.2]);
    }

    #[test]
    fn rejects_wrong_width() {
        assert!(Linear::zeros(3, 2).forward(&[1.0, 2.0]).is_err());
    }
}
