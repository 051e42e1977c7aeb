//! MLP embedding network with an optional terminal L2 normalization.
//!
//! The network is `input -> [Linear -> ReLU]* -> Linear -> (normalize)`.
//! Forward passes return a tape holding every intermediate needed by
//! [`EncoderParams::backward_accumulate`], so a training step encodes each
//! point once and reuses the tape for the reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linear::{layers_num_params, layers_read_flat, FlatParams, Linear};

/// Pre-normalization norms below this produce a zero embedding.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
    pub embed_dim: usize,
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct EncodeTape {
    /// Input to each layer (the raw input for layer 0, post-ReLU otherwise).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry is the raw embedding.
    pre: Vec<Vec<f64>>,
    /// L2 norm of the raw embedding.
    pub norm: f64,
    /// Set when normalization was requested but the norm fell below [`NORM_FLOOR`].
    pub degenerate: bool,
}

impl EncodeTape {
    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    /// Pre-activations of every layer, in order.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

impl EncoderParams {
    /// `input_dim -> hidden[0] -> ... -> embed_dim`, ReLU between layers.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        normalize: bool,
        rng: &mut R,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                // He gain for layers feeding a ReLU, Glorot-ish for the head.
                let gain = if i + 1 < n { 6.0 } else { 3.0 };
                Linear::init_uniform(w[0], w[1], gain, rng)
            })
            .collect();
        Self {
            layers,
            embed_dim,
            normalize,
        }
    }

    /// Single identity layer; `encode` returns its input unchanged when
    /// normalization is off.
    pub fn identity(dim: usize, normalize: bool) -> Self {
        Self {
            layers: vec![Linear::identity(dim)],
            embed_dim: dim,
            normalize,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            embed_dim: self.embed_dim,
            normalize: self.normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Config("encoder has no layers".into()))?;
        check_len("encoder output width", self.embed_dim, last.out_dim)?;
        for pair in self.layers.windows(2) {
            check_len("encoder layer chaining", pair[0].out_dim, pair[1].in_dim)?;
        }
        if !self.layers.iter().all(Linear::is_finite) {
            return Err(Error::Numeric {
                context: "encoder params",
                detail: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, input: &[f64]) -> Result<(Vec<f64>, EncodeTape)> {
        check_len("encoder input", self.input_dim(), input.len())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_unchecked(&x);
            let next = if i + 1 < n {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        check_finite("encoder activation", &x)?;

        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut degenerate = false;
        if self.normalize {
            if norm < NORM_FLOOR {
                degenerate = true;
                x.iter_mut().for_each(|v| *v = 0.0);
            } else {
                x.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let tape = EncodeTape {
            inputs,
            pre,
            norm,
            degenerate,
        };
        Ok((x, tape))
    }

    /// Adds the parameter gradient for one sample into `acc` and returns the
    /// gradient with respect to the input.
    pub fn backward_accumulate(
        &self,
        tape: &EncodeTape,
        grad_embedding: &[f64],
        acc: &mut EncoderParams,
    ) -> Result<Vec<f64>> {
        check_len("encoder tape layers", self.layers.len(), tape.num_layers())?;
        check_len("embedding gradient", self.embed_dim, grad_embedding.len())?;
        check_len("gradient accumulator layers", self.layers.len(), acc.layers.len())?;

        let mut g = if !self.normalize {
            grad_embedding.to_vec()
        } else if tape.degenerate {
            vec![0.0; self.embed_dim]
        } else {
            // d(u/|u|) = (I - y yᵀ) / |u|
            let raw = tape.pre.last().expect("non-empty tape");
            let inv = 1.0 / tape.norm;
            let y_dot_g: f64 = raw.iter().zip(grad_embedding).map(|(u, g)| u * inv * g).sum();
            raw.iter()
                .zip(grad_embedding)
                .map(|(u, g)| (g - u * inv * y_dot_g) * inv)
                .collect()
        };

        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (gj, zj) in g.iter_mut().zip(&tape.pre[i]) {
                    if *zj <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            g = self.layers[i].backward_accumulate(&tape.inputs[i], &g, &mut acc.layers[i]);
        }
        Ok(g)
    }

    pub fn encode_backward(&self, tape: &EncodeTape, grad_embedding: &[f64]) -> Result<(EncoderParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let grad_input = self.backward_accumulate(tape, grad_embedding, &mut grads)?;
        Ok((grads, grad_input))
    }
}

impl FlatParams for EncoderParams {
    fn num_params(&self) -> usize {
        layers_num_params(&self.layers)
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        self.layers.iter().for_each(|l| l.write_flat(out));
    }

    fn read_flat(&mut self, src: &[f64]) -> Result<()> {
        layers_read_flat(&mut self.layers, src, "encoder flat params")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = EncoderParams::identity(4, false);
        let v = vec![0.3, -1.2, 5.0, 0.0];
        let (out, _) = params.encode(&v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn two_layer_matches_manual_evaluation() {
        let params = EncoderParams {
            layers: vec![
                Linear {
                    in_dim: 2,
                    out_dim: 3,
                    weight: vec![1.0, -1.0, 0.5, 0.5, -2.0, 1.0],
                    bias: vec![0.0, 0.1, 0.2],
                },
                Linear {
                    in_dim: 3,
                    out_dim: 2,
                    weight: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0],
                    bias: vec![0.5, -0.5],
                },
            ],
            embed_dim: 2,
            normalize: false,
        };
        let x = [0.4, 0.8];
        // Hidden pre-activations: (-0.4, 0.7, 0.2) -> ReLU (0, 0.7, 0.2).
        let h = [0.0, 0.7, 0.2];
        let expected = [
            1.0 * h[0] + 2.0 * h[1] + 3.0 * h[2] + 0.5,
            -h[0] + 0.0 * h[1] + 1.0 * h[2] - 0.5,
        ];
        let (out, _) = params.encode(&x).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_output_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::mlp(6, &[10], 5, true, &mut rng);
        for _ in 0..20 {
            let x = random_input(&mut rng, 6);
            let (out, tape) = params.encode(&x).unwrap();
            if tape.degenerate {
                continue;
            }
            let n: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_norm_gives_zero_vector() {
        let mut params = EncoderParams::identity(3, true);
        params.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        let (out, tape) = params.encode(&[1.0, 2.0, 3.0]).unwrap();
        assert!(tape.degenerate);
        assert_eq!(out, vec![0.0; 3]);
        let (grads, gx) = params.encode_backward(&tape, &[1.0, 1.0, 1.0]).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_shape_error() {
        let params = EncoderParams::identity(3, false);
        assert!(matches!(params.encode(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::mlp(4, &[8], 3, true, &mut rng);
        let (_, tape) = params.encode(&random_input(&mut rng, 4)).unwrap();
        let (grads, gx) = params.encode_backward(&tape, &[0.0; 3]).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = EncoderParams::identity(3, false);
        params.layers[0] = Linear::init_uniform(3, 3, 3.0, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let g = [1.0, -2.0, 0.25];
        let (_, tape) = params.encode(&x).unwrap();
        let (grads, _) = params.encode_backward(&tape, &g).unwrap();
        for o in 0..3 {
            for i in 0..3 {
                assert_eq!(grads.layers[0].weight[o * 3 + i], g[o] * x[i]);
            }
            assert_eq!(grads.layers[0].bias[o], g[o]);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::mlp(5, &[7], 4, true, &mut rng);
        let flat = params.to_flat();
        let mut other = params.zeros_like();
        other.read_flat(&flat).unwrap();
        assert_eq!(params, other);
        assert!(other.read_flat(&flat[1..]).is_err());
    }

    fn loss_of(params: &EncoderParams, x: &[f64], w: &[f64]) -> f64 {
        let (e, _) = params.encode(x).unwrap();
        e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * e.iter().map(|v| v * v).sum::<f64>()
    }

    fn far_from_kinks(params: &EncoderParams, x: &[f64]) -> bool {
        let (_, tape) = params.encode(x).unwrap();
        let n = tape.num_layers();
        tape.norm > 1e-3 && tape.pre[..n - 1].iter().flatten().all(|z| z.abs() > 1e-6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]

        #[test]
        fn backward_matches_central_differences(seed in any::<u64>(), normalize in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = EncoderParams::mlp(4, &[6], 3, normalize, &mut rng);
            for layer in &mut params.layers {
                layer.bias = random_input(&mut rng, layer.out_dim);
            }
            let mut x = random_input(&mut rng, 4);
            while !far_from_kinks(&params, &x) {
                x = random_input(&mut rng, 4);
            }
            let w = random_input(&mut rng, 3);
            let (e, tape) = params.encode(&x).unwrap();
            let upstream: Vec<f64> = e.iter().zip(&w).map(|(a, b)| a + b).collect();
            let (grads, gx) = params.encode_backward(&tape, &upstream).unwrap();

            let h = 1e-5;
            let flat = params.to_flat();
            let analytic = grads.to_flat();
            let mut probe = params.clone();
            for i in 0..flat.len() {
                let mut p = flat.clone();
                p[i] += h;
                probe.read_flat(&p).unwrap();
                let up = loss_of(&probe, &x, &w);
                p[i] -= 2.0 * h;
                probe.read_flat(&p).unwrap();
                let down = loss_of(&probe, &x, &w);
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-12);
                prop_assert!(rel <= 1e-4 || (analytic[i] - numeric).abs() < 1e-9,
                    "param {i}: analytic {} numeric {numeric}", analytic[i]);
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let up = loss_of(&params, &xp, &w);
                xp[i] -= 2.0 * h;
                let down = loss_of(&params, &xp, &w);
                let numeric = (up - down) / (2.0 * h);
                prop_assert!((gx[i] - numeric).abs() <= 1e-4 * (gx[i].abs() + numeric.abs()).max(1e-5));
            }
        }

        #[test]
        fn normalization_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = EncoderParams::mlp(4, &[6], 3, true, &mut rng);
            let mut scaled = params.clone();
            let head = scaled.layers.last_mut().unwrap();
            head.weight.iter_mut().for_each(|w| *w *= c);
            head.bias.iter_mut().for_each(|b| *b *= c);
            let x = random_input(&mut rng, 4);
            let (a, ta) = params.encode(&x).unwrap();
            let (b, _) = scaled.encode(&x).unwrap();
            if !ta.degenerate {
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn encode_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = EncoderParams::mlp(4, &[6], 3, true, &mut rng);
            let x = random_input(&mut rng, 4);
            let (a, _) = params.encode(&x).unwrap();
            let (b, _) = params.encode(&x).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
