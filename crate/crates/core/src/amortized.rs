//! Task-conditional scaling: a one-hidden-layer generator maps the task
//! prototype (mean embedding of all support and query points) to a
//! per-dimension Gaussian posterior `(mu_i, sigma_i)`.
//!
//! Early in training the embedding is not yet informative, so the objective
//! blends the amortized loss with the unscaled prototypical loss through a
//! weight `lambda` that decays linearly from 1 to 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linear::{FlatParams, Linear};
use crate::variational::{ScaleKind, SigmaMode, VariationalPosterior, SIGMA_FLOOR};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `C -> tanh(W1 C + b1) -> W2 h + b2`; the first `M` outputs are `mu_i`,
/// the last `M` are mapped to `sigma_i = softplus(.) + SIGMA_FLOOR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub hidden: Linear,
    pub output: Linear,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratorTape {
    input: Vec<f64>,
    hidden_act: Vec<f64>,
    raw_sigma: Vec<f64>,
    fingerprint: u64,
}

impl GeneratorParams {
    /// Small random weights; output biases put the initial posterior at
    /// `(mu_init, sigma_init)` for every task.
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, hidden: usize, mu_init: f64, sigma_init: f64, rng: &mut R) -> Self {
        let hidden_layer = Linear::init_uniform(embed_dim, hidden, 3.0, rng);
        let mut output = Linear::init_uniform(hidden, 2 * embed_dim, 3.0, rng);
        output.weight.iter_mut().for_each(|w| *w *= 0.1);
        let raw = softplus_inverse((sigma_init - SIGMA_FLOOR).max(1e-6));
        for m in 0..embed_dim {
            output.bias[m] = mu_init;
            output.bias[embed_dim + m] = raw;
        }
        Self {
            hidden: hidden_layer,
            output,
            embed_dim,
        }
    }

    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::zeros(embed_dim, hidden),
            output: Linear::zeros(hidden, 2 * embed_dim),
            embed_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.embed_dim, self.hidden.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("generator input", self.embed_dim, self.hidden.in_dim)?;
        check_len("generator chaining", self.hidden.out_dim, self.output.in_dim)?;
        check_len("generator output", 2 * self.embed_dim, self.output.out_dim)?;
        if !(self.hidden.is_finite() && self.output.is_finite()) {
            return Err(Error::Numeric {
                context: "generator params",
                detail: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.hidden.weight.iter().chain(&self.hidden.bias).chain(&self.output.weight).chain(&self.output.bias) {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn generate_posterior(&self, task_prototype: &[f64]) -> Result<(VariationalPosterior, GeneratorTape)> {
        check_len("task prototype", self.embed_dim, task_prototype.len())?;
        let hidden_act: Vec<f64> = self.hidden.forward_unchecked(task_prototype).into_iter().map(f64::tanh).collect();
        let out = self.output.forward_unchecked(&hidden_act);
        check_finite("generator output", &out)?;
        let (mu, raw_sigma) = out.split_at(self.embed_dim);
        let post = VariationalPosterior {
            kind: ScaleKind::Dimensional,
            mu: mu.to_vec(),
            sigma: raw_sigma.iter().map(|&r| softplus(r) + SIGMA_FLOOR).collect(),
            sigma_mode: SigmaMode::Learned,
        };
        let tape = GeneratorTape {
            input: task_prototype.to_vec(),
            hidden_act,
            raw_sigma: raw_sigma.to_vec(),
            fingerprint: self.fingerprint(),
        };
        Ok((post, tape))
    }

    /// Backpropagates `∂L/∂mu_i` and `∂L/∂sigma_i` to the generator weights
    /// (accumulated into `acc`) and returns `∂L/∂C_i`.
    pub fn backward_accumulate(
        &self,
        tape: &GeneratorTape,
        grad_mu: &[f64],
        grad_sigma: &[f64],
        acc: &mut GeneratorParams,
    ) -> Result<Vec<f64>> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::Contract("generator tape does not match current parameters".into()));
        }
        check_len("generator mu gradient", self.embed_dim, grad_mu.len())?;
        check_len("generator sigma gradient", self.embed_dim, grad_sigma.len())?;
        let mut grad_out = Vec::with_capacity(2 * self.embed_dim);
        grad_out.extend_from_slice(grad_mu);
        grad_out.extend(grad_sigma.iter().zip(&tape.raw_sigma).map(|(g, &r)| g * sigmoid(r)));
        let mut grad_hidden = self.output.backward_accumulate(&tape.hidden_act, &grad_out, &mut acc.output);
        grad_hidden
            .iter_mut()
            .zip(&tape.hidden_act)
            .for_each(|(g, a)| *g *= 1.0 - a * a);
        Ok(self.hidden.backward_accumulate(&tape.input, &grad_hidden, &mut acc.hidden))
    }

    pub fn generator_backward(
        &self,
        tape: &GeneratorTape,
        grad_mu: &[f64],
        grad_sigma: &[f64],
    ) -> Result<(GeneratorParams, Vec<f64>)> {
        let mut acc = self.zeros_like();
        let grad_input = self.backward_accumulate(tape, grad_mu, grad_sigma, &mut acc)?;
        Ok((acc, grad_input))
    }
}

impl FlatParams for GeneratorParams {
    fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        self.hidden.write_flat(out);
        self.output.write_flat(out);
    }

    fn read_flat(&mut self, src: &[f64]) -> Result<()> {
        check_len("generator flat params", self.num_params(), src.len())?;
        let n = self.hidden.read_flat(src);
        self.output.read_flat(&src[n..]);
        Ok(())
    }
}

/// Mean of every support and query embedding of the episode.
pub fn task_prototype<'a>(embeddings: impl IntoIterator<Item = &'a Vec<f64>>) -> Result<Vec<f64>> {
    let mut iter = embeddings.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Contract("task prototype of an empty episode".into()))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for e in iter {
        check_len("task prototype embedding", sum.len(), e.len())?;
        sum.iter_mut().zip(e).for_each(|(s, v)| *s += v);
        count += 1;
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(sum)
}

/// Linear decay of the auxiliary weight: `lambda = max(0, 1 - steps / gamma)`.
///
/// `steps` counts decay calls (one per epoch in training) and lambda is
/// recomputed from it, so no rounding error accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSchedule {
    pub gamma: u64,
    pub step_count: u64,
}

impl AuxSchedule {
    pub fn new(gamma: u64) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::Config("gamma must be a positive integer".into()));
        }
        Ok(Self { gamma, step_count: 0 })
    }

    pub fn lambda(&self) -> f64 {
        if self.step_count >= self.gamma {
            0.0
        } else {
            1.0 - self.step_count as f64 / self.gamma as f64
        }
    }

    pub fn decay(self) -> Self {
        if self.lambda() == 0.0 {
            self
        } else {
            Self {
                step_count: self.step_count + 1,
                ..self
            }
        }
    }
}

/// `(1 - lambda) * amortized + lambda * unscaled`, exact at both endpoints.
pub fn aux_loss(lambda: f64, amortized: f64, unscaled: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(if lambda == 0.0 {
        amortized
    } else if lambda == 1.0 {
        unscaled
    } else {
        (1.0 - lambda) * amortized + lambda * unscaled
    })
}
