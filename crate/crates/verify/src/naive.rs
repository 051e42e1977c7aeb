//! A deliberately plain re-statement of the per-episode objective.
//!
//! Nothing here calls the engine's forward or backward code: the instance
//! holds its own copies of every weight, and the loss is written out
//! directly from the definitions (MLP, optional L2 normalization,
//! prototypes, scaled distances, softmax cross-entropy, Gaussian KL in the
//! regularizer's form, generator network, auxiliary blend).

use crate::real::{sum, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Prior {
    pub mu0: f64,
    pub sigma0: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub enum Scale {
    Fixed(f64),
    /// One scalar variable `alpha = sigma * eps + mu`.
    Global {
        mu: f64,
        sigma: f64,
        eps: f64,
        prior: Option<Prior>,
    },
    /// One variable per embedding dimension.
    Dims {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        eps: Vec<f64>,
        prior: Option<Prior>,
    },
    /// Per-task variables from a one-hidden-layer tanh generator.
    Generated {
        hidden: Layer,
        output: Layer,
        eps: Vec<f64>,
        prior: Option<Prior>,
        lambda: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub layers: Vec<Layer>,
    pub normalize: bool,
    pub distance: Distance,
    pub way: usize,
    pub support: Vec<(Vec<f64>, usize)>,
    pub query: Vec<(Vec<f64>, usize)>,
    pub scale: Scale,
}

/// Addresses one scalar parameter of an [`Instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    EncoderWeight(usize, usize),
    EncoderBias(usize, usize),
    Mu(usize),
    Sigma(usize),
    GenHiddenWeight(usize),
    GenHiddenBias(usize),
    GenOutputWeight(usize),
    GenOutputBias(usize),
}

impl Param {
    pub fn name(&self) -> String {
        match *self {
            Param::EncoderWeight(l, i) => format!("theta.layer{l}.weight[{i}]"),
            Param::EncoderBias(l, i) => format!("theta.layer{l}.bias[{i}]"),
            Param::Mu(i) => format!("mu[{i}]"),
            Param::Sigma(i) => format!("sigma[{i}]"),
            Param::GenHiddenWeight(i) => format!("beta.hidden.weight[{i}]"),
            Param::GenHiddenBias(i) => format!("beta.hidden.bias[{i}]"),
            Param::GenOutputWeight(i) => format!("beta.output.weight[{i}]"),
            Param::GenOutputBias(i) => format!("beta.output.bias[{i}]"),
        }
    }
}

fn affine<T: Real>(layer: &Layer, x: &[T]) -> Vec<T> {
    (0..layer.out_dim)
        .map(|o| {
            let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            sum(row.iter().zip(x).map(|(&w, &xi)| T::of(w) * xi)) + T::of(layer.bias[o])
        })
        .collect()
}

fn sq_norm<T: Real>(v: &[T]) -> T {
    sum(v.iter().map(|&x| x * x))
}

fn weighted_sq<T: Real>(a: &[T], b: &[T], w: &[T]) -> T {
    sum(a.iter().zip(b).zip(w).map(|((&x, &y), &wj)| wj * (x - y) * (x - y)))
}

/// ReLU MLP with linear output, optionally scaled to unit length.
pub fn embed<T: Real>(layers: &[Layer], normalize: bool, x: &[f64]) -> Vec<T> {
    let mut h: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        h = affine(layer, &h);
        if i < last {
            h = h
                .into_iter()
                .map(|v| if v > T::of(0.0) { v } else { T::of(0.0) })
                .collect();
        }
    }
    if normalize {
        let n = sq_norm(&h).sqrt();
        h = h.into_iter().map(|v| v / n).collect();
    }
    h
}

fn softplus<T: Real>(x: T) -> T {
    (T::of(1.0) + x.exp()).ln()
}

impl Instance {
    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn embed<T: Real>(&self, x: &[f64]) -> Vec<T> {
        embed(&self.layers, self.normalize, x)
    }

    /// Cross-entropy summed over queries, with logits `-D(query, c_k)`.
    fn cross_entropy<T: Real>(&self, queries: &[Vec<T>], protos: &[Vec<T>], dist: impl Fn(&[T], &[T]) -> T) -> T {
        sum(queries.iter().zip(&self.query).map(|(e, (_, y))| {
            let d: Vec<T> = protos.iter().map(|c| dist(e, c)).collect();
            let norm = sum(d.iter().map(|&dk| (-dk).exp()));
            d[*y] + norm.ln()
        }))
    }

    fn base_distance<T: Real>(&self, a: &[T], b: &[T]) -> T {
        match self.distance {
            Distance::Euclidean => sum(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y))),
            Distance::Cosine => {
                let dot = sum(a.iter().zip(b).map(|(&x, &y)| x * y));
                T::of(1.0) - dot / (sq_norm(a).sqrt() * sq_norm(b).sqrt())
            }
        }
    }

    fn kl<T: Real>(mu: T, sigma: T, p: &Prior) -> T {
        let s0 = T::of(p.sigma0);
        let dm = mu - T::of(p.mu0);
        (s0 / sigma).ln() + (sigma * sigma + dm * dm) / (T::of(2.0) * s0 * s0)
    }

    pub fn loss<T: Real>(&self) -> T {
        let support: Vec<Vec<T>> = self.support.iter().map(|(x, _)| self.embed(x)).collect();
        let queries: Vec<Vec<T>> = self.query.iter().map(|(x, _)| self.embed(x)).collect();
        let m = self.embed_dim();
        let protos: Vec<Vec<T>> = (0..self.way)
            .map(|k| {
                let members: Vec<&Vec<T>> = support
                    .iter()
                    .zip(&self.support)
                    .filter(|(_, (_, y))| *y == k)
                    .map(|(e, _)| e)
                    .collect();
                let n = T::of(members.len() as f64);
                (0..m).map(|j| sum(members.iter().map(|e| e[j])) / n).collect()
            })
            .collect();
        match &self.scale {
            Scale::Fixed(alpha) => {
                let a = T::of(*alpha);
                self.cross_entropy(&queries, &protos, |x, y| a * self.base_distance(x, y))
            }
            Scale::Global { mu, sigma, eps, prior } => {
                let (mu, sigma) = (T::of(*mu), T::of(*sigma));
                let a = sigma * T::of(*eps) + mu;
                let ce = self.cross_entropy(&queries, &protos, |x, y| a * self.base_distance(x, y));
                ce + prior.map_or(T::of(0.0), |p| T::of(p.weight) * Self::kl(mu, sigma, &p))
            }
            Scale::Dims { mu, sigma, eps, prior } => {
                let alpha: Vec<T> = (0..m).map(|j| T::of(sigma[j]) * T::of(eps[j]) + T::of(mu[j])).collect();
                let ce = self.cross_entropy(&queries, &protos, |x, y| weighted_sq(x, y, &alpha));
                ce + prior.map_or(T::of(0.0), |p| {
                    T::of(p.weight) * sum((0..m).map(|j| Self::kl(T::of(mu[j]), T::of(sigma[j]), &p)))
                })
            }
            Scale::Generated {
                hidden,
                output,
                eps,
                prior,
                lambda,
            } => {
                let all: Vec<&Vec<T>> = support.iter().chain(&queries).collect();
                let count = T::of(all.len() as f64);
                let task: Vec<T> = (0..m).map(|j| sum(all.iter().map(|e| e[j])) / count).collect();
                let h: Vec<T> = affine(hidden, &task).into_iter().map(T::tanh).collect();
                let out = affine(output, &h);
                let mu = &out[..m];
                let sigma: Vec<T> = out[m..].iter().map(|&r| softplus(r) + T::of(0.01)).collect();
                let alpha: Vec<T> = (0..m).map(|j| sigma[j] * T::of(eps[j]) + mu[j]).collect();
                let ce = self.cross_entropy(&queries, &protos, |x, y| weighted_sq(x, y, &alpha));
                let kl = prior.map_or(T::of(0.0), |p| {
                    T::of(p.weight) * sum((0..m).map(|j| Self::kl(mu[j], sigma[j], &p)))
                });
                let ones = vec![T::of(1.0); m];
                let unscaled = self.cross_entropy(&queries, &protos, |x, y| weighted_sq(x, y, &ones));
                let l = T::of(*lambda);
                (T::of(1.0) - l) * (ce + kl) + l * unscaled
            }
        }
    }

    /// Every scalar parameter the objective depends on.
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend((0..layer.weight.len()).map(|i| Param::EncoderWeight(l, i)));
            out.extend((0..layer.bias.len()).map(|i| Param::EncoderBias(l, i)));
        }
        match &self.scale {
            Scale::Fixed(_) => {}
            Scale::Global { .. } => out.extend([Param::Mu(0), Param::Sigma(0)]),
            Scale::Dims { mu, .. } => {
                out.extend((0..mu.len()).map(Param::Mu));
                out.extend((0..mu.len()).map(Param::Sigma));
            }
            Scale::Generated { hidden, output, .. } => {
                out.extend((0..hidden.weight.len()).map(Param::GenHiddenWeight));
                out.extend((0..hidden.bias.len()).map(Param::GenHiddenBias));
                out.extend((0..output.weight.len()).map(Param::GenOutputWeight));
                out.extend((0..output.bias.len()).map(Param::GenOutputBias));
            }
        }
        out
    }

    pub fn param_mut(&mut self, p: Param) -> &mut f64 {
        match (p, &mut self.scale) {
            (Param::EncoderWeight(l, i), _) => &mut self.layers[l].weight[i],
            (Param::EncoderBias(l, i), _) => &mut self.layers[l].bias[i],
            (Param::Mu(_), Scale::Global { mu, .. }) => mu,
            (Param::Sigma(_), Scale::Global { sigma, .. }) => sigma,
            (Param::Mu(i), Scale::Dims { mu, .. }) => &mut mu[i],
            (Param::Sigma(i), Scale::Dims { sigma, .. }) => &mut sigma[i],
            (Param::GenHiddenWeight(i), Scale::Generated { hidden, .. }) => &mut hidden.weight[i],
            (Param::GenHiddenBias(i), Scale::Generated { hidden, .. }) => &mut hidden.bias[i],
            (Param::GenOutputWeight(i), Scale::Generated { output, .. }) => &mut output.weight[i],
            (Param::GenOutputBias(i), Scale::Generated { output, .. }) => &mut output.bias[i],
            (p, _) => panic!("parameter {p:?} does not exist for this scaling"),
        }
    }

    /// Smallest |pre-activation| over hidden units and smallest embedding
    /// norm across the episode: distance to the objective's kinks.
    pub fn kink_margin(&self) -> (f64, f64) {
        let mut min_pre = f64::INFINITY;
        let mut min_norm = f64::INFINITY;
        for (x, _) in self.support.iter().chain(&self.query) {
            let mut h = x.clone();
            let last = self.layers.len() - 1;
            for (i, layer) in self.layers.iter().enumerate() {
                h = affine::<f64>(layer, &h);
                if i < last {
                    min_pre = h.iter().fold(min_pre, |m, v| m.min(v.abs()));
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            min_norm = min_norm.min(sq_norm(&h).sqrt());
        }
        (min_pre, min_norm)
    }
}
