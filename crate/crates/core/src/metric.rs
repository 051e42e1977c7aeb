//! Prototypes, distances, scaled softmax and the episode cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Norms below this make the cosine distance undefined.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    Cosine,
}

/// Metric scaling applied to distances: one temperature for every dimension,
/// or a diagonal quadratic-form weight per embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scaling {
    Global(f64),
    Dimensional(Vec<f64>),
}

impl Scaling {
    pub fn is_finite(&self) -> bool {
        match self {
            Scaling::Global(a) => a.is_finite(),
            Scaling::Dimensional(v) => v.iter().all(|a| a.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `[K][M]`.
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn way(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

pub fn compute_prototypes(embeddings: &[Vec<f64>], labels: &[usize], way: usize) -> Result<PrototypeSet> {
    check_len("prototype labels", embeddings.len(), labels.len())?;
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut prototypes = vec![vec![0.0; dim]; way];
    let mut counts = vec![0usize; way];
    for (e, &y) in embeddings.iter().zip(labels) {
        if y >= way {
            return Err(Error::Contract(format!("label {y} out of range for {way}-way episode")));
        }
        check_len("prototype embedding", dim, e.len())?;
        counts[y] += 1;
        prototypes[y].iter_mut().zip(e).for_each(|(p, v)| *p += v);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("class {k} has no support embeddings")));
    }
    for (p, &c) in prototypes.iter_mut().zip(&counts) {
        p.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(PrototypeSet { prototypes, counts })
}

/// Spreads prototype gradients back onto the support embeddings that were averaged.
pub fn prototypes_backward(grad_prototypes: &[Vec<f64>], labels: &[usize], protos: &PrototypeSet) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&y| {
            let inv = 1.0 / protos.counts[y] as f64;
            grad_prototypes[y].iter().map(|g| g * inv).collect()
        })
        .collect()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("squared euclidean", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine distance", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Err(Error::Numeric {
            context: "cosine distance",
            detail: format!("near-zero norm ({na:e}, {nb:e})"),
        });
    }
    Ok(1.0 - (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `Σ_m s_m (a_m - b_m)²`.
pub fn dimensional_distance(a: &[f64], b: &[f64], weights: &[f64]) -> Result<f64> {
    check_len("dimensional distance", a.len(), b.len())?;
    check_len("dimensional distance weights", a.len(), weights.len())?;
    Ok(a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), s)| s * (x - y) * (x - y))
        .sum())
}

/// Softmax over `-alpha * d`, max-shifted.
pub fn scaled_class_probs(distances: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !alpha.is_finite() || distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric {
            context: "scaled softmax",
            detail: format!("alpha {alpha}, distances {distances:?}"),
        });
    }
    let (probs, _) = softmax_neg(distances.iter().map(|d| alpha * d));
    Ok(probs)
}

/// Returns `softmax(-x)` and `logsumexp(-x)`.
fn softmax_neg(scaled: impl Iterator<Item = f64> + Clone) -> (Vec<f64>, f64) {
    let max_logit = scaled.clone().map(|x| -x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.map(|x| (-x - max_logit).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max_logit + total.ln();
    (exps.into_iter().map(|e| e / total).collect(), lse)
}

/// Forward state of the query cross-entropy for one episode, kept so the
/// scaling gradients and the embedding gradients reuse the same quantities.
#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    /// `-Σ_q log p(true class)`.
    pub loss: f64,
    /// `[q][K]` class probabilities at the given scaling.
    pub probs: Vec<Vec<f64>>,
    /// `[q][K]` unscaled distances: squared Euclidean or `1 - cos`.
    pub distances: Vec<Vec<f64>>,
    /// `[q][K][M]` squared coordinate differences; only for dimensional scaling.
    pub sq_diffs: Option<Vec<Vec<Vec<f64>>>>,
}

impl EpisodeLoss {
    pub fn num_correct(&self, labels: &[usize]) -> usize {
        self.probs
            .iter()
            .zip(labels)
            .filter(|(p, &y)| argmax_lowest(p) == y)
            .count()
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn check_scaling(scaling: &Scaling, kind: DistanceKind, dim: usize) -> Result<()> {
    match scaling {
        Scaling::Global(_) => {}
        Scaling::Dimensional(w) => {
            if kind == DistanceKind::Cosine {
                return Err(Error::Config("dimensional scaling requires euclidean distance".into()));
            }
            check_len("scaling vector", dim, w.len())?;
        }
    }
    if !scaling.is_finite() {
        return Err(Error::Numeric {
            context: "scaling",
            detail: format!("{scaling:?}"),
        });
    }
    Ok(())
}

fn base_distance(kind: DistanceKind, a: &[f64], b: &[f64]) -> Result<f64> {
    match kind {
        DistanceKind::Euclidean => squared_euclidean(a, b),
        DistanceKind::Cosine => cosine_distance(a, b),
    }
}

/// Scaled distances from one embedding to every prototype.
pub fn scaled_distances(
    query: &[f64],
    protos: &PrototypeSet,
    scaling: &Scaling,
    kind: DistanceKind,
) -> Result<Vec<f64>> {
    check_scaling(scaling, kind, protos.dim())?;
    protos
        .prototypes
        .iter()
        .map(|c| match scaling {
            Scaling::Global(alpha) => Ok(alpha * base_distance(kind, query, c)?),
            Scaling::Dimensional(w) => dimensional_distance(query, c, w),
        })
        .collect()
}

pub fn episode_loss(
    queries: &[Vec<f64>],
    labels: &[usize],
    protos: &PrototypeSet,
    scaling: &Scaling,
    kind: DistanceKind,
) -> Result<EpisodeLoss> {
    check_len("query labels", queries.len(), labels.len())?;
    if queries.is_empty() {
        return Err(Error::Contract("episode has no queries".into()));
    }
    check_scaling(scaling, kind, protos.dim())?;
    let way = protos.way();
    let mut out = EpisodeLoss {
        loss: 0.0,
        probs: Vec::with_capacity(queries.len()),
        distances: Vec::with_capacity(queries.len()),
        sq_diffs: matches!(scaling, Scaling::Dimensional(_)).then(|| Vec::with_capacity(queries.len())),
    };
    for (e, &y) in queries.iter().zip(labels) {
        if y >= way {
            return Err(Error::Contract(format!("query label {y} out of range for {way}-way episode")));
        }
        let (scaled, base): (Vec<f64>, Vec<f64>) = match scaling {
            Scaling::Global(alpha) => {
                let base = protos
                    .prototypes
                    .iter()
                    .map(|c| base_distance(kind, e, c))
                    .collect::<Result<Vec<_>>>()?;
                (base.iter().map(|d| alpha * d).collect(), base)
            }
            Scaling::Dimensional(w) => {
                check_len("query embedding", w.len(), e.len())?;
                let sq: Vec<Vec<f64>> = protos
                    .prototypes
                    .iter()
                    .map(|c| e.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).collect())
                    .collect();
                let scaled = sq.iter().map(|s| s.iter().zip(w).map(|(d, wi)| d * wi).sum()).collect();
                let base = sq.iter().map(|s| s.iter().sum()).collect();
                if let Some(all) = out.sq_diffs.as_mut() {
                    all.push(sq);
                }
                (scaled, base)
            }
        };
        let (probs, lse) = softmax_neg(scaled.iter().copied());
        // -log p_y = D_y + logsumexp(-D)
        out.loss += scaled[y] + lse;
        out.probs.push(probs);
        out.distances.push(base);
    }
    if !out.loss.is_finite() {
        return Err(Error::Numeric {
            context: "episode loss",
            detail: format!("loss {}", out.loss),
        });
    }
    Ok(out)
}

/// Gradients of `weight * loss` with respect to the query embeddings and the prototypes.
#[derive(Debug, Clone)]
pub struct EmbeddingGrads {
    pub queries: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
}

pub fn episode_loss_backward(
    forward: &EpisodeLoss,
    queries: &[Vec<f64>],
    labels: &[usize],
    protos: &PrototypeSet,
    scaling: &Scaling,
    kind: DistanceKind,
    weight: f64,
) -> Result<EmbeddingGrads> {
    check_len("forward queries", forward.probs.len(), queries.len())?;
    let dim = protos.dim();
    let mut grads = EmbeddingGrads {
        queries: vec![vec![0.0; dim]; queries.len()],
        prototypes: vec![vec![0.0; dim]; protos.way()],
    };
    if weight == 0.0 {
        return Ok(grads);
    }
    for (j, (e, &y)) in queries.iter().zip(labels).enumerate() {
        let gq = &mut grads.queries[j];
        for (k, c) in protos.prototypes.iter().enumerate() {
            // dL/dD_k = 1[k = y] - p_k
            let g = weight * (f64::from(u8::from(k == y)) - forward.probs[j][k]);
            if g == 0.0 {
                continue;
            }
            let gc = &mut grads.prototypes[k];
            match (scaling, kind) {
                (Scaling::Global(alpha), DistanceKind::Euclidean) => {
                    let f = 2.0 * alpha * g;
                    for m in 0..dim {
                        let t = f * (e[m] - c[m]);
                        gq[m] += t;
                        gc[m] -= t;
                    }
                }
                (Scaling::Dimensional(w), _) => {
                    for m in 0..dim {
                        let t = 2.0 * g * w[m] * (e[m] - c[m]);
                        gq[m] += t;
                        gc[m] -= t;
                    }
                }
                (Scaling::Global(alpha), DistanceKind::Cosine) => {
                    let (ne, nc) = (norm(e), norm(c));
                    let cos = dot(e, c) / (ne * nc);
                    // D = alpha (1 - cos)
                    let f = -alpha * g;
                    for m in 0..dim {
                        gq[m] += f * (c[m] / (ne * nc) - cos * e[m] / (ne * ne));
                        gc[m] += f * (e[m] / (ne * nc) - cos * c[m] / (nc * nc));
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Nearest prototype under the scaled distance; ties go to the lowest index.
pub fn predict(query: &[f64], protos: &PrototypeSet, scaling: &Scaling, kind: DistanceKind) -> Result<usize> {
    Ok(argmin_lowest(&scaled_distances(query, protos, scaling, kind)?))
}
