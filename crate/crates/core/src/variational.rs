//! Gaussian variational posterior over the metric scaling variable.
//!
//! The scaling variable is either one scalar shared by every embedding
//! dimension or one entry per dimension. Training draws a single
//! `alpha = sigma * eps + mu` per episode; the gradients with respect to
//! `mu` and `sigma` follow from the chain rule through that draw and reuse
//! the class probabilities and distances of the forward pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::metric::Scaling;

/// Lower bound applied to a learned sigma after every update.
pub const SIGMA_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    #[default]
    Fixed,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    Global,
    Dimensional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub kind: ScaleKind,
    /// Length 1 for global scaling, `M` for dimensional.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_mode: SigmaMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianPrior {
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for GaussianPrior {
    fn default() -> Self {
        Self { mu0: 1.0, sigma0: 1.0 }
    }
}

/// The KL regularizer as it enters the training objective: `weight * KL`.
///
/// `None` in its place is the flat-prior limit `sigma0 -> inf`, where the
/// regularizer and its gradients vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorPenalty {
    pub prior: GaussianPrior,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSample {
    pub alpha: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub episode_id: u64,
}

impl ScalingSample {
    pub fn scaling(&self, kind: ScaleKind) -> Scaling {
        to_scaling(kind, &self.alpha)
    }
}

pub fn to_scaling(kind: ScaleKind, values: &[f64]) -> Scaling {
    match kind {
        ScaleKind::Global => Scaling::Global(values[0]),
        ScaleKind::Dimensional => Scaling::Dimensional(values.to_vec()),
    }
}

impl VariationalPosterior {
    pub fn global(mu: f64, sigma: f64, sigma_mode: SigmaMode) -> Self {
        Self {
            kind: ScaleKind::Global,
            mu: vec![mu],
            sigma: vec![sigma],
            sigma_mode,
        }
    }

    pub fn dimensional(dim: usize, mu: f64, sigma: f64, sigma_mode: SigmaMode) -> Self {
        Self {
            kind: ScaleKind::Dimensional,
            mu: vec![mu; dim],
            sigma: vec![sigma; dim],
            sigma_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Scaling used at meta-test time: the posterior mean.
    pub fn mean_scaling(&self) -> Scaling {
        to_scaling(self.kind, &self.mu)
    }

    /// Sigma must be positive, except that a fixed sigma of exactly zero is
    /// allowed (the point-mass posterior of plain joint training).
    pub fn validate(&self) -> Result<()> {
        check_len("posterior sigma", self.mu.len(), self.sigma.len())?;
        if self.kind == ScaleKind::Global {
            check_len("global posterior", 1, self.mu.len())?;
        }
        let sigma_ok = |s: f64| s > 0.0 || (s == 0.0 && self.sigma_mode == SigmaMode::Fixed);
        if self.mu.iter().any(|m| !m.is_finite()) || !self.sigma.iter().all(|&s| s.is_finite() && sigma_ok(s)) {
            return Err(Error::Numeric {
                context: "variational posterior",
                detail: format!("mu {:?} sigma {:?}", self.mu, self.sigma),
            });
        }
        Ok(())
    }
}

/// One reparameterized draw for an episode; every query of the episode uses it.
pub fn sample_alpha<R: Rng + ?Sized>(post: &VariationalPosterior, episode_id: u64, rng: &mut R) -> ScalingSample {
    let epsilon: Vec<f64> = (0..post.dim()).map(|_| StandardNormal.sample(rng)).collect();
    alpha_from_epsilon(post, epsilon, episode_id)
}

/// Like [`sample_alpha`] but redraws until every component of alpha is positive.
pub fn sample_alpha_positive<R: Rng + ?Sized>(
    post: &VariationalPosterior,
    episode_id: u64,
    rng: &mut R,
) -> Result<ScalingSample> {
    for _ in 0..1000 {
        let s = sample_alpha(post, episode_id, rng);
        if s.alpha.iter().all(|&a| a > 0.0) {
            return Ok(s);
        }
    }
    Err(Error::Sampling(format!(
        "no positive alpha in 1000 draws from mu {:?} sigma {:?}",
        post.mu, post.sigma
    )))
}

pub fn alpha_from_epsilon(post: &VariationalPosterior, epsilon: Vec<f64>, episode_id: u64) -> ScalingSample {
    let alpha = post
        .sigma
        .iter()
        .zip(&post.mu)
        .zip(&epsilon)
        .map(|((s, m), e)| s * e + m)
        .collect();
    ScalingSample {
        alpha,
        epsilon,
        episode_id,
    }
}

/// `log(sigma0/sigma) + (sigma² + (mu-mu0)²) / (2 sigma0²)` for one dimension.
///
/// This is the Gaussian KL plus 1/2; the constant has no gradient and is kept
/// in reported loss values.
pub fn kl_term_scalar(mu: f64, sigma: f64, prior: &GaussianPrior) -> f64 {
    let s0 = prior.sigma0;
    (s0 / sigma).ln() + (sigma * sigma + (mu - prior.mu0).powi(2)) / (2.0 * s0 * s0)
}

pub fn kl_term(post: &VariationalPosterior, prior: &GaussianPrior) -> f64 {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(&m, &s)| kl_term_scalar(m, s, prior))
        .sum()
}

/// `∂KL/∂mu` and `∂KL/∂sigma` for one dimension.
pub fn kl_grad_scalar(mu: f64, sigma: f64, prior: &GaussianPrior) -> (f64, f64) {
    let v0 = prior.sigma0 * prior.sigma0;
    ((mu - prior.mu0) / v0, -1.0 / sigma + sigma / v0)
}

/// Derivative of the episode cross-entropy with respect to a global scale:
/// `Σ_q (d(x, c_y) - Σ_k p_k d(x, c_k))`.
pub fn data_term(probs: &[Vec<f64>], distances: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_len("probs/distances", probs.len(), distances.len())?;
    check_len("probs/labels", probs.len(), labels.len())?;
    let mut total = 0.0;
    for ((p, d), &y) in probs.iter().zip(distances).zip(labels) {
        check_len("class count", p.len(), d.len())?;
        let expected: f64 = p.iter().zip(d).map(|(pk, dk)| pk * dk).sum();
        total += d[y] - expected;
    }
    Ok(total)
}

/// Per-dimension analogue of [`data_term`] over `[q][K][M]` squared differences.
pub fn data_term_vec(probs: &[Vec<f64>], sq_diffs: &[Vec<Vec<f64>>], labels: &[usize]) -> Result<Vec<f64>> {
    check_len("probs/sq_diffs", probs.len(), sq_diffs.len())?;
    check_len("probs/labels", probs.len(), labels.len())?;
    let dim = sq_diffs.first().and_then(|q| q.first()).map_or(0, Vec::len);
    let mut total = vec![0.0; dim];
    for ((p, sq), &y) in probs.iter().zip(sq_diffs).zip(labels) {
        check_len("class count", p.len(), sq.len())?;
        for (k, (pk, diff)) in p.iter().zip(sq).enumerate() {
            let coeff = f64::from(u8::from(k == y)) - pk;
            total.iter_mut().zip(diff).for_each(|(t, d)| *t += coeff * d);
        }
    }
    Ok(total)
}

fn require_global(post: &VariationalPosterior) -> Result<()> {
    if post.kind == ScaleKind::Global {
        Ok(())
    } else {
        Err(Error::Contract("scalar gradient requested for a dimensional posterior".into()))
    }
}

fn require_learned(post: &VariationalPosterior) -> Result<()> {
    if post.sigma_mode == SigmaMode::Learned {
        Ok(())
    } else {
        Err(Error::Contract("sigma gradient requested with sigma_mode = fixed".into()))
    }
}

/// `∂L/∂mu` for global scaling, with `L` = episode cross-entropy + weighted KL.
pub fn grad_mu(
    probs: &[Vec<f64>],
    distances: &[Vec<f64>],
    labels: &[usize],
    post: &VariationalPosterior,
    penalty: Option<&PriorPenalty>,
) -> Result<f64> {
    require_global(post)?;
    let data = data_term(probs, distances, labels)?;
    Ok(data + penalty.map_or(0.0, |p| p.weight * kl_grad_scalar(post.mu[0], post.sigma[0], &p.prior).0))
}

pub fn grad_sigma(
    probs: &[Vec<f64>],
    distances: &[Vec<f64>],
    labels: &[usize],
    epsilon: f64,
    post: &VariationalPosterior,
    penalty: Option<&PriorPenalty>,
) -> Result<f64> {
    require_global(post)?;
    require_learned(post)?;
    let data = data_term(probs, distances, labels)?;
    Ok(epsilon * data + penalty.map_or(0.0, |p| p.weight * kl_grad_scalar(post.mu[0], post.sigma[0], &p.prior).1))
}

pub fn grad_mu_vec(
    probs: &[Vec<f64>],
    sq_diffs: &[Vec<Vec<f64>>],
    labels: &[usize],
    post: &VariationalPosterior,
    penalty: Option<&PriorPenalty>,
) -> Result<Vec<f64>> {
    let data = data_term_vec(probs, sq_diffs, labels)?;
    check_len("posterior dim", post.dim(), data.len())?;
    Ok(data
        .iter()
        .zip(post.mu.iter().zip(&post.sigma))
        .map(|(d, (&m, &s))| d + penalty.map_or(0.0, |p| p.weight * kl_grad_scalar(m, s, &p.prior).0))
        .collect())
}

pub fn grad_sigma_vec(
    probs: &[Vec<f64>],
    sq_diffs: &[Vec<Vec<f64>>],
    labels: &[usize],
    epsilon: &[f64],
    post: &VariationalPosterior,
    penalty: Option<&PriorPenalty>,
) -> Result<Vec<f64>> {
    require_learned(post)?;
    let data = data_term_vec(probs, sq_diffs, labels)?;
    check_len("posterior dim", post.dim(), data.len())?;
    check_len("epsilon", post.dim(), epsilon.len())?;
    Ok(data
        .iter()
        .zip(epsilon)
        .zip(post.mu.iter().zip(&post.sigma))
        .map(|((d, e), (&m, &s))| e * d + penalty.map_or(0.0, |p| p.weight * kl_grad_scalar(m, s, &p.prior).1))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrads {
    pub mu: Vec<f64>,
    /// Present only in learned-sigma mode.
    pub sigma: Option<Vec<f64>>,
}

/// Gradient step on `mu` (and `sigma` when learned, then floored at
/// [`SIGMA_FLOOR`]).
pub fn apply_update(post: &VariationalPosterior, grads: &PosteriorGrads, l_psi: f64) -> Result<VariationalPosterior> {
    check_len("mu gradient", post.dim(), grads.mu.len())?;
    let mut next = post.clone();
    next.mu.iter_mut().zip(&grads.mu).for_each(|(m, g)| *m -= l_psi * g);
    if post.sigma_mode == SigmaMode::Learned {
        let gs = grads
            .sigma
            .as_ref()
            .ok_or_else(|| Error::Contract("learned sigma needs a sigma gradient".into()))?;
        check_len("sigma gradient", post.dim(), gs.len())?;
        next.sigma
            .iter_mut()
            .zip(gs)
            .for_each(|(s, g)| *s = (*s - l_psi * g).max(SIGMA_FLOOR));
    }
    if next.mu.iter().chain(&next.sigma).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: "posterior update",
            detail: format!(
                "non-finite posterior after step: mu {:?} sigma {:?} grads {:?} l_psi {l_psi}",
                next.mu, next.sigma, grads
            ),
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{compute_prototypes, episode_loss, DistanceKind};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_or_zero_noise_returns_mu() {
        let post = VariationalPosterior::global(3.5, 0.0, SigmaMode::Fixed);
        post.validate().unwrap();
        let s = sample_alpha(&post, 0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.alpha, vec![3.5]);
        let post = VariationalPosterior::dimensional(3, 2.0, 0.7, SigmaMode::Learned);
        let s = alpha_from_epsilon(&post, vec![0.0; 3], 4);
        assert_eq!(s.alpha, vec![2.0; 3]);
    }

    #[test]
    fn learned_sigma_must_be_positive() {
        assert!(VariationalPosterior::global(1.0, 0.0, SigmaMode::Learned).validate().is_err());
        assert!(VariationalPosterior::global(1.0, -0.1, SigmaMode::Fixed).validate().is_err());
    }

    #[test]
    fn monte_carlo_moments_of_sample() {
        let post = VariationalPosterior::global(100.0, 0.2, SigmaMode::Fixed);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            let a = sample_alpha(&post, i, &mut rng).alpha[0] - 100.0;
            sum += a;
            sum_sq += a * a;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-3, "mean offset {mean}");
        assert!((std - 0.2).abs() < 1e-3, "std {std}");
    }

    #[test]
    fn positive_sampling_rejects_negative_draws() {
        let post = VariationalPosterior::global(0.1, 1.0, SigmaMode::Fixed);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..200 {
            assert!(sample_alpha_positive(&post, i, &mut rng).unwrap().alpha[0] > 0.0);
        }
    }

    #[test]
    fn kl_term_values() {
        let prior = GaussianPrior::default();
        let at_prior = VariationalPosterior::dimensional(4, 1.0, 1.0, SigmaMode::Fixed);
        assert!((kl_term(&at_prior, &prior) - 2.0).abs() < 1e-15);
        let post = VariationalPosterior::global(100.0, 0.2, SigmaMode::Fixed);
        let expected = 5f64.ln() + (0.04 + 9801.0) / 2.0;
        assert!((kl_term(&post, &prior) - expected).abs() < 1e-9);
        assert!((expected - 4902.1294).abs() < 1e-4);
        assert_eq!(kl_grad_scalar(1.0, 0.5, &prior).0, 0.0);
    }

    #[test]
    fn saturated_classifier_leaves_prior_gradient() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dists = vec![vec![0.2, 1.5], vec![0.9, 0.1]];
        let labels = [0, 1];
        let post = VariationalPosterior::global(7.0, 0.3, SigmaMode::Learned);
        let pen = PriorPenalty {
            prior: GaussianPrior { mu0: 1.0, sigma0: 2.0 },
            weight: 1.0,
        };
        let g = grad_mu(&probs, &dists, &labels, &post, Some(&pen)).unwrap();
        assert!((g - 6.0 / 4.0).abs() < 1e-15);
        let gs = grad_sigma(&probs, &dists, &labels, 0.8, &post, Some(&pen)).unwrap();
        assert!((gs - (-1.0 / 0.3 + 0.3 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_distances_give_zero_data_term() {
        let probs = vec![vec![0.2, 0.5, 0.3]];
        let dists = vec![vec![0.4, 0.4, 0.4]];
        assert!(data_term(&probs, &dists, &[2]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sigma_gradient_vanishes_at_prior_without_noise() {
        let prior = GaussianPrior { mu0: 0.0, sigma0: 1.7 };
        let post = VariationalPosterior::global(0.0, 1.7, SigmaMode::Learned);
        let pen = PriorPenalty { prior, weight: 1.0 };
        let g = grad_sigma(&[vec![0.5, 0.5]], &[vec![0.0, 1.0]], &[0], 0.0, &post, Some(&pen)).unwrap();
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn sigma_gradient_in_fixed_mode_is_contract_error() {
        let post = VariationalPosterior::global(1.0, 0.2, SigmaMode::Fixed);
        let r = grad_sigma(&[vec![1.0]], &[vec![0.0]], &[0], 0.3, &post, None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn two_class_gradient_matches_derivative() {
        // d = (0, 1), true class 0, alpha = 1: p = (0.73106, 0.26894).
        // L(alpha) = log(1 + e^-alpha), dL/dalpha = -0.26894.
        let post = VariationalPosterior::global(1.0, 0.2, SigmaMode::Fixed);
        let probs = vec![scaled_probs(&[0.0, 1.0], 1.0)];
        let pen = PriorPenalty {
            prior: GaussianPrior::default(),
            weight: 1.0,
        };
        let g = grad_mu(&probs, &[vec![0.0, 1.0]], &[0], &post, Some(&pen)).unwrap();
        assert!((g + 0.268_941_421_369_995).abs() < 1e-12);
        let loss = |a: f64| (1.0 + (-a).exp()).ln() + kl_term_scalar(a, 0.2, &GaussianPrior::default());
        let h = 1e-5;
        let fd = (loss(1.0 + h) - loss(1.0 - h)) / (2.0 * h);
        assert!((g - fd).abs() / (g.abs() + fd.abs()) < 1e-5);
    }

    fn scaled_probs(d: &[f64], a: f64) -> Vec<f64> {
        crate::metric::scaled_class_probs(d, a).unwrap()
    }

    #[test]
    fn dimensional_collapse_to_scalar() {
        let probs = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let sq = vec![vec![vec![0.5], vec![1.2]], vec![vec![0.8], vec![0.1]]];
        let dists = vec![vec![0.5, 1.2], vec![0.8, 0.1]];
        let labels = [0, 1];
        let pen = PriorPenalty {
            prior: GaussianPrior { mu0: 2.0, sigma0: 3.0 },
            weight: 0.5,
        };
        let g = VariationalPosterior::global(4.0, 0.6, SigmaMode::Learned);
        let d = VariationalPosterior {
            kind: ScaleKind::Dimensional,
            ..g.clone()
        };
        let gm = grad_mu(&probs, &dists, &labels, &g, Some(&pen)).unwrap();
        let gmv = grad_mu_vec(&probs, &sq, &labels, &d, Some(&pen)).unwrap();
        assert_eq!(vec![gm], gmv);
        let gs = grad_sigma(&probs, &dists, &labels, -0.4, &g, Some(&pen)).unwrap();
        let gsv = grad_sigma_vec(&probs, &sq, &labels, &[-0.4], &d, Some(&pen)).unwrap();
        assert_eq!(vec![gs], gsv);
    }

    #[test]
    fn equal_prototypes_zero_vector_data_term() {
        let protos = vec![vec![0.1, 0.2], vec![0.1, 0.2]];
        let e = [vec![0.5, -0.5], vec![0.3, 0.9]];
        let sq: Vec<Vec<Vec<f64>>> = e
            .iter()
            .map(|q| protos.iter().map(|c| q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).collect()).collect())
            .collect();
        let probs = vec![vec![0.5, 0.5]; 2];
        assert_eq!(data_term_vec(&probs, &sq, &[0, 1]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn update_cases() {
        let post = VariationalPosterior::global(100.0, 0.2, SigmaMode::Learned);
        let zero = PosteriorGrads {
            mu: vec![0.0],
            sigma: Some(vec![0.0]),
        };
        assert_eq!(apply_update(&post, &zero, 0.1).unwrap(), post);

        let g = PosteriorGrads {
            mu: vec![10.0],
            sigma: Some(vec![7.0]),
        };
        let next = apply_update(&post, &g, 1e-4).unwrap();
        assert!((next.mu[0] - 99.999).abs() < 1e-12);

        // 0.2 - 0.1 * 7 = -0.5, clamped.
        let next = apply_update(&post, &g, 0.1).unwrap();
        assert_eq!(next.sigma[0], SIGMA_FLOOR);

        let fixed = VariationalPosterior::global(100.0, 0.2, SigmaMode::Fixed);
        let next = apply_update(&fixed, &g, 0.1).unwrap();
        assert_eq!(next.sigma[0], 0.2);

        let bad = PosteriorGrads {
            mu: vec![f64::NAN],
            sigma: None,
        };
        assert!(matches!(apply_update(&fixed, &bad, 0.1), Err(Error::Numeric { .. })));
    }

    fn full_objective(
        queries: &[Vec<f64>],
        labels: &[usize],
        protos: &crate::metric::PrototypeSet,
        post: &VariationalPosterior,
        eps: &[f64],
        pen: &PriorPenalty,
    ) -> f64 {
        let s = alpha_from_epsilon(post, eps.to_vec(), 0);
        let ce = episode_loss(queries, labels, protos, &s.scaling(post.kind), DistanceKind::Euclidean)
            .unwrap()
            .loss;
        ce + pen.weight * kl_term(post, &pen.prior)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn sample_reconstructs_exactly(mu in -5.0f64..150.0, sigma in 0.0f64..3.0, seed in any::<u64>()) {
            let post = VariationalPosterior::dimensional(4, mu, sigma, SigmaMode::Fixed);
            let s = sample_alpha(&post, 9, &mut ChaCha8Rng::seed_from_u64(seed));
            for m in 0..4 {
                prop_assert_eq!(s.alpha[m] - (post.sigma[m] * s.epsilon[m] + post.mu[m]), 0.0);
            }
            prop_assert_eq!(s.episode_id, 9);
        }

        #[test]
        fn kl_term_lower_bound(mu in -10.0f64..10.0, sigma in 0.05f64..5.0, mu0 in -3.0f64..3.0, s0 in 0.1f64..4.0) {
            let prior = GaussianPrior { mu0, sigma0: s0 };
            let post = VariationalPosterior::dimensional(3, mu, sigma, SigmaMode::Learned);
            prop_assert!(kl_term(&post, &prior) >= 1.5 - 1e-12);
        }

        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), dimensional in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (way, shot, nq, dim) = (3, 2, 4, 4);
            let unit = |rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let support: Vec<Vec<f64>> = (0..way * shot).map(|_| unit(&mut rng)).collect();
            let slabels: Vec<usize> = (0..way * shot).map(|i| i / shot).collect();
            let queries: Vec<Vec<f64>> = (0..nq).map(|_| unit(&mut rng)).collect();
            let qlabels: Vec<usize> = (0..nq).map(|i| i % way).collect();
            let protos = compute_prototypes(&support, &slabels, way).unwrap();
            let pen = PriorPenalty {
                prior: GaussianPrior { mu0: rng.random_range(-1.0..3.0), sigma0: rng.random_range(0.5..2.0) },
                weight: rng.random_range(0.1..1.0),
            };
            let mut post = if dimensional {
                VariationalPosterior::dimensional(dim, 0.0, 0.0, SigmaMode::Learned)
            } else {
                VariationalPosterior::global(0.0, 0.0, SigmaMode::Learned)
            };
            post.mu.iter_mut().for_each(|m| *m = rng.random_range(0.5..6.0));
            post.sigma.iter_mut().for_each(|s| *s = rng.random_range(0.1..1.0));
            let eps: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();

            let s = alpha_from_epsilon(&post, eps.clone(), 0);
            let fwd = episode_loss(&queries, &qlabels, &protos, &s.scaling(post.kind), DistanceKind::Euclidean).unwrap();
            let (gm, gs) = if dimensional {
                let sq = fwd.sq_diffs.as_ref().unwrap();
                (grad_mu_vec(&fwd.probs, sq, &qlabels, &post, Some(&pen)).unwrap(),
                 grad_sigma_vec(&fwd.probs, sq, &qlabels, &eps, &post, Some(&pen)).unwrap())
            } else {
                (vec![grad_mu(&fwd.probs, &fwd.distances, &qlabels, &post, Some(&pen)).unwrap()],
                 vec![grad_sigma(&fwd.probs, &fwd.distances, &qlabels, eps[0], &post, Some(&pen)).unwrap()])
            };
            let h = 1e-5;
            for m in 0..post.dim() {
                for (which, analytic) in [(0, gm[m]), (1, gs[m])] {
                    let mut up = post.clone();
                    let mut down = post.clone();
                    if which == 0 { up.mu[m] += h; down.mu[m] -= h; } else { up.sigma[m] += h; down.sigma[m] -= h; }
                    let numeric = (full_objective(&queries, &qlabels, &protos, &up, &eps, &pen)
                        - full_objective(&queries, &qlabels, &protos, &down, &eps, &pen)) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
                    prop_assert!(rel <= 1e-4 || (analytic - numeric).abs() < 1e-8,
                        "dim {m} which {which}: analytic {analytic} numeric {numeric}");
                }
            }
        }
    }
}
