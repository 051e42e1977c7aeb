//! Central finite differences and gradient-check sweeps.
//!
//! A sweep draws random small instances, freezes the episode and the noise
//! draw, and compares every analytic gradient entry from the engine against
//! a central difference of the naive objective evaluated in double-double.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use varscale_core::amortized::GeneratorParams;
use varscale_core::config::Method;
use varscale_core::encoder::EncoderParams;
use varscale_core::episodic::Episode;
use varscale_core::linear::Linear;
use varscale_core::metric::{DistanceKind, Scaling};
use varscale_core::objective::{episode_objective, EpisodeOutput, ScaleSource};
use varscale_core::variational::{GaussianPrior, PriorPenalty, ScaleKind, SigmaMode, VariationalPosterior};
use varscale_core::{Error, Result};

use crate::dd::Dd;
use crate::naive::{Distance, Instance, Layer, Param, Prior, Scale};
use crate::real::Real;

pub const DEFAULT_THRESHOLD: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub method: String,
    pub instance: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn new(method: &str, instance: usize, param: String, analytic: f64, numeric: f64, threshold: f64) -> Self {
        let rel = rel_error(analytic, numeric);
        GradReport {
            method: method.to_string(),
            instance,
            param,
            analytic,
            numeric,
            rel_error: rel,
            pass: rel <= threshold,
        }
    }
}

fn checked(g: f64, x: f64) -> Result<f64> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::Numeric {
            context: "finite difference",
            detail: format!("non-finite evaluation around {x}"),
        })
    }
}

/// `(f(x+h) - f(x-h)) / 2h`, with `h` replaced by the step actually
/// representable at `x` so the quotient is exact.
pub fn central_diff_real<T: Real>(mut f: impl FnMut(f64) -> T, x: f64, h: f64) -> Result<f64> {
    let h = (x + h) - x;
    checked(((f(x + h) - f(x - h)) / T::of(2.0 * h)).to_f64(), x)
}

pub fn finite_diff(f: impl FnMut(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    central_diff_real::<f64>(f, x, h)
}

/// Richardson extrapolation of the central differences at `h` and `2h`:
/// `(4 D(h) - D(2h)) / 3`. The O(h²) error terms cancel, leaving O(h⁴).
pub fn richardson_diff_real<T: Real>(mut f: impl FnMut(f64) -> T, x: f64, h: f64) -> Result<f64> {
    let h = (x + h) - x;
    let (fp1, fm1) = (f(x + h), f(x - h));
    let (fp2, fm2) = (f(x + 2.0 * h), f(x - 2.0 * h));
    checked(((T::of(8.0) * (fp1 - fm1) - (fp2 - fm2)) / T::of(12.0 * h)).to_f64(), x)
}

/// Step size relative to the parameter's magnitude.
pub fn step_for(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Numeric gradient of the naive loss for one parameter, in double-double.
pub fn numeric_gradient(instance: &Instance, p: Param) -> Result<f64> {
    let mut probe = instance.clone();
    let x = *probe.param_mut(p);
    richardson_diff_real::<Dd>(
        |v| {
            *probe.param_mut(p) = v;
            probe.loss::<Dd>()
        },
        x,
        step_for(x),
    )
}

fn to_linear(l: &Layer) -> Linear {
    Linear {
        in_dim: l.in_dim,
        out_dim: l.out_dim,
        weight: l.weight.clone(),
        bias: l.bias.clone(),
    }
}

fn penalty(prior: &Option<Prior>) -> Option<PriorPenalty> {
    prior.map(|p| PriorPenalty {
        prior: GaussianPrior {
            mu0: p.mu0,
            sigma0: p.sigma0,
        },
        weight: p.weight,
    })
}

/// Runs the engine's forward/backward on the instance.
pub fn analytic(instance: &Instance) -> Result<EpisodeOutput> {
    let encoder = EncoderParams {
        layers: instance.layers.iter().map(to_linear).collect(),
        embed_dim: instance.embed_dim(),
        normalize: instance.normalize,
    };
    let episode = Episode {
        way: instance.way,
        shot: instance.support.len() / instance.way,
        support_inputs: instance.support.iter().map(|(x, _)| x.clone()).collect(),
        support_labels: instance.support.iter().map(|(_, y)| *y).collect(),
        query_inputs: instance.query.iter().map(|(x, _)| x.clone()).collect(),
        query_labels: instance.query.iter().map(|(_, y)| *y).collect(),
        classes: (0..instance.way).collect(),
        episode_id: 0,
    };
    let distance = match instance.distance {
        Distance::Euclidean => DistanceKind::Euclidean,
        Distance::Cosine => DistanceKind::Cosine,
    };
    match &instance.scale {
        Scale::Fixed(a) => episode_objective(&encoder, ScaleSource::Fixed(&Scaling::Global(*a)), distance, &episode, &[]),
        Scale::Global { mu, sigma, eps, prior } => {
            let post = VariationalPosterior::global(*mu, *sigma, SigmaMode::Learned);
            let pen = penalty(prior);
            let src = ScaleSource::Variational {
                posterior: &post,
                penalty: pen.as_ref(),
            };
            episode_objective(&encoder, src, distance, &episode, &[*eps])
        }
        Scale::Dims { mu, sigma, eps, prior } => {
            let post = VariationalPosterior {
                kind: ScaleKind::Dimensional,
                mu: mu.clone(),
                sigma: sigma.clone(),
                sigma_mode: SigmaMode::Learned,
            };
            let pen = penalty(prior);
            let src = ScaleSource::Variational {
                posterior: &post,
                penalty: pen.as_ref(),
            };
            episode_objective(&encoder, src, distance, &episode, eps)
        }
        Scale::Generated {
            hidden,
            output,
            eps,
            prior,
            lambda,
        } => {
            let gen = GeneratorParams {
                hidden: to_linear(hidden),
                output: to_linear(output),
                embed_dim: instance.embed_dim(),
            };
            let pen = penalty(prior);
            let src = ScaleSource::Amortized {
                generator: &gen,
                penalty: pen.as_ref(),
                lambda: *lambda,
            };
            episode_objective(&encoder, src, distance, &episode, eps)
        }
    }
}

pub fn analytic_entry(out: &EpisodeOutput, p: Param) -> Result<f64> {
    let missing = || Error::Contract(format!("engine produced no gradient for {}", p.name()));
    Ok(match p {
        Param::EncoderWeight(l, i) => out.encoder_grads.layers[l].weight[i],
        Param::EncoderBias(l, i) => out.encoder_grads.layers[l].bias[i],
        Param::Mu(i) => out.posterior_grads.as_ref().ok_or_else(missing)?.mu[i],
        Param::Sigma(i) => out
            .posterior_grads
            .as_ref()
            .and_then(|g| g.sigma.as_ref())
            .ok_or_else(missing)?[i],
        Param::GenHiddenWeight(i) => out.generator_grads.as_ref().ok_or_else(missing)?.hidden.weight[i],
        Param::GenHiddenBias(i) => out.generator_grads.as_ref().ok_or_else(missing)?.hidden.bias[i],
        Param::GenOutputWeight(i) => out.generator_grads.as_ref().ok_or_else(missing)?.output.weight[i],
        Param::GenOutputBias(i) => out.generator_grads.as_ref().ok_or_else(missing)?.output.bias[i],
    })
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_layer<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, w: f64, b: f64) -> Layer {
    Layer {
        in_dim,
        out_dim,
        weight: (0..in_dim * out_dim).map(|_| uniform(rng, -w, w)).collect(),
        bias: (0..out_dim).map(|_| uniform(rng, -b, b)).collect(),
    }
}

fn random_prior<R: Rng>(rng: &mut R) -> Option<Prior> {
    (rng.random::<f64>() < 0.8).then(|| Prior {
        mu0: uniform(rng, -1.0, 3.0),
        sigma0: uniform(rng, 0.5, 2.0),
        weight: uniform(rng, 0.1, 1.0),
    })
}

const INPUT_DIM: usize = 5;
const HIDDEN: usize = 7;
const EMBED: usize = 4;
const GEN_HIDDEN: usize = 5;
const WAY: usize = 3;
const SHOT: usize = 2;
const QUERIES: usize = 2;

/// A random frozen instance for `method`, away from the objective's kinks.
pub fn random_instance<R: Rng>(method: Method, rng: &mut R) -> Instance {
    loop {
        let layers = vec![
            random_layer(rng, INPUT_DIM, HIDDEN, 0.9, 0.5),
            random_layer(rng, HIDDEN, EMBED, 0.9, 0.5),
        ];
        let centers: Vec<Vec<f64>> = (0..WAY).map(|_| (0..INPUT_DIM).map(|_| normal(rng)).collect()).collect();
        let mut draw = |k: usize, n: usize| -> Vec<(Vec<f64>, usize)> {
            (0..n)
                .map(|_| (centers[k].iter().map(|c| c + 0.5 * normal(rng)).collect(), k))
                .collect()
        };
        let support: Vec<_> = (0..WAY).flat_map(|k| draw(k, SHOT)).collect();
        let query: Vec<_> = (0..WAY).flat_map(|k| draw(k, QUERIES)).collect();
        let cosine_allowed = matches!(method, Method::Pn | Method::Svs);
        let distance = if cosine_allowed && rng.random::<bool>() {
            Distance::Cosine
        } else {
            Distance::Euclidean
        };
        let scale = match method {
            Method::Pn => Scale::Fixed(uniform(rng, 0.5, 5.0)),
            Method::Svs => Scale::Global {
                mu: uniform(rng, 0.5, 10.0),
                sigma: uniform(rng, 0.05, 1.0),
                eps: normal(rng),
                prior: random_prior(rng),
            },
            Method::Dsvs => Scale::Dims {
                mu: (0..EMBED).map(|_| uniform(rng, 0.5, 10.0)).collect(),
                sigma: (0..EMBED).map(|_| uniform(rng, 0.05, 1.0)).collect(),
                eps: (0..EMBED).map(|_| normal(rng)).collect(),
                prior: random_prior(rng),
            },
            Method::Davs => {
                let hidden = random_layer(rng, EMBED, GEN_HIDDEN, 0.8, 0.5);
                let mut output = random_layer(rng, GEN_HIDDEN, 2 * EMBED, 0.5, 0.5);
                for m in 0..EMBED {
                    output.bias[m] = uniform(rng, 1.0, 8.0);
                    output.bias[EMBED + m] = uniform(rng, -2.0, 1.0);
                }
                let lambda = if rng.random::<bool>() { 0.0 } else { uniform(rng, 0.0, 1.0) };
                Scale::Generated {
                    hidden,
                    output,
                    eps: (0..EMBED).map(|_| normal(rng)).collect(),
                    prior: random_prior(rng),
                    lambda,
                }
            }
        };
        // Without normalization the last-layer bias is an exact symmetry of
        // the euclidean objective (true gradient 0), so those instances are
        // only drawn with cosine distance.
        let normalize = distance == Distance::Euclidean || rng.random::<bool>();
        let instance = Instance {
            layers,
            normalize,
            distance,
            way: WAY,
            support,
            query,
            scale,
        };
        let (pre, norm) = instance.kink_margin();
        if pre > 1e-3 && norm > 1e-2 {
            return instance;
        }
    }
}

/// Checks every gradient entry of `instances` random instances.
pub fn gradcheck(method: Method, seed: u64, instances: usize, threshold: f64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for i in 0..instances {
        let inst = random_instance(method, &mut rng);
        let out = analytic(&inst)?;
        for p in inst.params() {
            let a = analytic_entry(&out, p)?;
            let n = numeric_gradient(&inst, p)?;
            reports.push(GradReport::new(method.name(), i, p.name(), a, n, threshold));
        }
    }
    Ok(reports)
}

pub fn write_reports<W: std::io::Write>(reports: &[GradReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff(|x| x * x, 3.0, 1e-5).unwrap();
        assert!((g - 6.0).abs() < 1e-8, "{g}");
        assert_eq!(finite_diff(|_| 4.2, 1.0, 1e-5).unwrap(), 0.0);
        assert!(finite_diff(|x| 1.0 / (x - x), 1.0, 1e-5).is_err());
    }

    #[test]
    fn error_decay_orders() {
        // exp has every derivative equal to itself
        let exact = Dd::from(1.0).exp().to_f64();
        let f = |x: f64| Dd::from(x).exp();
        let central = |h| (central_diff_real::<Dd>(f, 1.0, h).unwrap() - exact).abs();
        let ratio = central(1e-2) / central(5e-3);
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
        let rich = |h| (richardson_diff_real::<Dd>(f, 1.0, h).unwrap() - exact).abs();
        let ratio = rich(1e-2) / rich(5e-3);
        assert!((ratio - 16.0).abs() < 0.2, "{ratio}");
    }

    fn mu_error(inst: &Instance, a: f64, h: f64, richardson: bool) -> f64 {
        let mut probe = inst.clone();
        let x = *probe.param_mut(Param::Mu(0));
        let f = |v| {
            *probe.param_mut(Param::Mu(0)) = v;
            probe.loss::<Dd>()
        };
        let n = if richardson {
            richardson_diff_real::<Dd>(f, x, h)
        } else {
            central_diff_real::<Dd>(f, x, h)
        };
        (n.unwrap() - a).abs()
    }

    #[test]
    fn mu_gradient_error_decay_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(Method::Svs, &mut rng);
        let a = analytic_entry(&analytic(&inst).unwrap(), Param::Mu(0)).unwrap();
        let ratio = mu_error(&inst, a, 2e-3, false) / mu_error(&inst, a, 1e-3, false);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
        let ratio = mu_error(&inst, a, 8e-2, true) / mu_error(&inst, a, 4e-2, true);
        assert!((ratio - 16.0).abs() < 1.0, "{ratio}");
    }

    #[test]
    fn naive_and_engine_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [Method::Pn, Method::Svs, Method::Dsvs, Method::Davs] {
            for _ in 0..10 {
                let inst = random_instance(m, &mut rng);
                let engine = analytic(&inst).unwrap().loss;
                let naive = inst.loss::<f64>();
                assert!(rel_error(engine, naive) < 1e-12, "{m:?}: {engine} vs {naive}");
            }
        }
    }

    #[test]
    fn small_sweeps_pass() {
        for m in [Method::Pn, Method::Svs, Method::Dsvs, Method::Davs] {
            let reports = gradcheck(m, 1, 5, DEFAULT_THRESHOLD).unwrap();
            let worst = reports.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
            assert!(reports.iter().all(|r| r.pass), "{m:?}: {worst:?}");
        }
    }

    #[test]
    fn routing_covers_expected_parameters() {
        let count = |m: Method, prefix: &str| {
            gradcheck(m, 2, 1, DEFAULT_THRESHOLD)
                .unwrap()
                .iter()
                .filter(|r| r.param.starts_with(prefix))
                .count()
        };
        assert_eq!(count(Method::Svs, "mu"), 1);
        assert_eq!(count(Method::Svs, "sigma"), 1);
        assert_eq!(count(Method::Dsvs, "mu"), EMBED);
        assert_eq!(count(Method::Dsvs, "sigma"), EMBED);
        let beta = GEN_HIDDEN * EMBED + GEN_HIDDEN + 2 * EMBED * GEN_HIDDEN + 2 * EMBED;
        assert_eq!(count(Method::Davs, "beta"), beta);
        assert!(count(Method::Davs, "theta") > 0);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(Method::Svs, &mut rng);
        let a = analytic_entry(&analytic(&inst).unwrap(), Param::Mu(0)).unwrap();
        let n = numeric_gradient(&inst, Param::Mu(0)).unwrap();
        // the sign used in the published update rule
        assert!(!GradReport::new("svs", 0, "mu".into(), -a, n, DEFAULT_THRESHOLD).pass || a.abs() < 1e-12);
    }
}
