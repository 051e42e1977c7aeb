//! Joint training: the scaling is an ordinary parameter, descended with the
//! same step size as the encoder. A point-mass posterior without prior
//! reduces the variational method to exactly this loop.

use varscale_core::config::{Method, TrainConfig};
use varscale_core::episodic::{Partition, SyntheticDomain};
use varscale_core::linear::FlatParams;
use varscale_core::metric::{DistanceKind, Scaling};
use varscale_core::objective::{episode_objective, ScaleSource};
use varscale_core::optim::OptimizerKind;
use varscale_core::train::{rng_for, Model, TrainState, STREAM_DATA};
use varscale_core::variational::SigmaMode;
use varscale_core::{Error, Result};

use crate::domain::naive_layers;
use crate::naive::embed;

/// Parameters after a step: the flattened encoder and the scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub theta: Vec<f64>,
    pub alpha: f64,
}

impl Snapshot {
    pub fn max_abs_gap(&self, other: &Snapshot) -> f64 {
        assert_eq!(self.theta.len(), other.theta.len());
        self.theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| (a - b).abs())
            .fold((self.alpha - other.alpha).abs(), f64::max)
    }
}

fn distance(kind: DistanceKind, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        DistanceKind::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        DistanceKind::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        }
    }
}

/// d(loss)/d(alpha) for logits `-alpha * d`: the sum over queries of
/// `d_true - E_p[d]`.
fn alpha_gradient(
    layers: &[crate::naive::Layer],
    normalize: bool,
    kind: DistanceKind,
    alpha: f64,
    episode: &varscale_core::episodic::Episode,
) -> f64 {
    let support: Vec<Vec<f64>> = episode.support_inputs.iter().map(|x| embed(layers, normalize, x)).collect();
    let dim = support[0].len();
    let protos: Vec<Vec<f64>> = (0..episode.way)
        .map(|k| {
            let members: Vec<&Vec<f64>> = support
                .iter()
                .zip(&episode.support_labels)
                .filter(|(_, &y)| y == k)
                .map(|(e, _)| e)
                .collect();
            (0..dim).map(|j| members.iter().map(|e| e[j]).sum::<f64>() / members.len() as f64).collect()
        })
        .collect();
    let mut grad = 0.0;
    for (x, &y) in episode.query_inputs.iter().zip(&episode.query_labels) {
        let q: Vec<f64> = embed(layers, normalize, x);
        let d: Vec<f64> = protos.iter().map(|c| distance(kind, &q, c)).collect();
        let logits: Vec<f64> = d.iter().map(|v| -alpha * v).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let expected: f64 = w.iter().zip(&d).map(|(wk, dk)| wk / z * dk).sum();
        grad += d[y] - expected;
    }
    grad
}

/// Trains `steps` episodes with plain gradient descent on (theta, alpha).
/// Episodes come from the same data stream as the training engine, and
/// the initial encoder and scaling are the model's. The returned
/// trajectory starts with the initial state.
pub fn joint_training_baseline(config: &TrainConfig, domain: &SyntheticDomain, steps: u64) -> Result<Vec<Snapshot>> {
    if config.method != Method::Svs {
        return Err(Error::Config("the joint-training baseline needs a global-scaling (svs) config".into()));
    }
    let t = &config.train;
    let model = Model::init(config, domain.input_dim())?;
    let mut encoder = model.encoder;
    let mut alpha = config.scaling.mu_init;
    let mut data = rng_for(config.seed, STREAM_DATA);
    let mut out = vec![Snapshot {
        theta: encoder.to_flat(),
        alpha,
    }];
    for step in 0..steps {
        let episode = domain.sample_episode(Partition::Train, t.way, t.shot, t.queries, step, &mut data)?;
        let scaling = Scaling::Global(alpha);
        let g_theta = episode_objective(&encoder, ScaleSource::Fixed(&scaling), config.distance, &episode, &[])?
            .encoder_grads
            .to_flat();
        let g_alpha = alpha_gradient(
            &naive_layers(&encoder),
            encoder.normalize,
            config.distance,
            alpha,
            &episode,
        );
        let mut theta = encoder.to_flat();
        theta.iter_mut().zip(&g_theta).for_each(|(p, g)| *p -= t.l_theta * g);
        encoder.read_flat(&theta)?;
        alpha -= t.l_theta * g_alpha;
        out.push(Snapshot { theta, alpha });
    }
    Ok(out)
}

/// The variational configuration that should coincide with joint training:
/// sigma fixed at zero, no prior, posterior step size equal to the encoder's,
/// momentum-free SGD and no clipping.
pub fn degenerate_svs(config: &TrainConfig) -> TrainConfig {
    let mut c = config.clone();
    c.method = Method::Svs;
    c.scaling.sigma_mode = SigmaMode::Fixed;
    c.scaling.sigma_init = 0.0;
    c.scaling.use_prior = false;
    c.scaling.positive_alpha = false;
    c.scaling.l_psi = Some(c.train.l_theta);
    c.train.optimizer = OptimizerKind::Sgd {
        momentum: 0.0,
        weight_decay: 0.0,
    };
    c.train.grad_clip = None;
    c
}

/// Parameter trajectory of the training engine over `steps` episodes.
pub fn svs_trajectory(config: &TrainConfig, domain: &SyntheticDomain, steps: u64) -> Result<Vec<Snapshot>> {
    let mut state = TrainState::new(config.clone(), domain)?;
    let snap = |s: &TrainState| Snapshot {
        theta: s.model.encoder.to_flat(),
        alpha: s.model.mu().map_or(1.0, |m| m[0]),
    };
    let mut out = vec![snap(&state)];
    for _ in 0..steps {
        state.train_step(domain)?;
        out.push(snap(&state));
    }
    Ok(out)
}

/// Largest componentwise gap between two trajectories of equal length.
pub fn trajectory_gap(a: &[Snapshot], b: &[Snapshot]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_gap(y)).fold(0.0, f64::max)
}
