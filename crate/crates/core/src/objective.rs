//! One episode's training objective with gradients for every parameter group.
//!
//! The forward pass encodes every support and query point once, builds the
//! prototypes, forms the metric scaling for the chosen method and evaluates
//! the query cross-entropy. The reverse pass reuses the cached class
//! probabilities and distances for both the scaling gradients and the
//! embedding gradients, then runs the encoder backward once per point.

use crate::amortized::{task_prototype, GeneratorParams};
use crate::encoder::{EncodeTape, EncoderParams};
use crate::episodic::Episode;
use crate::error::{check_len, Error, Result};
use crate::metric::{
    compute_prototypes, episode_loss, episode_loss_backward, prototypes_backward, DistanceKind, EpisodeLoss,
    PrototypeSet, Scaling,
};
use crate::variational::{
    alpha_from_epsilon, data_term, data_term_vec, kl_grad_scalar, kl_term, PosteriorGrads, PriorPenalty, ScaleKind,
    ScalingSample, SigmaMode, VariationalPosterior,
};

/// How the metric scaling of an episode is obtained.
#[derive(Debug, Clone, Copy)]
pub enum ScaleSource<'a> {
    /// A constant scaling (plain prototypical networks use `Global(1.0)`).
    Fixed(&'a Scaling),
    /// Global or dimensional posterior shared by all episodes.
    Variational {
        posterior: &'a VariationalPosterior,
        penalty: Option<&'a PriorPenalty>,
    },
    /// Per-episode posterior produced by the generator, blended with the
    /// unscaled loss by `lambda`.
    Amortized {
        generator: &'a GeneratorParams,
        penalty: Option<&'a PriorPenalty>,
        lambda: f64,
    },
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// Full objective: cross-entropy plus the weighted KL term (and, for the
    /// amortized method, the lambda blend).
    pub loss: f64,
    /// Query cross-entropy at the scaling used for prediction in this step.
    pub ce_loss: f64,
    pub correct: usize,
    pub num_query: usize,
    pub encoder_grads: EncoderParams,
    pub posterior_grads: Option<PosteriorGrads>,
    pub generator_grads: Option<GeneratorParams>,
    pub sample: Option<ScalingSample>,
    /// Per-episode posterior from the generator.
    pub generated: Option<VariationalPosterior>,
}

struct Embedded {
    support: Vec<Vec<f64>>,
    query: Vec<Vec<f64>>,
    support_tapes: Vec<EncodeTape>,
    query_tapes: Vec<EncodeTape>,
}

fn embed(encoder: &EncoderParams, episode: &Episode) -> Result<Embedded> {
    let (support, support_tapes) = episode
        .support_inputs
        .iter()
        .map(|x| encoder.encode(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (query, query_tapes) = episode
        .query_inputs
        .iter()
        .map(|x| encoder.encode(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Embedded {
        support,
        query,
        support_tapes,
        query_tapes,
    })
}

fn add_into(acc: &mut [Vec<f64>], extra: &[Vec<f64>]) {
    for (a, e) in acc.iter_mut().zip(extra) {
        a.iter_mut().zip(e).for_each(|(x, y)| *x += y);
    }
}

/// Forward and reverse pass for one episode.
///
/// `epsilon` is the episode's standard-normal draw (length 1 for global
/// scaling, `M` for dimensional and amortized scaling) and is ignored for
/// fixed scaling. Holding it fixed makes the objective deterministic in the
/// parameters.
pub fn episode_objective(
    encoder: &EncoderParams,
    source: ScaleSource<'_>,
    distance: DistanceKind,
    episode: &Episode,
    epsilon: &[f64],
) -> Result<EpisodeOutput> {
    let emb = embed(encoder, episode)?;
    let protos = compute_prototypes(&emb.support, &episode.support_labels, episode.way)?;
    let labels = &episode.query_labels;

    let mut grad_query: Vec<Vec<f64>>;
    let mut grad_protos: Vec<Vec<f64>>;
    let mut grad_support_extra: Option<Vec<f64>> = None;
    let mut out = EpisodeOutput {
        loss: 0.0,
        ce_loss: 0.0,
        correct: 0,
        num_query: labels.len(),
        encoder_grads: encoder.zeros_like(),
        posterior_grads: None,
        generator_grads: None,
        sample: None,
        generated: None,
    };

    let backward = |fwd: &EpisodeLoss, scaling: &Scaling, weight: f64, protos: &PrototypeSet| {
        episode_loss_backward(fwd, &emb.query, labels, protos, scaling, distance, weight)
    };

    match source {
        ScaleSource::Fixed(scaling) => {
            let fwd = episode_loss(&emb.query, labels, &protos, scaling, distance)?;
            out.loss = fwd.loss;
            out.ce_loss = fwd.loss;
            out.correct = fwd.num_correct(labels);
            let g = backward(&fwd, scaling, 1.0, &protos)?;
            grad_query = g.queries;
            grad_protos = g.prototypes;
        }
        ScaleSource::Variational { posterior, penalty } => {
            check_len("epsilon", posterior.dim(), epsilon.len())?;
            let sample = alpha_from_epsilon(posterior, epsilon.to_vec(), episode.episode_id);
            let scaling = sample.scaling(posterior.kind);
            let fwd = episode_loss(&emb.query, labels, &protos, &scaling, distance)?;
            let kl = penalty.map_or(0.0, |p| p.weight * kl_term(posterior, &p.prior));
            out.loss = fwd.loss + kl;
            out.ce_loss = fwd.loss;
            out.correct = fwd.num_correct(labels);

            let data: Vec<f64> = match posterior.kind {
                ScaleKind::Global => vec![data_term(&fwd.probs, &fwd.distances, labels)?],
                ScaleKind::Dimensional => {
                    let sq = fwd.sq_diffs.as_ref().expect("dimensional forward keeps squared differences");
                    data_term_vec(&fwd.probs, sq, labels)?
                }
            };
            let kl_grads: Vec<(f64, f64)> = posterior
                .mu
                .iter()
                .zip(&posterior.sigma)
                .map(|(&m, &s)| penalty.map_or((0.0, 0.0), |p| {
                    let (gm, gs) = kl_grad_scalar(m, s, &p.prior);
                    (p.weight * gm, p.weight * gs)
                }))
                .collect();
            let mu = data.iter().zip(&kl_grads).map(|(d, k)| d + k.0).collect();
            let sigma = (posterior.sigma_mode == SigmaMode::Learned).then(|| {
                data.iter()
                    .zip(epsilon)
                    .zip(&kl_grads)
                    .map(|((d, e), k)| e * d + k.1)
                    .collect()
            });
            out.posterior_grads = Some(PosteriorGrads { mu, sigma });

            let g = backward(&fwd, &scaling, 1.0, &protos)?;
            grad_query = g.queries;
            grad_protos = g.prototypes;
            out.sample = Some(sample);
        }
        ScaleSource::Amortized {
            generator,
            penalty,
            lambda,
        } => {
            if distance != DistanceKind::Euclidean {
                return Err(Error::Config("amortized scaling requires euclidean distance".into()));
            }
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
            }
            check_len("epsilon", generator.embed_dim, epsilon.len())?;
            let task = task_prototype(emb.support.iter().chain(&emb.query))?;
            let (post, tape) = generator.generate_posterior(&task)?;
            let sample = alpha_from_epsilon(&post, epsilon.to_vec(), episode.episode_id);
            let scaling = sample.scaling(ScaleKind::Dimensional);
            let dim = protos.dim();
            grad_query = vec![vec![0.0; dim]; emb.query.len()];
            grad_protos = vec![vec![0.0; dim]; protos.way()];

            let amortized_weight = 1.0 - lambda;
            let fwd = episode_loss(&emb.query, labels, &protos, &scaling, distance)?;
            let kl = penalty.map_or(0.0, |p| p.weight * kl_term(&post, &p.prior));
            let amortized_loss = fwd.loss + kl;
            out.ce_loss = fwd.loss;
            out.correct = fwd.num_correct(labels);

            let unscaled_loss = if lambda > 0.0 {
                let unit = Scaling::Global(1.0);
                let pn = episode_loss(&emb.query, labels, &protos, &unit, distance)?;
                let g = backward(&pn, &unit, lambda, &protos)?;
                add_into(&mut grad_query, &g.queries);
                add_into(&mut grad_protos, &g.prototypes);
                pn.loss
            } else {
                0.0
            };
            out.loss = crate::amortized::aux_loss(lambda, amortized_loss, unscaled_loss)?;

            let mut gen_grads = generator.zeros_like();
            if amortized_weight > 0.0 {
                let g = backward(&fwd, &scaling, amortized_weight, &protos)?;
                add_into(&mut grad_query, &g.queries);
                add_into(&mut grad_protos, &g.prototypes);

                let sq = fwd.sq_diffs.as_ref().expect("dimensional forward keeps squared differences");
                let data = data_term_vec(&fwd.probs, sq, labels)?;
                let mut g_mu = Vec::with_capacity(dim);
                let mut g_sigma = Vec::with_capacity(dim);
                for m in 0..dim {
                    let (km, ks) = penalty.map_or((0.0, 0.0), |p| {
                        let (a, b) = kl_grad_scalar(post.mu[m], post.sigma[m], &p.prior);
                        (p.weight * a, p.weight * b)
                    });
                    g_mu.push(amortized_weight * (data[m] + km));
                    g_sigma.push(amortized_weight * (epsilon[m] * data[m] + ks));
                }
                let grad_task = generator.backward_accumulate(&tape, &g_mu, &g_sigma, &mut gen_grads)?;
                // The task prototype averages all m + q embeddings.
                let n = (emb.support.len() + emb.query.len()) as f64;
                grad_support_extra = Some(grad_task.iter().map(|g| g / n).collect());
            }
            out.generator_grads = Some(gen_grads);
            out.generated = Some(post);
            out.sample = Some(sample);
        }
    }

    let mut grad_support = prototypes_backward(&grad_protos, &episode.support_labels, &protos);
    if let Some(extra) = &grad_support_extra {
        for g in grad_support.iter_mut().chain(grad_query.iter_mut()) {
            g.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
    }
    for (tape, g) in emb.support_tapes.iter().zip(&grad_support) {
        encoder.backward_accumulate(tape, g, &mut out.encoder_grads)?;
    }
    for (tape, g) in emb.query_tapes.iter().zip(&grad_query) {
        encoder.backward_accumulate(tape, g, &mut out.encoder_grads)?;
    }
    if !out.loss.is_finite() {
        return Err(Error::Numeric {
            context: "episode objective",
            detail: format!("loss {}", out.loss),
        });
    }
    Ok(out)
}

/// Query predictions for an episode at a fixed scaling (meta-test path).
pub fn episode_predictions(
    encoder: &EncoderParams,
    episode: &Episode,
    scaling: &Scaling,
    distance: DistanceKind,
) -> Result<Vec<usize>> {
    let emb = embed(encoder, episode)?;
    let protos = compute_prototypes(&emb.support, &episode.support_labels, episode.way)?;
    emb.query
        .iter()
        .map(|q| crate::metric::predict(q, &protos, scaling, distance))
        .collect()
}

/// Task prototype and generated posterior mean for an episode.
pub fn generated_posterior(
    encoder: &EncoderParams,
    generator: &GeneratorParams,
    episode: &Episode,
) -> Result<VariationalPosterior> {
    let emb = embed(encoder, episode)?;
    let task = task_prototype(emb.support.iter().chain(&emb.query))?;
    Ok(generator.generate_posterior(&task)?.0)
}
