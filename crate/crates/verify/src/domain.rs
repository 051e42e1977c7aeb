//! Oracles that use what only the data generator knows: the true class
//! centers and which input dimensions carry the label.

use rand::Rng;
use varscale_core::encoder::EncoderParams;
use varscale_core::episodic::SyntheticDomain;
use varscale_core::train::{rng_for, EvalSpec};
use varscale_core::Result;

use crate::naive::{embed, Layer};

pub fn naive_layers(encoder: &EncoderParams) -> Vec<Layer> {
    encoder
        .layers
        .iter()
        .map(|l| Layer {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        })
        .collect()
}

/// Per-episode accuracy of the nearest-true-center rule on the informative
/// dimensions, over the same episodes `meta_test` draws for `spec`. With a
/// shared isotropic spread on those dimensions this is the Bayes rule given
/// the centers, so no learned model should beat it by more than noise.
pub fn bayes_proxy(domain: &SyntheticDomain, spec: &EvalSpec) -> Result<Vec<f64>> {
    (0..spec.episodes)
        .map(|i| {
            let mut rng = rng_for(spec.seed, (spec.stream << 32) | i);
            let ep = domain.sample_episode(spec.partition, spec.way, spec.shot, spec.queries, i, &mut rng)?;
            let correct = ep
                .query_inputs
                .iter()
                .zip(&ep.query_labels)
                .filter(|(x, &y)| {
                    let d = |class: usize| -> f64 {
                        let c = &domain.class_centers[class];
                        domain.informative_dims.iter().map(|&j| (x[j] - c[j]).powi(2)).sum()
                    };
                    let mut best = 0;
                    for k in 1..ep.way {
                        if d(ep.classes[k]) < d(ep.classes[best]) {
                            best = k;
                        }
                    }
                    best == y
                })
                .count();
            Ok(correct as f64 / ep.num_query() as f64)
        })
        .collect()
}

/// Between-class over mean within-class variance of every embedding
/// coordinate, from `per_class` fresh draws of each class in `classes`.
pub fn fisher_ratios<R: Rng + ?Sized>(
    encoder: &EncoderParams,
    domain: &SyntheticDomain,
    classes: &[usize],
    per_class: usize,
    rng: &mut R,
) -> Vec<f64> {
    let layers = naive_layers(encoder);
    let dim = layers.last().map_or(0, |l| l.out_dim);
    let mut class_means = Vec::with_capacity(classes.len());
    let mut within = vec![0.0; dim];
    for &c in classes {
        let e: Vec<Vec<f64>> = (0..per_class)
            .map(|_| embed(&layers, encoder.normalize, &domain.draw(c, rng)))
            .collect();
        let mean: Vec<f64> = (0..dim).map(|j| e.iter().map(|v| v[j]).sum::<f64>() / per_class as f64).collect();
        for v in &e {
            for j in 0..dim {
                within[j] += (v[j] - mean[j]).powi(2);
            }
        }
        class_means.push(mean);
    }
    let n = (classes.len() * per_class) as f64;
    let k = classes.len() as f64;
    (0..dim)
        .map(|j| {
            let grand = class_means.iter().map(|m| m[j]).sum::<f64>() / k;
            let between = class_means.iter().map(|m| (m[j] - grand).powi(2)).sum::<f64>() / k;
            between / (within[j] / n)
        })
        .collect()
}

/// Splits `values` by the ranking of `ratios`: the lower half (label-poor
/// coordinates) first, the upper half second. An odd middle element goes
/// to neither.
pub fn split_by_ratio(values: &[f64], ratios: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(values.len(), ratios.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
    let half = values.len() / 2;
    let low = order[..half].iter().map(|&i| values[i]).collect();
    let high = order[values.len() - half..].iter().map(|&i| values[i]).collect();
    (low, high)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
