//! Synthetic few-shot domains and K-way N-shot episode sampling.
//!
//! A domain is a set of Gaussian classes in `input_dim` dimensions. Only a
//! subset of dimensions separates the classes; the rest share one center and
//! carry wide noise, so an embedding that down-weights them classifies better.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub informative_dims: usize,
    pub informative_sigma: f64,
    pub noise_sigma: f64,
    /// Informative center coordinates are drawn uniformly in `±center_range`.
    pub center_range: f64,
    /// Train/val/test class fractions.
    pub split: [f64; 3],
    /// Every partition must hold at least this many classes.
    pub min_split_classes: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            num_classes: 30,
            input_dim: 16,
            informative_dims: 8,
            informative_sigma: 0.3,
            noise_sigma: 1.5,
            center_range: 1.0,
            split: [0.6, 0.2, 0.2],
            min_split_classes: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    /// `[num_classes][input_dim]`.
    pub class_centers: Vec<Vec<f64>>,
    /// Sorted indices of the label-carrying input dimensions.
    pub informative_dims: Vec<usize>,
    /// Per-dimension standard deviation of the class-conditional noise.
    pub dim_sigma: Vec<f64>,
    pub informative_sigma: f64,
    pub noise_sigma: f64,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub seed: u64,
}

/// One K-way N-shot task. Labels are episode-local, in `0..way`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub support_inputs: Vec<Vec<f64>>,
    pub support_labels: Vec<usize>,
    pub query_inputs: Vec<Vec<f64>>,
    pub query_labels: Vec<usize>,
    /// Domain class index behind each local label.
    pub classes: Vec<usize>,
    pub episode_id: u64,
}

impl Episode {
    pub fn num_support(&self) -> usize {
        self.support_inputs.len()
    }

    pub fn num_query(&self) -> usize {
        self.query_inputs.len()
    }
}

fn split_sizes(num_classes: usize, split: [f64; 3]) -> Result<[usize; 3]> {
    if split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "domain.split fractions must be in [0,1] and sum to 1, got {split:?}"
        )));
    }
    let train = (split[0] * num_classes as f64).round() as usize;
    let val = ((split[1] * num_classes as f64).round() as usize).min(num_classes - train);
    Ok([train, val, num_classes - train - val])
}

pub fn make_domain(config: &DomainConfig, seed: u64) -> Result<SyntheticDomain> {
    if config.input_dim < 2 {
        return Err(Error::Config("domain.input_dim must be at least 2".into()));
    }
    if config.informative_dims == 0 || config.informative_dims > config.input_dim {
        return Err(Error::Config(format!(
            "domain.informative_dims must be in 1..={}, got {}",
            config.input_dim, config.informative_dims
        )));
    }
    if !(config.informative_sigma > 0.0 && config.noise_sigma > 0.0 && config.center_range > 0.0) {
        return Err(Error::Config("domain sigmas and center_range must be positive".into()));
    }
    let sizes = split_sizes(config.num_classes, config.split)?;
    if let Some(small) = sizes.iter().find(|&&s| s < config.min_split_classes.max(1)) {
        return Err(Error::Config(format!(
            "domain split {sizes:?} leaves a partition with {small} classes, need at least {}",
            config.min_split_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims: Vec<usize> = (0..config.input_dim).collect();
    dims.shuffle(&mut rng);
    let mut informative_dims = dims[..config.informative_dims].to_vec();
    informative_dims.sort_unstable();

    let mut is_informative = vec![false; config.input_dim];
    informative_dims.iter().for_each(|&d| is_informative[d] = true);

    let coord = Uniform::new_inclusive(-config.center_range, config.center_range).expect("positive range");
    let class_centers = (0..config.num_classes)
        .map(|_| {
            is_informative
                .iter()
                .map(|&inf| if inf { coord.sample(&mut rng) } else { 0.0 })
                .collect()
        })
        .collect();
    let dim_sigma = is_informative
        .iter()
        .map(|&inf| if inf { config.informative_sigma } else { config.noise_sigma })
        .collect();

    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    classes.shuffle(&mut rng);
    let (train_end, val_end) = (sizes[0], sizes[0] + sizes[1]);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SyntheticDomain {
        class_centers,
        informative_dims,
        dim_sigma,
        informative_sigma: config.informative_sigma,
        noise_sigma: config.noise_sigma,
        train_classes: sorted(&classes[..train_end]),
        val_classes: sorted(&classes[train_end..val_end]),
        test_classes: sorted(&classes[val_end..]),
        seed,
    })
}

impl SyntheticDomain {
    pub fn input_dim(&self) -> usize {
        self.dim_sigma.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_centers.len()
    }

    pub fn classes(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::Train => &self.train_classes,
            Partition::Val => &self.val_classes,
            Partition::Test => &self.test_classes,
        }
    }

    /// One fresh draw from class `class`.
    pub fn draw<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.class_centers[class]
            .iter()
            .zip(&self.dim_sigma)
            .map(|(c, s)| {
                let z: f64 = StandardNormal.sample(rng);
                c + s * z
            })
            .collect()
    }

    /// Samples a `way`-way `shot`-shot episode with `queries_per_class`
    /// queries for every sampled class.
    pub fn sample_episode<R: Rng + ?Sized>(
        &self,
        partition: Partition,
        way: usize,
        shot: usize,
        queries_per_class: usize,
        episode_id: u64,
        rng: &mut R,
    ) -> Result<Episode> {
        let pool = self.classes(partition);
        if way == 0 || shot == 0 || queries_per_class == 0 {
            return Err(Error::Sampling("way, shot and queries per class must be positive".into()));
        }
        if way > pool.len() {
            return Err(Error::Sampling(format!(
                "{way}-way episode requested from {partition:?} partition with {} classes",
                pool.len()
            )));
        }
        let classes: Vec<usize> = index::sample(rng, pool.len(), way).iter().map(|i| pool[i]).collect();

        let mut episode = Episode {
            way,
            shot,
            support_inputs: Vec::with_capacity(way * shot),
            support_labels: Vec::with_capacity(way * shot),
            query_inputs: Vec::with_capacity(way * queries_per_class),
            query_labels: Vec::with_capacity(way * queries_per_class),
            classes,
            episode_id,
        };
        for (label, &class) in episode.classes.iter().enumerate() {
            for _ in 0..shot {
                episode.support_inputs.push(self.draw(class, rng));
                episode.support_labels.push(label);
            }
        }
        for (label, &class) in episode.classes.iter().enumerate() {
            for _ in 0..queries_per_class {
                episode.query_inputs.push(self.draw(class, rng));
                episode.query_labels.push(label);
            }
        }
        Ok(episode)
    }
}
