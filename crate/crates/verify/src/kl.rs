//! Monte-Carlo estimate of KL(q || p) for one-dimensional Gaussians.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use varscale_core::{Error, Result};

pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.estimate - value).abs() <= k * self.stderr
    }
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Sample mean of `log q(a) - log p(a)` over `a ~ q = N(mu, sigma²)`, with
/// `p = N(mu0, sigma0²)`.
pub fn mc_kl<R: Rng + ?Sized>(mu: f64, sigma: f64, mu0: f64, sigma0: f64, n: usize, rng: &mut R) -> Result<McEstimate> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(format!("mc_kl needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if !(sigma > 0.0 && sigma0 > 0.0) {
        return Err(Error::Config("mc_kl needs positive standard deviations".into()));
    }
    // Welford keeps the variance accurate when the mean is large (KL ~ 5e3).
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        let a = mu + sigma * z;
        let v = log_normal_pdf(a, mu, sigma) - log_normal_pdf(a, mu0, sigma0);
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / n as f64).sqrt(),
    })
}
