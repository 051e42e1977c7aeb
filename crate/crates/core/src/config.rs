//! Run configuration: one TOML document, every field overridable by a dotted
//! `key=value` pair, method-dependent defaults filled in by [`TrainConfig::resolve`].

use serde::{Deserialize, Serialize};

use crate::episodic::DomainConfig;
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::optim::OptimizerKind;
use crate::variational::{GaussianPrior, SigmaMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain prototypical networks, scaling pinned to 1.
    Pn,
    /// One global scaling variable.
    Svs,
    /// One scaling variable per embedding dimension.
    Dsvs,
    /// Per-task dimensional scaling from a generator network.
    Davs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pn => "pn",
            Method::Svs => "svs",
            Method::Dsvs => "dsvs",
            Method::Davs => "davs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embed_dim: 16,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub way: usize,
    pub shot: usize,
    /// Queries per class.
    pub queries: usize,
    pub episodes: u64,
    /// Episodes per epoch; the auxiliary weight decays once per epoch.
    pub episodes_per_epoch: u64,
    pub l_theta: f64,
    pub optimizer: OptimizerKind,
    /// Optional max-norm clip on the encoder gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            queries: 15,
            episodes: 20_000,
            episodes_per_epoch: 100,
            l_theta: 0.002,
            optimizer: OptimizerKind::default(),
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSection {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: u64,
}

impl Default for TestSection {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            queries: 15,
            episodes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    /// Step size for the posterior; defaults depend on the method.
    pub l_psi: Option<f64>,
    pub l_beta: f64,
    pub mu_init: f64,
    pub sigma_init: f64,
    pub sigma_mode: SigmaMode,
    pub prior: GaussianPrior,
    /// `false` drops the KL term entirely (the flat-prior limit).
    pub use_prior: bool,
    /// Multiplier on the KL term per episode; defaults depend on the method.
    pub kl_weight: Option<f64>,
    /// Resample draws whose scaling would be non-positive.
    pub positive_alpha: bool,
    /// Epochs over which the auxiliary weight decays from 1 to 0.
    pub gamma: u64,
    pub generator_hidden: usize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            l_psi: None,
            l_beta: 1e-3,
            mu_init: 100.0,
            sigma_init: 0.2,
            sigma_mode: SigmaMode::Fixed,
            prior: GaussianPrior::default(),
            use_prior: true,
            kl_weight: None,
            positive_alpha: false,
            gamma: 125,
            generator_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    /// Validate every this many episodes; 0 disables validation.
    pub every: u64,
    pub episodes: u64,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            every: 200,
            episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    pub dir: Option<String>,
    /// Metrics row cadence in episodes.
    pub every: u64,
    /// Scaling-histogram cadence in episodes; 0 disables.
    pub mu_every: u64,
    /// Record per-step wall-clock time. Off by default so that metrics
    /// files are byte-reproducible.
    pub wallclock: bool,
    /// Periodic checkpoint cadence in episodes; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for LogSection {
    fn default() -> Self {
        Self {
            dir: None,
            every: 10,
            mu_every: 100,
            wallclock: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub test: TestSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub validation: ValidationSection,
    #[serde(default)]
    pub log: LogSection,
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_override_value(raw));
    Ok(())
}

impl TrainConfig {
    /// Parses a TOML document, applies `key=value` overrides in order and
    /// resolves defaults.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// A resolved default config for `method`.
    pub fn for_method(method: Method) -> Self {
        TrainConfig {
            method,
            distance: DistanceKind::default(),
            seed: 0,
            domain: DomainConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainSection::default(),
            test: TestSection::default(),
            scaling: ScalingSection::default(),
            validation: ValidationSection::default(),
            log: LogSection::default(),
        }
        .resolve()
        .expect("built-in defaults are valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn l_psi(&self) -> f64 {
        self.scaling.l_psi.unwrap_or_else(|| default_l_psi(self.method))
    }

    pub fn kl_weight(&self) -> f64 {
        self.scaling.kl_weight.unwrap_or_else(|| default_kl_weight(self.method))
    }

    /// Fills method-dependent defaults and checks every invariant.
    pub fn resolve(mut self) -> Result<Self> {
        self.scaling.l_psi = Some(self.l_psi());
        self.scaling.kl_weight = Some(self.kl_weight());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("train.l_theta", self.train.l_theta)?;
        positive("scaling.l_psi", self.l_psi())?;
        positive("scaling.l_beta", self.scaling.l_beta)?;
        positive("scaling.prior.sigma0", self.scaling.prior.sigma0)?;
        if !self.scaling.mu_init.is_finite() || !self.scaling.prior.mu0.is_finite() {
            return Err(Error::Config("scaling.mu_init and scaling.prior.mu0 must be finite".into()));
        }
        if !(self.scaling.sigma_init >= 0.0 && self.scaling.sigma_init.is_finite()) {
            return Err(Error::Config("scaling.sigma_init must be non-negative".into()));
        }
        if self.scaling.sigma_mode == SigmaMode::Learned && self.scaling.sigma_init <= 0.0 {
            return Err(Error::Config("scaling.sigma_init must be positive when sigma is learned".into()));
        }
        if self.method == Method::Davs && self.scaling.sigma_init <= 0.0 {
            return Err(Error::Config("scaling.sigma_init must be positive for davs".into()));
        }
        let kl = self.kl_weight();
        if !(kl >= 0.0 && kl.is_finite()) {
            return Err(Error::Config(format!("scaling.kl_weight must be non-negative, got {kl}")));
        }
        for (name, way, shot, queries) in [
            ("train", self.train.way, self.train.shot, self.train.queries),
            ("test", self.test.way, self.test.shot, self.test.queries),
        ] {
            if way < 2 {
                return Err(Error::Config(format!("{name}.way must be at least 2, got {way}")));
            }
            if shot == 0 || queries == 0 {
                return Err(Error::Config(format!("{name}.shot and {name}.queries must be at least 1")));
            }
        }
        // train.episodes = 0 is allowed: it yields the initialized model.
        if self.train.episodes_per_epoch == 0 || self.test.episodes == 0 {
            return Err(Error::Config(
                "train.episodes_per_epoch and test.episodes must be at least 1".into(),
            ));
        }
        if self.scaling.gamma == 0 {
            return Err(Error::Config("scaling.gamma must be at least 1".into()));
        }
        if self.validation.every > 0 && self.validation.episodes == 0 {
            return Err(Error::Config("validation.episodes must be at least 1".into()));
        }
        if self.log.every == 0 {
            return Err(Error::Config("log.every must be at least 1".into()));
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.method == Method::Davs && self.scaling.generator_hidden == 0 {
            return Err(Error::Config("scaling.generator_hidden must be positive".into()));
        }
        if matches!(self.method, Method::Dsvs | Method::Davs) && self.distance != DistanceKind::Euclidean {
            return Err(Error::Config(format!(
                "distance = cosine is only supported with pn and svs, not {}",
                self.method.name()
            )));
        }
        if self.scaling.positive_alpha && self.method == Method::Davs {
            return Err(Error::Config("scaling.positive_alpha is not supported with davs".into()));
        }
        if let Some(c) = self.train.grad_clip {
            positive("train.grad_clip", c)?;
        }
        self.train.optimizer.validate()
    }
}

fn default_l_psi(method: Method) -> f64 {
    match method {
        Method::Dsvs => 16.0,
        _ => 1e-2,
    }
}

fn default_kl_weight(method: Method) -> f64 {
    match method {
        Method::Dsvs | Method::Davs => 1e-3,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_resolves_defaults() {
        let cfg = TrainConfig::from_toml("method = \"svs\"").unwrap();
        assert_eq!(cfg.train.way, 5);
        assert_eq!(cfg.scaling.mu_init, 100.0);
        assert!(cfg.scaling.l_psi.is_some());
        assert!(cfg.scaling.kl_weight.is_some());
        let dsvs = TrainConfig::from_toml("method = \"dsvs\"").unwrap();
        assert_eq!(dsvs.l_psi(), 16.0);
    }

    #[test]
    fn missing_method_names_the_field() {
        let err = TrainConfig::from_toml("seed = 3").unwrap_err().to_string();
        assert!(err.contains("method"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = TrainConfig::from_toml("method = \"pn\"\n[train]\nepochs = 3").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn overrides_are_applied_with_types() {
        let ov = vec![
            ("train.l_theta".to_string(), "0.1".to_string()),
            ("encoder.hidden".to_string(), "[32, 8]".to_string()),
            ("method".to_string(), "dsvs".to_string()),
            ("seed".to_string(), "7".to_string()),
        ];
        let cfg = TrainConfig::from_toml_with_overrides("method = \"pn\"", &ov).unwrap();
        assert_eq!(cfg.train.l_theta, 0.1);
        assert_eq!(cfg.encoder.hidden, vec![32, 8]);
        assert_eq!(cfg.method, Method::Dsvs);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invariants_are_enforced() {
        for bad in [
            "train.l_theta=0",
            "train.way=1",
            "train.episodes_per_epoch=0",
            "test.episodes=0",
            "scaling.l_psi=-1",
            "scaling.gamma=0",
        ] {
            let (k, v) = bad.split_once('=').unwrap();
            let ov = vec![(k.to_string(), v.to_string())];
            assert!(TrainConfig::from_toml_with_overrides("method = \"svs\"", &ov).is_err(), "{bad}");
        }
        let ov = vec![("distance".to_string(), "cosine".to_string())];
        assert!(TrainConfig::from_toml_with_overrides("method = \"dsvs\"", &ov).is_err());
        assert!(TrainConfig::from_toml_with_overrides("method = \"svs\"", &ov).is_ok());
    }

    #[test]
    fn partial_prior_override_keeps_other_defaults() {
        let ov = vec![("scaling.prior.mu0".to_string(), "10.0".to_string())];
        let cfg = TrainConfig::from_toml_with_overrides("method = \"svs\"", &ov).unwrap();
        assert_eq!(cfg.scaling.prior.mu0, 10.0);
        assert_eq!(cfg.scaling.prior.sigma0, GaussianPrior::default().sigma0);
        let ov = vec![("train.episodes".to_string(), "0".to_string())];
        assert!(TrainConfig::from_toml_with_overrides("method = \"pn\"", &ov).is_ok());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = TrainConfig::for_method(Method::Davs);
        cfg.train.optimizer = OptimizerKind::adam_default();
        cfg.train.grad_clip = Some(5.0);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
