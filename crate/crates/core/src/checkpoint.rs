//! Checkpoints as JSON documents: a format version, the resolved config and
//! every real-valued state as a named array with its shape.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every bit of the training state, including the
//! position of each random stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amortized::{AuxSchedule, GeneratorParams};
use crate::config::{Method, TrainConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::optim::OptimizerState;
use crate::train::{BestModel, LogWindow, Model, Scaler, TrainState};
use crate::variational::{ScaleKind, VariationalPosterior};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngPosition {
    /// 32-byte key as hex.
    seed: String,
    stream: u64,
    /// 128-bit word position as a decimal string.
    word_pos: String,
}

impl RngPosition {
    fn of(rng: &ChaCha8Rng) -> Self {
        RngPosition {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng position {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BestInfo {
    step: u64,
    val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    optimizer_steps: u64,
    schedule: Option<AuxSchedule>,
    rng: BTreeMap<String, RngPosition>,
    best: Option<BestInfo>,
    window: LogWindow,
    arrays: BTreeMap<String, NamedArray>,
}

fn put(arrays: &mut BTreeMap<String, NamedArray>, name: String, shape: Vec<usize>, data: &[f64]) {
    arrays.insert(
        name,
        NamedArray {
            shape,
            data: data.to_vec(),
        },
    );
}

fn put_linear(arrays: &mut BTreeMap<String, NamedArray>, name: &str, l: &Linear) {
    put(arrays, format!("{name}.weight"), vec![l.out_dim, l.in_dim], &l.weight);
    put(arrays, format!("{name}.bias"), vec![l.out_dim], &l.bias);
}

fn put_model(arrays: &mut BTreeMap<String, NamedArray>, prefix: &str, model: &Model) {
    for (i, l) in model.encoder.layers.iter().enumerate() {
        put_linear(arrays, &format!("{prefix}.encoder.layer{i}"), l);
    }
    match &model.scaler {
        Scaler::Unit => {}
        Scaler::Variational(p) => {
            put(arrays, format!("{prefix}.posterior.mu"), vec![p.dim()], &p.mu);
            put(arrays, format!("{prefix}.posterior.sigma"), vec![p.dim()], &p.sigma);
        }
        Scaler::Amortized(g) => {
            put_linear(arrays, &format!("{prefix}.generator.hidden"), &g.hidden);
            put_linear(arrays, &format!("{prefix}.generator.output"), &g.output);
        }
    }
}

struct Reader<'a> {
    arrays: &'a BTreeMap<String, NamedArray>,
}

impl Reader<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if a.shape != shape {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, config implies {shape:?}",
                a.shape
            )));
        }
        if a.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` holds {} values for shape {shape:?}",
                a.data.len()
            )));
        }
        if a.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("array `{name}` holds non-finite values")));
        }
        Ok(a.data.clone())
    }

    fn linear(&self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Ok(Linear {
            in_dim,
            out_dim,
            weight: self.take(&format!("{name}.weight"), &[out_dim, in_dim])?,
            bias: self.take(&format!("{name}.bias"), &[out_dim])?,
        })
    }

    fn model(&self, prefix: &str, config: &TrainConfig) -> Result<Model> {
        let enc = &config.encoder;
        let mut widths = vec![config.domain.input_dim];
        widths.extend(&enc.hidden);
        widths.push(enc.embed_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{prefix}.encoder.layer{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams {
            layers,
            embed_dim: enc.embed_dim,
            normalize: enc.normalize,
        };
        let posterior = |kind: ScaleKind, dim: usize| -> Result<Scaler> {
            let p = VariationalPosterior {
                kind,
                mu: self.take(&format!("{prefix}.posterior.mu"), &[dim])?,
                sigma: self.take(&format!("{prefix}.posterior.sigma"), &[dim])?,
                sigma_mode: config.scaling.sigma_mode,
            };
            p.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok(Scaler::Variational(p))
        };
        let scaler = match config.method {
            Method::Pn => Scaler::Unit,
            Method::Svs => posterior(ScaleKind::Global, 1)?,
            Method::Dsvs => posterior(ScaleKind::Dimensional, enc.embed_dim)?,
            Method::Davs => {
                let (m, h) = (enc.embed_dim, config.scaling.generator_hidden);
                Scaler::Amortized(GeneratorParams {
                    hidden: self.linear(&format!("{prefix}.generator.hidden"), m, h)?,
                    output: self.linear(&format!("{prefix}.generator.output"), h, 2 * m)?,
                    embed_dim: m,
                })
            }
        };
        Ok(Model {
            method: config.method,
            distance: config.distance,
            encoder,
            scaler,
        })
    }
}

pub fn checkpoint_to_string(state: &TrainState) -> String {
    let mut arrays = BTreeMap::new();
    put_model(&mut arrays, "model", &state.model);
    if let Some(b) = &state.best {
        put_model(&mut arrays, "best", &b.model);
    }
    let n = state.optimizer.first.len();
    put(&mut arrays, "optimizer.first".into(), vec![n], &state.optimizer.first);
    put(
        &mut arrays,
        "optimizer.second".into(),
        vec![state.optimizer.second.len()],
        &state.optimizer.second,
    );
    let rng = BTreeMap::from([
        ("data".to_string(), RngPosition::of(&state.data_rng)),
        ("noise".to_string(), RngPosition::of(&state.noise_rng)),
    ]);
    let doc = Document {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        step: state.step,
        optimizer_steps: state.optimizer.steps,
        schedule: state.schedule,
        rng,
        best: state.best.as_ref().map(|b| BestInfo {
            step: b.step,
            val_acc: b.val_acc,
        }),
        window: state.window.clone(),
        arrays,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<TrainState> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {v}, this build reads version {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("checkpoint has no format_version".into())),
    }
    let doc: Document =
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    let config = doc
        .config
        .resolve()
        .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
    let reader = Reader { arrays: &doc.arrays };
    let model = reader.model("model", &config)?;
    let best = match doc.best {
        Some(info) => Some(BestModel {
            step: info.step,
            val_acc: info.val_acc,
            model: reader.model("best", &config)?,
        }),
        None => None,
    };
    let n = crate::linear::FlatParams::num_params(&model.encoder);
    let mut optimizer = OptimizerState::new(config.train.optimizer, n);
    optimizer.first = reader.take("optimizer.first", &[n])?;
    optimizer.second = reader.take("optimizer.second", &[optimizer.second.len()])?;
    optimizer.steps = doc.optimizer_steps;
    if (config.method == Method::Davs) != doc.schedule.is_some() {
        return Err(Error::Checkpoint("auxiliary schedule present only for davs".into()));
    }
    let rng = |name: &str| {
        doc.rng
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing rng `{name}`")))
            .and_then(RngPosition::restore)
    };
    Ok(TrainState {
        data_rng: rng("data")?,
        noise_rng: rng("noise")?,
        config,
        step: doc.step,
        model,
        optimizer,
        schedule: doc.schedule,
        best,
        window: doc.window,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, checkpoint_to_string(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

/// Errors unless `expected` describes the same architecture as the checkpoint.
pub fn check_compatible(state: &TrainState, expected: &TrainConfig) -> Result<()> {
    let have = &state.config;
    let mismatch = |field: &str, a: String, b: String| {
        Err(Error::Checkpoint(format!(
            "checkpoint {field} = {a} does not match requested {field} = {b}"
        )))
    };
    if have.method != expected.method {
        return mismatch("method", have.method.name().into(), expected.method.name().into());
    }
    if have.encoder.embed_dim != expected.encoder.embed_dim {
        return mismatch(
            "embed_dim",
            have.encoder.embed_dim.to_string(),
            expected.encoder.embed_dim.to_string(),
        );
    }
    if have.encoder.hidden != expected.encoder.hidden {
        return mismatch(
            "encoder.hidden",
            format!("{:?}", have.encoder.hidden),
            format!("{:?}", expected.encoder.hidden),
        );
    }
    if have.domain.input_dim != expected.domain.input_dim {
        return mismatch(
            "input_dim",
            have.domain.input_dim.to_string(),
            expected.domain.input_dim.to_string(),
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::{make_domain, DomainConfig};
    use crate::optim::OptimizerKind;
    use crate::train::RunMetrics;

    fn config(method: Method) -> TrainConfig {
        let mut c = TrainConfig::for_method(method);
        c.train.episodes = 60;
        c.train.episodes_per_epoch = 10;
        c.scaling.gamma = 3;
        c.validation.every = 20;
        c.validation.episodes = 5;
        c.log.every = 7;
        c.log.mu_every = 15;
        c
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = make_domain(&DomainConfig::default(), 1).unwrap();
        for method in [Method::Pn, Method::Svs, Method::Dsvs, Method::Davs] {
            let mut cfg = config(method);
            if method == Method::Svs {
                cfg.train.optimizer = OptimizerKind::adam_default();
                cfg.scaling.sigma_mode = crate::variational::SigmaMode::Learned;
            }
            let mut straight = TrainState::new(cfg.clone(), &d).unwrap();
            let mut m_straight = RunMetrics::default();
            straight.run(&d, 60, &mut m_straight, |_| Ok(())).unwrap();

            let mut first = TrainState::new(cfg, &d).unwrap();
            let mut m_resumed = RunMetrics::default();
            first.run(&d, 33, &mut m_resumed, |_| Ok(())).unwrap();
            let text = checkpoint_to_string(&first);
            let mut second = checkpoint_from_str(&text).unwrap();
            assert_eq!(checkpoint_to_string(&second), text);
            second.run(&d, 60, &mut m_resumed, |_| Ok(())).unwrap();

            assert_eq!(m_resumed, m_straight, "{method:?}");
            assert_eq!(second.model, straight.model);
            assert_eq!(second.best, straight.best);
            assert_eq!(second.optimizer, straight.optimizer);
        }
    }

    #[test]
    fn file_round_trip() {
        let d = make_domain(&DomainConfig::default(), 2).unwrap();
        let mut st = TrainState::new(config(Method::Davs), &d).unwrap();
        st.run(&d, 25, &mut RunMetrics::default(), |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&st, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, st.model);
        assert_eq!(back.schedule, st.schedule);
        assert_eq!(back.step, 25);
    }

    #[test]
    fn version_and_shape_errors() {
        let d = make_domain(&DomainConfig::default(), 3).unwrap();
        let st = TrainState::new(config(Method::Dsvs), &d).unwrap();
        let text = checkpoint_to_string(&st);

        let wrong_version = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        let err = checkpoint_from_str(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config"]["encoder"]["embed_dim"] = 8.into();
        let err = checkpoint_from_str(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");

        assert!(checkpoint_from_str("{not json").is_err());
        assert!(checkpoint_from_str("{\"step\": 3}").unwrap_err().to_string().contains("format_version"));
    }

    #[test]
    fn compatibility_names_embed_dim() {
        let d = make_domain(&DomainConfig::default(), 3).unwrap();
        let st = TrainState::new(config(Method::Svs), &d).unwrap();
        let mut other = config(Method::Svs);
        other.encoder.embed_dim = 8;
        let err = check_compatible(&st, &other).unwrap_err().to_string();
        assert!(err.contains("embed_dim"), "{err}");
        assert!(check_compatible(&st, &config(Method::Svs)).is_ok());
    }
}
