//! Episodic meta-training, validation and meta-testing.
//!
//! Every random draw comes from a ChaCha8 stream derived from the run seed,
//! one stream per purpose, so adding a validation pass or a noise draw never
//! shifts the episodes a run trains on.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortized::{AuxSchedule, GeneratorParams};
use crate::config::{Method, TrainConfig};
use crate::encoder::EncoderParams;
use crate::episodic::{Partition, SyntheticDomain};
use crate::error::{Error, Result};
use crate::linear::FlatParams;
use crate::metric::{DistanceKind, Scaling};
use crate::objective::{episode_objective, episode_predictions, generated_posterior, ScaleSource};
use crate::optim::{clip_grad_norm, OptimizerState};
use crate::variational::{apply_update, PriorPenalty, ScaleKind, VariationalPosterior, SIGMA_FLOOR};

pub const STREAM_ENCODER_INIT: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_NOISE: u64 = 3;
pub const STREAM_GENERATOR_INIT: u64 = 4;
/// Evaluation streams are `base << 32 | episode_index`.
pub const STREAM_VALIDATION: u64 = 5;
pub const STREAM_TEST: u64 = 6;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scaler {
    /// Scaling pinned to 1.
    Unit,
    Variational(VariationalPosterior),
    Amortized(GeneratorParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub method: Method,
    pub distance: DistanceKind,
    pub encoder: EncoderParams,
    pub scaler: Scaler,
}

impl Model {
    pub fn init(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        let enc = &config.encoder;
        let encoder = EncoderParams::mlp(
            input_dim,
            &enc.hidden,
            enc.embed_dim,
            enc.normalize,
            &mut rng_for(config.seed, STREAM_ENCODER_INIT),
        );
        let s = &config.scaling;
        let scaler = match config.method {
            Method::Pn => Scaler::Unit,
            Method::Svs => Scaler::Variational(VariationalPosterior::global(s.mu_init, s.sigma_init, s.sigma_mode)),
            Method::Dsvs => Scaler::Variational(VariationalPosterior::dimensional(
                enc.embed_dim,
                s.mu_init,
                s.sigma_init,
                s.sigma_mode,
            )),
            Method::Davs => Scaler::Amortized(GeneratorParams::init(
                enc.embed_dim,
                s.generator_hidden,
                s.mu_init,
                s.sigma_init,
                &mut rng_for(config.seed, STREAM_GENERATOR_INIT),
            )),
        };
        if let Scaler::Variational(p) = &scaler {
            p.validate()?;
        }
        Ok(Model {
            method: config.method,
            distance: config.distance,
            encoder,
            scaler,
        })
    }

    pub fn posterior(&self) -> Option<&VariationalPosterior> {
        match &self.scaler {
            Scaler::Variational(p) => Some(p),
            _ => None,
        }
    }

    /// Learned posterior means (shared scaling methods only).
    pub fn mu(&self) -> Option<&[f64]> {
        self.posterior().map(|p| p.mu.as_slice())
    }

    fn is_finite(&self) -> bool {
        let enc = self.encoder.to_flat().iter().all(|v| v.is_finite());
        enc && match &self.scaler {
            Scaler::Unit => true,
            Scaler::Variational(p) => p.mu.iter().chain(&p.sigma).all(|v| v.is_finite()),
            Scaler::Amortized(g) => g.to_flat().iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub step: u64,
    pub val_acc: f64,
    pub model: Model,
}

/// Running sums between two metrics rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogWindow {
    pub steps: u64,
    pub loss_sum: f64,
    pub correct: u64,
    pub total: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lambda: Option<f64>,
    pub mu_mean: Option<f64>,
    pub mu_min: Option<f64>,
    pub mu_max: Option<f64>,
    pub wallclock_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuRow {
    pub step: u64,
    pub dim: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub mu_rows: Vec<MuRow>,
}

impl RunMetrics {
    pub fn write_csv<W: std::io::Write>(&self, out: W, header: bool) -> Result<()> {
        write_rows(&self.rows, out, header)
    }

    pub fn write_mu_csv<W: std::io::Write>(&self, out: W, header: bool) -> Result<()> {
        write_rows(&self.mu_rows, out, header)
    }
}

fn write_rows<T: Serialize, W: std::io::Write>(rows: &[T], out: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: &str = "step,loss,train_acc,val_acc,lambda,mu_mean,mu_min,mu_max,wallclock_ms";
pub const MU_HEADER: &str = "step,dim,value";

/// What one training step observed.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub correct: usize,
    pub num_query: usize,
    pub alpha_len: usize,
    pub generated_mu: Option<Vec<f64>>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed training episodes.
    pub step: u64,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub schedule: Option<AuxSchedule>,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub best: Option<BestModel>,
    pub window: LogWindow,
}

impl TrainState {
    pub fn new(config: TrainConfig, domain: &SyntheticDomain) -> Result<Self> {
        let config = config.resolve()?;
        let model = Model::init(&config, domain.input_dim())?;
        let optimizer = OptimizerState::new(config.train.optimizer, model.encoder.num_params());
        let schedule = match config.method {
            Method::Davs => Some(AuxSchedule::new(config.scaling.gamma)?),
            _ => None,
        };
        Ok(TrainState {
            data_rng: rng_for(config.seed, STREAM_DATA),
            noise_rng: rng_for(config.seed, STREAM_NOISE),
            config,
            step: 0,
            model,
            optimizer,
            schedule,
            best: None,
            window: LogWindow::default(),
        })
    }

    pub fn lambda(&self) -> Option<f64> {
        self.schedule.map(|s| s.lambda())
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.config.train.episodes_per_epoch
    }

    /// The best-validation model, or the current one when validation never ran.
    pub fn selected_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }

    fn penalty(&self) -> Option<PriorPenalty> {
        self.config.scaling.use_prior.then(|| PriorPenalty {
            prior: self.config.scaling.prior,
            weight: self.config.kl_weight(),
        })
    }

    fn draw_epsilon(&mut self) -> Result<Vec<f64>> {
        let dim = match &self.model.scaler {
            Scaler::Unit => return Ok(Vec::new()),
            Scaler::Variational(p) => p.dim(),
            Scaler::Amortized(g) => g.embed_dim,
        };
        let positive = self.config.scaling.positive_alpha;
        for _ in 0..1000 {
            let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut self.noise_rng)).collect();
            match &self.model.scaler {
                Scaler::Variational(p) if positive => {
                    if p.sigma.iter().zip(&p.mu).zip(&eps).all(|((s, m), e)| s * e + m > 0.0) {
                        return Ok(eps);
                    }
                }
                _ => return Ok(eps),
            }
        }
        Err(Error::Sampling("no positive scaling draw in 1000 attempts".into()))
    }

    /// One episode: sample, forward/backward, update every parameter group.
    ///
    /// The update is committed only when every new value is finite, so on a
    /// `Diverged` error the state still holds the last good parameters.
    pub fn train_step(&mut self, domain: &SyntheticDomain) -> Result<StepReport> {
        let started = Instant::now();
        let t = self.config.train.clone();
        let episode = domain.sample_episode(Partition::Train, t.way, t.shot, t.queries, self.step, &mut self.data_rng)?;
        let epsilon = self.draw_epsilon()?;
        let penalty = self.penalty();
        let unit = Scaling::Global(1.0);
        let source = match &self.model.scaler {
            Scaler::Unit => ScaleSource::Fixed(&unit),
            Scaler::Variational(p) => ScaleSource::Variational {
                posterior: p,
                penalty: penalty.as_ref(),
            },
            Scaler::Amortized(g) => ScaleSource::Amortized {
                generator: g,
                penalty: penalty.as_ref(),
                lambda: self.schedule.map_or(0.0, |s| s.lambda()),
            },
        };
        let diverged = |detail: String| Error::Diverged {
            step: self.step + 1,
            detail,
        };
        let out = match episode_objective(&self.model.encoder, source, self.model.distance, &episode, &epsilon) {
            Ok(o) => o,
            Err(Error::Numeric { context, detail }) => return Err(diverged(format!("{context}: {detail}"))),
            Err(e) => return Err(e),
        };

        let mut next = self.model.clone();
        let mut optimizer = self.optimizer.clone();
        let mut params = next.encoder.to_flat();
        let mut grads = out.encoder_grads.to_flat();
        if let Some(c) = t.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        optimizer.step(&mut params, &grads, t.l_theta)?;
        next.encoder.read_flat(&params)?;
        match &mut next.scaler {
            Scaler::Unit => {}
            Scaler::Variational(p) => {
                let g = out.posterior_grads.as_ref().expect("variational step yields posterior gradients");
                *p = match apply_update(p, g, self.config.l_psi()) {
                    Ok(p) => p,
                    Err(Error::Numeric { detail, .. }) => return Err(diverged(detail)),
                    Err(e) => return Err(e),
                };
            }
            Scaler::Amortized(gen) => {
                let g = out.generator_grads.as_ref().expect("amortized step yields generator gradients");
                let lr = self.config.scaling.l_beta;
                let mut flat = gen.to_flat();
                flat.iter_mut().zip(g.to_flat()).for_each(|(p, g)| *p -= lr * g);
                gen.read_flat(&flat)?;
            }
        }
        if !out.loss.is_finite() || !next.is_finite() {
            return Err(diverged(format!("non-finite loss or parameters (loss {})", out.loss)));
        }

        self.model = next;
        self.optimizer = optimizer;
        self.step += 1;
        if self.step.is_multiple_of(t.episodes_per_epoch) {
            self.schedule = self.schedule.map(AuxSchedule::decay);
        }
        Ok(StepReport {
            step: self.step,
            loss: out.loss,
            correct: out.correct,
            num_query: out.num_query,
            alpha_len: out.sample.as_ref().map_or(0, |s| s.alpha.len()),
            generated_mu: out.generated.map(|p| p.mu),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn check_invariants(&self, report: &StepReport) -> Result<()> {
        if let Some(l) = self.lambda() {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Contract(format!("lambda {l} left [0, 1]")));
            }
        }
        let expected_alpha = match &self.model.scaler {
            Scaler::Unit => 0,
            Scaler::Variational(p) => {
                if p.sigma_mode == crate::variational::SigmaMode::Learned && p.sigma.iter().any(|&s| s < SIGMA_FLOOR) {
                    return Err(Error::Contract("learned sigma below its floor".into()));
                }
                p.dim()
            }
            Scaler::Amortized(g) => g.embed_dim,
        };
        if report.alpha_len != expected_alpha {
            return Err(Error::Contract(format!(
                "episode used {} scaling draws, expected {expected_alpha}",
                report.alpha_len
            )));
        }
        Ok(())
    }

    /// Accuracy on the validation split; the episodes are the same at every call.
    pub fn validate(&self, domain: &SyntheticDomain) -> Result<f64> {
        let t = &self.config.train;
        let spec = EvalSpec {
            partition: Partition::Val,
            way: t.way,
            shot: t.shot,
            queries: t.queries,
            episodes: self.config.validation.episodes,
            seed: self.config.seed,
            stream: STREAM_VALIDATION,
            scale_factor: 1.0,
            dump_task_mu: false,
        };
        Ok(meta_test(&self.model, domain, &spec)?.mean)
    }

    /// Trains until `step == until`, appending rows to `metrics`. `after_step`
    /// runs after every committed step (checkpoint hooks).
    pub fn run(
        &mut self,
        domain: &SyntheticDomain,
        until: u64,
        metrics: &mut RunMetrics,
        mut after_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let report = self.train_step(domain)?;
            self.window.steps += 1;
            self.window.loss_sum += report.loss;
            self.window.correct += report.correct as u64;
            self.window.total += report.num_query as u64;
            self.window.wall_ms += report.wall_ms;

            let step = self.step;
            let log = &self.config.log;
            let val_every = self.config.validation.every;
            let val_acc = if val_every > 0 && step.is_multiple_of(val_every) {
                let acc = self.validate(domain)?;
                if self.best.as_ref().is_none_or(|b| acc > b.val_acc) {
                    self.best = Some(BestModel {
                        step,
                        val_acc: acc,
                        model: self.model.clone(),
                    });
                }
                Some(acc)
            } else {
                None
            };
            if step.is_multiple_of(log.every) || val_acc.is_some() {
                self.check_invariants(&report)?;
                let mu = self.model.mu().map(<[f64]>::to_vec).or(report.generated_mu.clone());
                let w = &self.window;
                metrics.rows.push(MetricsRow {
                    step,
                    loss: w.loss_sum / w.steps as f64,
                    train_acc: w.correct as f64 / w.total as f64,
                    val_acc,
                    lambda: self.lambda(),
                    mu_mean: mu.as_ref().map(|m| m.iter().sum::<f64>() / m.len() as f64),
                    mu_min: mu.as_ref().map(|m| m.iter().copied().fold(f64::INFINITY, f64::min)),
                    mu_max: mu.as_ref().map(|m| m.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    wallclock_ms: log.wallclock.then(|| w.wall_ms / w.steps as f64),
                });
                self.window = LogWindow::default();
            }
            if log.mu_every > 0 && step.is_multiple_of(log.mu_every) {
                if let Some(mu) = self.model.mu() {
                    metrics.mu_rows.extend(mu.iter().enumerate().map(|(dim, &value)| MuRow { step, dim, value }));
                }
            }
            after_step(self)?;
        }
        Ok(())
    }
}

/// Trains for the configured budget.
pub fn train(config: TrainConfig, domain: &SyntheticDomain) -> Result<(TrainState, RunMetrics)> {
    let mut state = TrainState::new(config, domain)?;
    let mut metrics = RunMetrics::default();
    let until = state.config.train.episodes;
    state.run(domain, until, &mut metrics, |_| Ok(()))?;
    Ok((state, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub partition: Partition,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: u64,
    pub seed: u64,
    pub stream: u64,
    /// Multiplies the test-time scaling (prediction is invariant to it).
    pub scale_factor: f64,
    /// Keep the generated per-task posterior means (amortized models).
    pub dump_task_mu: bool,
}

impl EvalSpec {
    pub fn test(config: &TrainConfig, seed: u64) -> Self {
        EvalSpec {
            partition: Partition::Test,
            way: config.test.way,
            shot: config.test.shot,
            queries: config.test.queries,
            episodes: config.test.episodes,
            seed,
            stream: STREAM_TEST,
            scale_factor: 1.0,
            dump_task_mu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Half-width of the 95% interval, `1.96 * stderr`.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub task_mu: Option<Vec<Vec<f64>>>,
}

/// Sum by recursive halving: the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Mean and 95% half-width over independent accuracies.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// The scaling a trained model predicts with: the posterior mean, or the
/// generated mean for this episode.
fn inference_scaling(model: &Model, episode: &crate::episodic::Episode) -> Result<(Scaling, Option<Vec<f64>>)> {
    Ok(match &model.scaler {
        Scaler::Unit => (Scaling::Global(1.0), None),
        Scaler::Variational(p) => (p.mean_scaling(), None),
        Scaler::Amortized(g) => {
            let post = generated_posterior(&model.encoder, g, episode)?;
            (crate::variational::to_scaling(ScaleKind::Dimensional, &post.mu), Some(post.mu))
        }
    })
}

/// Meta-test: mean query accuracy over independent episodes with no
/// sampling of the scaling. Episode `i` draws from its own stream, so the
/// result is the same for any thread count.
pub fn meta_test(model: &Model, domain: &SyntheticDomain, spec: &EvalSpec) -> Result<EvalResult> {
    if spec.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if !(spec.scale_factor > 0.0 && spec.scale_factor.is_finite()) {
        return Err(Error::Config("scale_factor must be positive".into()));
    }
    let per_episode: Vec<(f64, Option<Vec<f64>>)> = (0..spec.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(spec.seed, (spec.stream << 32) | i);
            let ep = domain.sample_episode(spec.partition, spec.way, spec.shot, spec.queries, i, &mut rng)?;
            let (scaling, mu) = inference_scaling(model, &ep)?;
            let scaling = match scaling {
                Scaling::Global(a) => Scaling::Global(a * spec.scale_factor),
                Scaling::Dimensional(w) => Scaling::Dimensional(w.iter().map(|v| v * spec.scale_factor).collect()),
            };
            let pred = episode_predictions(&model.encoder, &ep, &scaling, model.distance)?;
            let correct = pred.iter().zip(&ep.query_labels).filter(|(p, y)| p == y).count();
            Ok((correct as f64 / ep.num_query() as f64, mu))
        })
        .collect::<Result<_>>()?;
    let (accuracies, mus): (Vec<f64>, Vec<Option<Vec<f64>>>) = per_episode.into_iter().unzip();
    let (mean, ci95) = mean_ci(&accuracies);
    let task_mu = spec.dump_task_mu.then(|| mus.into_iter().flatten().collect::<Vec<_>>()).filter(|v| !v.is_empty());
    Ok(EvalResult {
        mean,
        ci95,
        accuracies,
        task_mu,
    })
}

/// Mean and 95% half-width of final accuracies across runs.
pub fn aggregate_runs(accuracies: &[f64]) -> (f64, f64) {
    mean_ci(accuracies)
}
