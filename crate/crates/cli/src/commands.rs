use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use varscale_core::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use varscale_core::config::{Method, TrainConfig};
use varscale_core::episodic::make_domain;
use varscale_core::train::{aggregate_runs, meta_test, EvalResult, EvalSpec, RunMetrics, TrainState};
use varscale_core::Error;
use varscale_verify::gradcheck::{gradcheck as run_gradcheck, write_reports};

use crate::error::{CliError, CliResult};
use crate::settings::{env_seed, parse_overrides, read_text, resolve_config, take_flag};
use crate::{EvalArgs, GradcheckArgs, SweepArgs, TrainArgs, WhichModel};

const MANIFEST: &str = "manifest.json";
const METRICS: &str = "metrics.csv";
const MU: &str = "mu.csv";
const CHECKPOINT: &str = "checkpoint.json";
const LAST_GOOD: &str = "last-good.json";

/// File names are relative to the manifest's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: String,
    pub mu: String,
    pub checkpoint: Option<String>,
    pub last_good: Option<String>,
    pub periodic: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSummary {
    pub episodes: u64,
    pub seed: u64,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub status: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub steps_completed: u64,
    pub artifacts: Artifacts,
    pub test: Option<TestSummary>,
    pub error: Option<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn write_metrics(dir: &Path, metrics: &RunMetrics) -> CliResult<()> {
    metrics.write_csv(fs::File::create(dir.join(METRICS))?, true)?;
    metrics.write_mu_csv(fs::File::create(dir.join(MU))?, true)?;
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub struct RunOutcome {
    pub state: TrainState,
    pub test: EvalResult,
    pub manifest: RunManifest,
}

/// Trains `config` into `dir`. On divergence the last good state is saved,
/// the manifest records the failure and the error is returned.
pub fn train_into(config: TrainConfig, dir: &Path) -> CliResult<RunOutcome> {
    fs::create_dir_all(dir)?;
    let started = now_ms();
    let domain = make_domain(&config.domain, config.seed)?;
    let mut state = TrainState::new(config, &domain)?;
    let config = state.config.clone();
    let mut metrics = RunMetrics::default();
    let mut periodic = Vec::new();
    let every = config.log.checkpoint_every;
    let result = state.run(&domain, config.train.episodes, &mut metrics, |s| {
        if every > 0 && s.step % every == 0 {
            let name = format!("checkpoint-{:08}.json", s.step);
            save_checkpoint(s, &dir.join(&name))?;
            periodic.push(name);
        }
        Ok(())
    });
    write_metrics(dir, &metrics)?;
    let mut manifest = RunManifest {
        format_version: FORMAT_VERSION,
        status: "completed".into(),
        seed: config.seed,
        config: config.clone(),
        steps_completed: state.step,
        artifacts: Artifacts {
            metrics: METRICS.into(),
            mu: MU.into(),
            periodic,
            ..Artifacts::default()
        },
        test: None,
        error: None,
        started_unix_ms: started,
        finished_unix_ms: 0,
    };
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            save_checkpoint(&state, &dir.join(LAST_GOOD))?;
            manifest.artifacts.last_good = Some(LAST_GOOD.into());
        }
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
        manifest.finished_unix_ms = now_ms();
        write_manifest(dir, &manifest)?;
        let hint = manifest
            .artifacts
            .last_good
            .as_ref()
            .map(|p| format!("; last good state saved to {}", dir.join(p).display()))
            .unwrap_or_default();
        return Err(CliError::Runtime(format!("{e}{hint}")));
    }
    save_checkpoint(&state, &dir.join(CHECKPOINT))?;
    manifest.artifacts.checkpoint = Some(CHECKPOINT.into());
    let spec = EvalSpec::test(&config, config.seed);
    let test = meta_test(state.selected_model(), &domain, &spec)?;
    manifest.test = Some(TestSummary {
        episodes: spec.episodes,
        seed: spec.seed,
        accuracy: test.mean,
        ci95: test.ci95,
    });
    manifest.finished_unix_ms = now_ms();
    write_manifest(dir, &manifest)?;
    Ok(RunOutcome { state, test, manifest })
}

fn base_text(config: Option<&Path>, manifest: Option<&Path>) -> CliResult<String> {
    if let Some(path) = manifest {
        let m: RunManifest = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::usage(format!("unreadable manifest {}: {e}", path.display())))?;
        return Ok(m.config.to_toml());
    }
    config.map_or_else(|| Ok(String::new()), read_text)
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let mut overrides = parse_overrides(&args.overrides)?;
    let path = |p: Option<PathBuf>| p.map(|p| p.to_string_lossy().into_owned());
    let config_path = take_flag(&mut overrides, "config", path(args.config))?;
    let manifest_path = take_flag(&mut overrides, "manifest", path(args.manifest))?;
    let out_dir = take_flag(&mut overrides, "out", path(args.out))?;
    if config_path.is_some() && manifest_path.is_some() {
        return Err(CliError::usage("--config and --manifest are mutually exclusive"));
    }
    let text = base_text(config_path.as_deref().map(Path::new), manifest_path.as_deref().map(Path::new))?;
    let config = resolve_config(&text, &overrides)?;
    let dir = out_dir.map(PathBuf::from).unwrap_or_else(|| match &config.log.dir {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from("runs").join(format!("{}-seed{}", config.method.name(), config.seed)),
    });
    let out = train_into(config, &dir)?;
    let c = &out.manifest.config;
    println!(
        "{} seed {}: {} episodes, test accuracy {:.4} ± {:.4} (95% CI, {} episodes)",
        c.method.name(),
        c.seed,
        out.state.step,
        out.test.mean,
        out.test.ci95,
        c.test.episodes
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn default_dump_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy());
    checkpoint.with_file_name(format!("{stem}-task-mu.csv"))
}

fn write_task_mu(path: &Path, task_mu: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "dim", "mu"])?;
    for (task, mu) in task_mu.iter().enumerate() {
        for (dim, v) in mu.iter().enumerate() {
            w.write_record([task.to_string(), dim.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    if args.checkpoint.len() > 1 && (args.dump.is_some() || args.episodes_csv.is_some()) {
        return Err(CliError::usage("--dump and --episodes-csv take a single --checkpoint"));
    }
    if args.episodes == Some(0) {
        return Err(CliError::usage("--episodes must be at least 1"));
    }
    let fallback_seed = env_seed()?;
    let mut means = Vec::new();
    for path in &args.checkpoint {
        let state = load_checkpoint(path)?;
        let config = &state.config;
        let seed = args.seed.or(fallback_seed).unwrap_or(config.seed);
        let domain = make_domain(&config.domain, config.seed)?;
        let mut spec = EvalSpec::test(config, seed);
        if let Some(n) = args.episodes {
            spec.episodes = n;
        }
        spec.dump_task_mu = config.method == Method::Davs;
        let model = match args.model {
            WhichModel::Best => state.selected_model(),
            WhichModel::Last => &state.model,
        };
        let res = meta_test(model, &domain, &spec)?;
        println!(
            "{}: accuracy {:.4} ± {:.4} (95% CI, {} episodes, seed {seed})",
            path.display(),
            res.mean,
            res.ci95,
            spec.episodes
        );
        if let Some(task_mu) = &res.task_mu {
            let dump = args.dump.clone().unwrap_or_else(|| default_dump_path(path));
            write_task_mu(&dump, task_mu)?;
            println!("per-task scaling for {} tasks written to {}", task_mu.len(), dump.display());
        }
        if let Some(p) = &args.episodes_csv {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(["episode", "accuracy"])?;
            for (i, a) in res.accuracies.iter().enumerate() {
                w.write_record([i.to_string(), a.to_string()])?;
            }
            w.flush()?;
        }
        means.push(res.mean);
    }
    if means.len() > 1 {
        let (m, ci) = aggregate_runs(&means);
        println!("across {} runs: accuracy {m:.4} ± {ci:.4} (95% CI)", means.len());
    }
    Ok(())
}

fn write_matrix(path: &Path, rows: &[f64], cols: &[f64], values: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = std::iter::once("mu0".to_string())
        .chain(cols.iter().map(|c| c.to_string()))
        .collect();
    w.write_record(&header)?;
    for (r, row) in rows.iter().zip(values) {
        let rec: Vec<String> = std::iter::once(r.to_string())
            .chain(row.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepCell {
    mu0: f64,
    mu_init: f64,
    accuracy: f64,
    ci95: f64,
    final_mu_mean: f64,
    final_mu_min: f64,
    final_mu_max: f64,
    dir: String,
}

fn parse_grid(name: &str, parsed: Vec<f64>, late: Option<String>) -> CliResult<Vec<f64>> {
    let mut grid = parsed;
    if let Some(list) = late {
        for item in list.split(',') {
            let v = item
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("--{name}: `{item}` is not a number")))?;
            grid.push(v);
        }
    }
    if grid.iter().any(|v: &f64| !v.is_finite()) {
        return Err(CliError::usage(format!("--{name} values must be finite")));
    }
    Ok(grid)
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let mut base = parse_overrides(&args.overrides)?;
    let mu0_grid = parse_grid("mu0", args.mu0, take_flag(&mut base, "mu0", None)?)?;
    let mu_init_grid = parse_grid("mu-init", args.mu_init, take_flag(&mut base, "mu_init", None)?)?;
    if mu0_grid.is_empty() || mu_init_grid.is_empty() {
        return Err(CliError::usage("empty grid: --mu0 and --mu-init each need at least one value"));
    }
    let config_path = take_flag(&mut base, "config", args.config.map(|p| p.to_string_lossy().into_owned()))?;
    let out_dir = PathBuf::from(take_flag(&mut base, "out", None)?.unwrap_or_else(|| args.out.to_string_lossy().into_owned()));
    let text = base_text(config_path.as_deref().map(Path::new), None)?;
    let probe = resolve_config(&text, &base)?;
    if !matches!(probe.method, Method::Svs | Method::Dsvs) {
        return Err(CliError::usage(format!(
            "sweep needs a method with a learned scaling posterior (svs or dsvs), got {}",
            probe.method.name()
        )));
    }
    fs::create_dir_all(&out_dir)?;
    let mut acc = vec![vec![0.0; mu_init_grid.len()]; mu0_grid.len()];
    let mut mu = acc.clone();
    let mut cells = Vec::new();
    for (i, &mu0) in mu0_grid.iter().enumerate() {
        for (j, &mu_init) in mu_init_grid.iter().enumerate() {
            let mut overrides = base.clone();
            overrides.push(("scaling.prior.mu0".into(), format!("{mu0:?}")));
            overrides.push(("scaling.mu_init".into(), format!("{mu_init:?}")));
            let config = resolve_config(&text, &overrides)?;
            let name = format!("mu0_{mu0}_mu_init_{mu_init}");
            let out = train_into(config, &out_dir.join(&name))?;
            let final_mu = out.state.model.mu().expect("svs and dsvs keep a posterior").to_vec();
            acc[i][j] = out.test.mean;
            mu[i][j] = mean(&final_mu);
            println!(
                "mu0 {mu0}, mu_init {mu_init}: accuracy {:.4} ± {:.4}, final mu {:.4}",
                out.test.mean, out.test.ci95, mu[i][j]
            );
            cells.push(SweepCell {
                mu0,
                mu_init,
                accuracy: out.test.mean,
                ci95: out.test.ci95,
                final_mu_mean: mu[i][j],
                final_mu_min: final_mu.iter().copied().fold(f64::INFINITY, f64::min),
                final_mu_max: final_mu.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                dir: name,
            });
        }
    }
    write_matrix(&out_dir.join("accuracy.csv"), &mu0_grid, &mu_init_grid, &acc)?;
    write_matrix(&out_dir.join("final_mu.csv"), &mu0_grid, &mu_init_grid, &mu)?;
    let mut w = csv::Writer::from_path(out_dir.join("cells.csv"))?;
    for c in &cells {
        w.serialize(c)?;
    }
    w.flush()?;
    println!("matrices in {}", out_dir.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if args.instances == 0 {
        return Err(CliError::usage("--instances must be at least 1"));
    }
    if args.threshold.is_nan() || args.threshold <= 0.0 {
        return Err(CliError::usage("--threshold must be positive"));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let reports = run_gradcheck(args.method, seed, args.instances, args.threshold)?;
    match &args.out {
        Some(p) => write_reports(&reports, fs::File::create(p)?)?,
        None => write_reports(&reports, std::io::stdout().lock())?,
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    eprintln!(
        "gradcheck {} seed {seed}: {} entries over {} instances, {} failed, worst relative error {worst:.3e} (threshold {:e})",
        args.method.name(),
        reports.len(),
        args.instances,
        failed.len(),
        args.threshold
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let sample: Vec<String> = failed
            .iter()
            .take(5)
            .map(|r| format!("instance {} {} ({:.3e})", r.instance, r.param, r.rel_error))
            .collect();
        Err(CliError::Verification(format!(
            "{} gradient entries exceed the threshold: {}",
            failed.len(),
            sample.join(", ")
        )))
    }
}
