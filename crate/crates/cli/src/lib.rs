//! Command-line driver: dataset generation, training runs, sweeps,
//! post-hoc analysis and step-time benchmarks.
//!
//! Configuration is a TOML file layered over the profile defaults, then
//! `key=value` overrides (dotted keys) on top.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qflow_core::analysis;
use qflow_core::config::{Method, Profile, TrainConfig};
use qflow_core::envs2d::{DatasetName, OfflineDataset2D};
use qflow_core::experiment::{self, RunManifest, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Core(#[from] qflow_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} sweep cells failed (see index.json)")]
    SweepFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Keys that are absent from the default tree because they default to "unset".
pub const OPTIONAL_KEYS: [&str; 5] = [
    "dataset.noise",
    "dataset.path",
    "train.bc_epochs",
    "train.steps",
    "train.grad_clip",
];

fn default_tree(profile: Profile) -> toml::Table {
    match toml::Value::try_from(TrainConfig::for_profile(profile)) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn leaf_keys(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(sub) => leaf_keys(sub, &key, out),
            _ => out.push(key),
        }
    }
}

/// Every key accepted by `--set`.
pub fn valid_keys() -> Vec<String> {
    let mut keys = Vec::new();
    leaf_keys(&default_tree(Profile::TwoD), "", &mut keys);
    keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    keys.sort();
    keys
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(CliError::Usage(format!("override `{s}` is not of the form key=value"))),
    }
}

fn set_key(tree: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = tree;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("validated path is a table");
    }
    t.insert(last.to_string(), value);
}

/// Resolves the profile defaults, the optional config file and the overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let label = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    let file: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str(&text).map_err(|e| CliError::Config {
                path: label.clone(),
                msg: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    let valid = valid_keys();
    for (k, _) in overrides {
        if !valid.iter().any(|v| v == k) {
            return Err(CliError::Usage(format!(
                "unknown override key `{k}`; valid keys: {}",
                valid.join(", ")
            )));
        }
    }
    let profile_raw = overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "profile")
        .map(|(_, v)| v.clone())
        .or_else(|| file.get("profile").and_then(|v| v.as_str()).map(str::to_string));
    let profile = match profile_raw.as_deref() {
        None | Some("2d") => Profile::TwoD,
        Some("standard") => Profile::Standard,
        Some(other) => {
            return Err(CliError::Config {
                path: label,
                msg: format!("unknown profile `{other}` (expected 2d or standard)"),
            })
        }
    };
    let mut tree = default_tree(profile);
    merge(&mut tree, file);
    for (k, v) in overrides {
        set_key(&mut tree, k, parse_value(v));
    }
    let cfg: TrainConfig = toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| CliError::Config {
        path: label.clone(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_root() -> PathBuf {
    std::env::var_os("QFLOW_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(io_err(path))
}


#[derive(Debug, Parser)]
#[command(name = "qflow", version, about = "Flow-policy offline RL laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a 2D dataset as CSV plus a JSON sidecar.
    Gen(GenArgs),
    /// Run the BC phase and the RL phase of one method.
    Train(TrainArgs),
    /// Train every cell of a coefficient x seed grid.
    Sweep(SweepArgs),
    /// Analyze a saved checkpoint.
    Analyze(AnalyzeArgs),
    /// Time RL steps across methods and flow-step counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// swiss_roll, two_spirals, eight_gaussians or moons.
    pub name: DatasetName,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Noise std in generator units (per-dataset default when omitted).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; files are named after the dataset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config; profile defaults fill anything missing.
    pub config: Option<PathBuf>,
    /// `key=value` override with a dotted key, e.g. `train.lambda=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// RL-phase gradient steps (0 keeps the BC policy).
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    /// Run directory (default `$QFLOW_OUT/<method>-<dataset>-<hash>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda,
    Alpha,
    Beta,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Coefficient to sweep (default: lambda for guided methods, alpha otherwise).
    #[arg(long, value_enum)]
    pub param: Option<SweepParam>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,1.0,5.0")]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    Consistency,
    Landscape,
    Samples,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV (with sidecar). Defaults to regenerating it from the run config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: AnalysisKind,
    /// Config to take eval settings from; defaults to the manifest next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "fbrac,qflow")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50")]
    pub flow_steps: Vec<usize>,
    /// Timed steps per cell, after the warm-up steps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Output CSV (default `$QFLOW_OUT/timing.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
    }
}

/// Writes `<out>/<name>.csv` and `<out>/<name>.json`; returns the CSV path.
pub fn cmd_gen(a: &GenArgs) -> Result<PathBuf> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let ds = OfflineDataset2D::generate(a.name, a.n, a.noise, a.seed)?;
    let dir = a.out.clone().unwrap_or_else(out_root);
    let path = ds.save(&dir, a.name.name())?;
    log::info!("wrote {} rows to {}", ds.len(), path.display());
    Ok(path)
}

fn overrides(c: &ConfigArgs) -> Result<Vec<(String, String)>> {
    c.set.iter().map(|s| parse_override(s)).collect()
}

/// Resolved config of a `train` invocation: file < flags < `--set`.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut ov = Vec::new();
    if let Some(m) = a.method {
        ov.push(("method".into(), m.name().to_string()));
    }
    let mut num = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            ov.push((k.to_string(), v));
        }
    };
    num("train.lambda", a.lambda.map(|v| format!("{v:?}")));
    num("train.alpha", a.alpha.map(|v| format!("{v:?}")));
    num("train.beta", a.beta.map(|v| format!("{v:?}")));
    num("train.steps", a.steps.map(|v| v.to_string()));
    num("seed", a.seed.map(|v| v.to_string()));
    num("dataset.name", a.dataset.map(|d| d.name().to_string()));
    ov.extend(overrides(&a.config)?);
    load_config(a.config.config.as_deref(), &ov)
}

fn run_dir(cfg: &TrainConfig) -> PathBuf {
    out_root().join(format!(
        "{}-{}-{}",
        cfg.method,
        cfg.dataset.name,
        &cfg.hash()[..12]
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let cfg = train_config(a)?;
    let out = a.out.clone().unwrap_or_else(|| run_dir(&cfg));
    train_into(&cfg, &out)
}

fn train_into(cfg: &TrainConfig, out: &Path) -> Result<RunManifest> {
    let (ds, fp) = experiment::load_dataset(cfg)?;
    log::info!("{} on {} -> {}", cfg.method, cfg.dataset.name, out.display());
    Ok(experiment::run_experiment(cfg, &ds, &fp, out)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub config_hash: String,
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub dir: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepIndex {
    pub cells: Vec<SweepCell>,
    pub failed: usize,
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<SweepIndex> {
    if a.values.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value and one seed".into()));
    }
    let base = load_config(a.config.config.as_deref(), &overrides(&a.config)?)?;
    let param = a.param.unwrap_or(if base.method.uses_guidance() {
        SweepParam::Lambda
    } else {
        SweepParam::Alpha
    });
    let key = match param {
        SweepParam::Lambda => "lambda",
        SweepParam::Alpha => "alpha",
        SweepParam::Beta => "beta",
    };
    let root = a.out.clone().unwrap_or_else(|| out_root().join(format!("sweep-{}", base.method)));
    fs::create_dir_all(&root).map_err(io_err(&root))?;

    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for &value in &a.values {
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match param {
                SweepParam::Lambda => cfg.train.lambda = value,
                SweepParam::Alpha => cfg.train.alpha = value,
                SweepParam::Beta => cfg.train.beta = value,
            }
            cfg.validate()?;
            let hash = cfg.hash();
            if seen.insert(hash.clone()) {
                cells.push((cfg, hash, value, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build worker pool: {e}")))?;
    let results: Vec<SweepCell> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|(cfg, hash, value, seed)| {
                let dir = root.join(format!("{key}{value}-seed{seed}-{}", &hash[..12]));
                let res = train_into(cfg, &dir);
                SweepCell {
                    config_hash: hash.clone(),
                    param: key.to_string(),
                    value: *value,
                    seed: *seed,
                    dir: dir.display().to_string(),
                    ok: res.is_ok(),
                    error: res.as_ref().err().map(|e| e.to_string()),
                    summary: res.ok().map(|m| m.summary),
                }
            })
            .collect()
    });
    let failed = results.iter().filter(|c| !c.ok).count();
    let index = SweepIndex {
        cells: results,
        failed,
    };
    write_json(&root.join("index.json"), &index)?;
    if failed > 0 {
        return Err(CliError::SweepFailed {
            failed,
            total: index.cells.len(),
        });
    }
    Ok(index)
}

/// Written artifact paths.
pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let st = experiment::load_state(&a.checkpoint)?;
    let ov: Vec<(String, String)> = a.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    let run_dir = a.checkpoint.parent().unwrap_or(Path::new("."));
    let manifest_path = run_dir.join("manifest.json");
    let mut cfg = if a.config.is_some() || !manifest_path.exists() {
        load_config(a.config.as_deref(), &ov)?
    } else {
        let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: RunManifest = serde_json::from_slice(&bytes)?;
        let mut cfg = m.config;
        if !ov.is_empty() {
            // re-apply overrides on top of the recorded config
            let text = toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            let tmp = run_dir.join(".analyze-config.toml");
            fs::write(&tmp, text).map_err(io_err(&tmp))?;
            cfg = load_config(Some(&tmp), &ov)?;
            let _ = fs::remove_file(&tmp);
        }
        cfg
    };
    cfg.method = st.method;
    if let Some(n) = a.n_samples {
        cfg.eval.n_samples = n;
    }
    let out = a.out.clone().unwrap_or_else(|| run_dir.join("analysis"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let files = match a.kind {
        AnalysisKind::Samples => {
            let ds = match &a.dataset {
                Some(p) => OfflineDataset2D::load(p)?,
                None => experiment::load_dataset(&cfg)?.0,
            };
            experiment::write_samples(&out, &st, &ds, &cfg)?.1
        }
        AnalysisKind::Consistency => experiment::write_consistency(&out, &st, &cfg)?.1,
        AnalysisKind::Landscape => experiment::write_landscape(&out, &st, &cfg)?.1,
    };
    Ok(files.into_iter().map(|f| out.join(f)).collect())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<analysis::TimingRow>> {
    let cfg = load_config(a.config.config.as_deref(), &overrides(&a.config)?)?;
    let (methods, flow_steps) = (&a.methods, &a.flow_steps);
    if methods.is_empty() || flow_steps.is_empty() {
        return Err(CliError::Usage("bench needs at least one method and one flow-step count".into()));
    }
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be >= 1".into()));
    }
    let (ds, _) = experiment::load_dataset(&cfg)?;
    let rows = analysis::timing_benchmark(&cfg, &ds, methods, flow_steps, a.steps)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("timing.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&out, analysis::timing_csv(&rows)).map_err(io_err(&out))?;
    Ok(rows)
}
