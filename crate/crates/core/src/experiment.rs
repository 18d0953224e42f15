//! End-to-end runs: BC phase, RL phase, evaluation artifacts and manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, ConsistencyReport, LandscapeGrid, SampleMetrics};
use crate::config::{Method, TrainConfig};
use crate::envs2d::OfflineDataset2D;
use crate::error::{Error, Result};
use crate::flow::empty_states;
use crate::nets::{load_checkpoint, save_checkpoint};
use crate::rng;
use crate::svg;
use crate::trainers::{bc_step, rl_step, sample_indices, StepMetrics, Streams, TrainState};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const VERSION: &str = concat!("qflow-core ", env!("CARGO_PKG_VERSION"));
pub const STATE_KIND: &str = "train_state";

pub const METRICS_HEADER: &str = "step,loss_critic,loss_inter_value,loss_policy,grad_norm_policy,ms_per_step";

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads `cfg.dataset.path` or generates the dataset from `cfg.seed`.
/// Returns the dataset and the SHA-256 of its CSV bytes.
pub fn load_dataset(cfg: &TrainConfig) -> Result<(OfflineDataset2D, String)> {
    match &cfg.dataset.path {
        Some(p) => {
            let path = PathBuf::from(p);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let ds = OfflineDataset2D::load(&path)?;
            if ds.name() != cfg.dataset.name {
                return Err(Error::Config(format!(
                    "{} holds {} but the config names {}",
                    path.display(),
                    ds.name(),
                    cfg.dataset.name
                )));
            }
            Ok((ds, fingerprint(&bytes)))
        }
        None => {
            let ds = OfflineDataset2D::generate(cfg.dataset.name, cfg.dataset.n, cfg.dataset.noise, cfg.seed)?;
            let fp = fingerprint(ds.to_csv().as_bytes());
            Ok((ds, fp))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub n: usize,
    pub fingerprint: String,
    pub high_value_region: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_reward: f64,
    pub on_manifold_frac: f64,
    pub mode_coverage: usize,
    /// Same metrics for the policy right after the BC phase.
    pub bc_mean_reward: f64,
    pub bc_on_manifold_frac: f64,
    pub max_grad_norm_rl: f64,
    pub bc_steps: u64,
    pub rl_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub version: String,
    pub method_label: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetRecord,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub summary: RunSummary,
}

/// Label used in outputs; the one-step baseline is a reconstruction.
pub fn method_label(m: Method) -> &'static str {
    match m {
        Method::Fql => "fql-style",
        other => other.name(),
    }
}

/// Streams metrics rows to `metrics.csv` and wall-clock times to `step_times.csv`.
pub struct MetricsWriter {
    metrics: BufWriter<fs::File>,
    times: BufWriter<fs::File>,
    metrics_path: PathBuf,
    times_path: PathBuf,
    record_wall_clock: bool,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// One CSV row; the inter-value column is empty for methods without `V_ω`.
pub fn metrics_row(m: &StepMetrics, ms: f64) -> String {
    let iv = m.loss_inter_value.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{}",
        m.step, m.loss_critic, iv, m.loss_policy, m.grad_norm_policy, ms
    )
}

impl MetricsWriter {
    pub fn create(dir: &Path, record_wall_clock: bool) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        let times_path = dir.join("step_times.csv");
        let mut w = Self {
            metrics: create(&metrics_path)?,
            times: create(&times_path)?,
            metrics_path,
            times_path,
            record_wall_clock,
        };
        writeln!(w.metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&w.metrics_path, e))?;
        writeln!(w.times, "step,ms").map_err(|e| Error::io(&w.times_path, e))?;
        Ok(w)
    }

    pub fn push(&mut self, m: &StepMetrics) -> Result<()> {
        let ms = if self.record_wall_clock { m.ms_per_step } else { 0.0 };
        writeln!(self.metrics, "{}", metrics_row(m, ms)).map_err(|e| Error::io(&self.metrics_path, e))?;
        writeln!(self.times, "{},{}", m.step, m.ms_per_step).map_err(|e| Error::io(&self.times_path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        self.times.flush().map_err(|e| Error::io(&self.times_path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Bc,
    Rl,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseStats {
    pub steps: u64,
    pub max_grad_norm: f64,
    pub last: Option<StepMetrics>,
}

/// Runs `steps` gradient steps of `phase`, handing each row to `sink`.
pub fn run_phase(
    st: &mut TrainState,
    rngs: &mut Streams,
    cfg: &TrainConfig,
    ds: &OfflineDataset2D,
    phase: Phase,
    steps: u64,
    mut sink: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<PhaseStats> {
    let mut stats = PhaseStats::default();
    let every = (steps / 10).max(1);
    for i in 0..steps {
        let idx = sample_indices(ds.len(), cfg.train.batch_size, &mut rngs.batch);
        let batch = ds.batch(&idx);
        let m = match phase {
            Phase::Bc => bc_step(st, &batch, cfg, rngs)?,
            Phase::Rl => rl_step(st, &batch, cfg, rngs)?,
        };
        stats.max_grad_norm = stats.max_grad_norm.max(m.grad_norm_policy);
        sink(&m)?;
        if (i + 1) % every == 0 {
            log::info!(
                "{:?} {}/{} critic={:.4} policy={:.4} |g|={:.3}",
                phase,
                i + 1,
                steps,
                m.loss_critic,
                m.loss_policy,
                m.grad_norm_policy
            );
        }
        stats.last = Some(m);
        stats.steps += 1;
    }
    Ok(stats)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Draws evaluation actions and writes `samples.csv` / `samples.svg`.
pub fn write_samples(dir: &Path, st: &TrainState, ds: &OfflineDataset2D, cfg: &TrainConfig) -> Result<(SampleMetrics, Vec<String>)> {
    let mut rng = rng::stream(cfg.seed, "eval/samples");
    let (a, metrics) = analysis::evaluate_policy(st, ds, cfg, &mut rng)?;
    let pts = analysis::tensor_points(&a);
    let spec = ds.reward_spec();
    let rewards: Vec<f64> = pts.iter().map(|&p| spec.reward(p)).collect();
    let mut csv = String::from("x,y,reward\n");
    for (p, r) in pts.iter().zip(&rewards) {
        csv.push_str(&format!("{},{},{}\n", p[0], p[1], r));
    }
    write(&dir.join("samples.csv"), csv)?;
    let background: Vec<[f64; 2]> = ds.points().iter().step_by(5).copied().collect();
    let title = format!(
        "{} on {}: mean reward {:.3}",
        method_label(st.method),
        ds.name(),
        metrics.mean_reward
    );
    write(&dir.join("samples.svg"), svg::scatter(&title, &background, &pts, &rewards))?;
    write(&dir.join("samples_summary.json"), serde_json::to_vec_pretty(&metrics)?)?;
    Ok((
        metrics,
        vec!["samples.csv".into(), "samples.svg".into(), "samples_summary.json".into()],
    ))
}

pub fn write_consistency(dir: &Path, st: &TrainState, cfg: &TrainConfig) -> Result<(ConsistencyReport, Vec<String>)> {
    let v = st
        .inter_value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} trains no intermediate value network", st.method)))?;
    let mut rng = rng::stream(cfg.seed, "eval/consistency");
    let taus = analysis::tau_grid(cfg.eval.tau_grid_points);
    let states = empty_states(cfg.eval.consistency_states);
    let report = analysis::consistency_report(v, &st.policy, &states, cfg.eval.consistency_trajs, &taus, &mut rng)?;
    write(&dir.join("consistency.csv"), report.to_csv())?;
    write(&dir.join("consistency.json"), serde_json::to_vec_pretty(&report)?)?;
    write(
        &dir.join("consistency.svg"),
        svg::line_chart("normalized |V(x_tau) - V(x1_hat)| vs tau", &report.taus, &report.mean_normalized),
    )?;
    Ok((
        report,
        vec!["consistency.csv".into(), "consistency.json".into(), "consistency.svg".into()],
    ))
}

pub fn write_landscape(dir: &Path, st: &TrainState, cfg: &TrainConfig) -> Result<(LandscapeGrid, Vec<String>)> {
    let v = st
        .inter_value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} trains no intermediate value network", st.method)))?;
    let grid = analysis::landscape_grid(v, &empty_states(1), &cfg.eval.landscape_taus, cfg.eval.landscape_resolution)?;
    let mut files = vec!["landscape.csv".to_string()];
    write(&dir.join("landscape.csv"), grid.to_csv())?;
    for (i, tau) in grid.taus.iter().enumerate() {
        let heat = format!("landscape_tau{i}.svg");
        let quiv = format!("landscape_grad_tau{i}.svg");
        write(
            &dir.join(&heat),
            svg::heatmap(&format!("V at tau = {tau}"), &grid.values[i], grid.resolution),
        )?;
        write(
            &dir.join(&quiv),
            svg::quiver(&format!("grad V at tau = {tau}"), &grid.grads[i], grid.resolution),
        )?;
        files.push(heat);
        files.push(quiv);
    }
    Ok((grid, files))
}

pub fn save_state(path: &Path, st: &TrainState) -> Result<()> {
    save_checkpoint(path, STATE_KIND, st)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    load_checkpoint(path, STATE_KIND)
}

/// BC phase then RL phase, with every artifact written under `out`.
pub fn run_experiment(cfg: &TrainConfig, ds: &OfflineDataset2D, fingerprint: &str, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut st = TrainState::new(cfg, 0, 2)?;
    let mut rngs = Streams::new(cfg.seed);
    let mut writer = MetricsWriter::create(out, cfg.train.record_wall_clock)?;
    let mut artifacts = vec!["metrics.csv".to_string(), "step_times.csv".to_string()];

    let bc = run_phase(&mut st, &mut rngs, cfg, ds, Phase::Bc, cfg.bc_steps(ds.len()), |m| writer.push(m))?;
    save_state(&out.join("checkpoint_bc.json"), &st)?;
    artifacts.push("checkpoint_bc.json".into());
    let mut bc_rng = rng::stream(cfg.seed, "eval/bc-samples");
    let (_, bc_metrics) = analysis::evaluate_policy(&st, ds, cfg, &mut bc_rng)?;

    let rl = run_phase(&mut st, &mut rngs, cfg, ds, Phase::Rl, cfg.rl_steps(ds.len()), |m| writer.push(m))?;
    writer.finish()?;
    save_state(&out.join("checkpoint_final.json"), &st)?;
    artifacts.push("checkpoint_final.json".into());

    let (metrics, files) = write_samples(out, &st, ds, cfg)?;
    artifacts.extend(files);
    if st.inter_value.is_some() {
        artifacts.extend(write_consistency(out, &st, cfg)?.1);
        artifacts.extend(write_landscape(out, &st, cfg)?.1);
    }

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA,
        version: VERSION.to_string(),
        method_label: method_label(cfg.method).to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset: DatasetRecord {
            name: ds.name().to_string(),
            n: ds.len(),
            fingerprint: fingerprint.to_string(),
            high_value_region: ds.meta().high_value_region.clone(),
        },
        artifacts,
        summary: RunSummary {
            mean_reward: metrics.mean_reward,
            on_manifold_frac: metrics.on_manifold_frac,
            mode_coverage: metrics.mode_coverage,
            bc_mean_reward: bc_metrics.mean_reward,
            bc_on_manifold_frac: bc_metrics.on_manifold_frac,
            max_grad_norm_rl: rl.max_grad_norm,
            bc_steps: bc.steps,
            rl_steps: rl.steps,
        },
    };
    for a in &manifest.artifacts {
        let p = out.join(a);
        if !p.exists() {
            return Err(Error::Format {
                path: p,
                msg: "artifact listed in the manifest was not written".into(),
            });
        }
    }
    write(&out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
