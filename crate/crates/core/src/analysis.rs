//! Measurements on trained runs: sample quality, flow consistency of the
//! intermediate value, value landscapes and step timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::{Method, TrainConfig};
use crate::envs2d::OfflineDataset2D;
use crate::error::{Error, Result};
use crate::flow::{empty_states, FlowPolicy};
use crate::rng::{self, Rng};
use crate::trainers::{bc_step, rl_step, sample_indices, Streams, TrainState};
use crate::value::InterValueNet;

/// Share of samples a region needs to count as covered.
pub const COVERAGE_SHARE: f64 = 0.02;

/// Denominator floor of the normalized consistency metric.
pub const CONSISTENCY_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub n: usize,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub on_manifold_frac: f64,
    /// Regions holding at least 2% of all samples, counting on-support samples only.
    pub mode_coverage: usize,
    /// On-support samples per region.
    pub region_counts: Vec<usize>,
}

impl SampleMetrics {
    pub fn region_fractions(&self) -> Vec<f64> {
        self.region_counts
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }
}

/// Reward, support and coverage statistics of a sample set. Sums run over
/// sorted values so the result does not depend on sample order.
pub fn sample_metrics(samples: &[[f64; 2]], ds: &OfflineDataset2D, epsilon: f64) -> Result<SampleMetrics> {
    if samples.is_empty() {
        return Err(Error::contract("sample metrics of an empty sample set"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be > 0, got {epsilon}")));
    }
    let spec = ds.reward_spec();
    let mut rewards: Vec<f64> = samples.iter().map(|&p| spec.reward(p)).collect();
    rewards.sort_by(f64::total_cmp);
    let n = samples.len();
    let mut counts = vec![0usize; spec.num_regions()];
    let mut on = 0usize;
    for &p in samples {
        if ds.support_distance(p) <= epsilon {
            on += 1;
            counts[spec.region(p)] += 1;
        }
    }
    let mode_coverage = counts
        .iter()
        .filter(|&&c| c as f64 >= COVERAGE_SHARE * n as f64)
        .count();
    Ok(SampleMetrics {
        n,
        epsilon,
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        on_manifold_frac: on as f64 / n as f64,
        mode_coverage,
        region_counts: counts,
    })
}

pub fn tensor_points(t: &Tensor) -> Vec<[f64; 2]> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1)]).collect()
}

/// Draws `n` evaluation actions for the method of `st` and scores them.
pub fn evaluate_policy(
    st: &TrainState,
    ds: &OfflineDataset2D,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Tensor, SampleMetrics)> {
    let a = st.act(&empty_states(cfg.eval.n_samples), cfg.train.rejection_candidates, rng)?;
    let m = sample_metrics(&tensor_points(&a), ds, cfg.eval.epsilon)?;
    Ok((a, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub taus: Vec<f64>,
    /// `|V(x_τ, τ) − V(x̂1, 1)| / max(|V(x̂1, 1)|, floor)` per τ.
    pub mean_normalized: Vec<f64>,
    pub std_normalized: Vec<f64>,
    /// `|V(x_τ, τ) − V(x̂1, 1)|` per τ.
    pub mean_abs: Vec<f64>,
    pub std_abs: Vec<f64>,
    pub n_states: usize,
    pub n_trajs: usize,
    pub denominator_floor: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// `k` evenly spaced points on `[0, 1]`, the last exactly 1.
pub fn tau_grid(k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| if i + 1 == k { 1.0 } else { i as f64 / (k - 1) as f64 })
        .collect()
}

/// Rolls policy trajectories from `x0 ~ N(0, I)` to each grid time `τ`,
/// completes them with `x̂1 = Ψ_{1,τ}(x_τ)` and compares `V(x_τ, τ)` with
/// `V(x̂1, 1)`. At `τ = 1` the completion is the identity, so that entry is 0.
pub fn consistency_report(
    v: &InterValueNet,
    policy: &FlowPolicy,
    states: &Tensor,
    n_trajs: usize,
    taus: &[f64],
    rng: &mut Rng,
) -> Result<ConsistencyReport> {
    if n_trajs == 0 || states.rows() == 0 || taus.is_empty() {
        return Err(Error::contract("consistency report needs states, trajectories and taus"));
    }
    let n_states = states.rows();
    let idx: Vec<usize> = (0..n_states)
        .flat_map(|i| std::iter::repeat_n(i, n_trajs))
        .collect();
    let s = states.gather_rows(&idx);
    let rows = s.rows();
    let x0 = rng::normal_matrix(rng, rows, policy.action_dim());
    let mut report = ConsistencyReport {
        taus: taus.to_vec(),
        mean_normalized: Vec::new(),
        std_normalized: Vec::new(),
        mean_abs: Vec::new(),
        std_abs: Vec::new(),
        n_states,
        n_trajs,
        denominator_floor: CONSISTENCY_FLOOR,
    };
    for &tau in taus {
        let t = vec![tau; rows];
        let x_tau = policy.integrate(&x0, &vec![0.0; rows], &t, &s)?;
        let x1 = policy.flow_map(&x_tau, tau, &s)?;
        let v_tau = v.value(&x_tau, &t, &s)?;
        let v_one = v.value(&x1, &vec![1.0; rows], &s)?;
        let abs: Vec<f64> = v_tau.iter().zip(&v_one).map(|(a, b)| (a - b).abs()).collect();
        let norm: Vec<f64> = abs
            .iter()
            .zip(&v_one)
            .map(|(d, b)| d / b.abs().max(CONSISTENCY_FLOOR))
            .collect();
        let (m, sd) = mean_std(&norm);
        report.mean_normalized.push(m);
        report.std_normalized.push(sd);
        let (m, sd) = mean_std(&abs);
        report.mean_abs.push(m);
        report.std_abs.push(sd);
    }
    Ok(report)
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,mean_normalized,std_normalized,mean_abs,std_abs\n");
        for i in 0..self.taus.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.taus[i], self.mean_normalized[i], self.std_normalized[i], self.mean_abs[i], self.std_abs[i]
            ));
        }
        out
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..rx.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    num / (dx * dy).sqrt()
}

/// `V_ω` and `∇_x V_ω` on a regular grid over `[−1, 1]²`, one slice per τ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub bounds: [f64; 2],
    pub taus: Vec<f64>,
    /// `values[t][iy * resolution + ix]`.
    pub values: Vec<Vec<f64>>,
    pub grads: Vec<Vec<[f64; 2]>>,
}

impl LandscapeGrid {
    pub fn coord(&self, i: usize) -> f64 {
        let [lo, hi] = self.bounds;
        lo + (hi - lo) * i as f64 / (self.resolution - 1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,x,y,value,grad_x,grad_y\n");
        for (t, &tau) in self.taus.iter().enumerate() {
            for iy in 0..self.resolution {
                for ix in 0..self.resolution {
                    let k = iy * self.resolution + ix;
                    let g = self.grads[t][k];
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        tau,
                        self.coord(ix),
                        self.coord(iy),
                        self.values[t][k],
                        g[0],
                        g[1]
                    ));
                }
            }
        }
        out
    }
}

/// Evaluates the landscape for the (single, possibly empty) state `s`.
pub fn landscape_grid(v: &InterValueNet, s: &Tensor, taus: &[f64], resolution: usize) -> Result<LandscapeGrid> {
    if resolution < 2 {
        return Err(Error::contract("landscape resolution must be >= 2"));
    }
    if s.rows() != 1 {
        return Err(Error::contract("landscape grid is drawn for a single state"));
    }
    let mut grid = LandscapeGrid {
        resolution,
        bounds: [-1.0, 1.0],
        taus: taus.to_vec(),
        values: Vec::new(),
        grads: Vec::new(),
    };
    let n = resolution * resolution;
    let mut pts = Vec::with_capacity(2 * n);
    for iy in 0..resolution {
        for ix in 0..resolution {
            pts.push(grid.coord(ix));
            pts.push(grid.coord(iy));
        }
    }
    let x = Tensor::matrix(n, 2, pts);
    let s_rep = s.gather_rows(&vec![0; n]);
    for &tau in taus {
        let t = vec![tau; n];
        grid.values.push(v.value(&x, &t, &s_rep)?);
        let g = v.grad_wrt_x(&x, &t, &s_rep)?;
        grid.grads.push((0..n).map(|k| [g.get(k, 0), g.get(k, 1)]).collect());
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub flow_steps: usize,
    pub steps: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
}

pub const WARMUP_STEPS: usize = 10;

/// Median RL-step time per `(method, flow_steps)` cell. Every cell starts
/// from the same seed and sees identical batches; the first
/// [`WARMUP_STEPS`] steps are discarded.
pub fn timing_benchmark(
    base: &TrainConfig,
    ds: &OfflineDataset2D,
    methods: &[Method],
    flow_steps: &[usize],
    steps: usize,
) -> Result<Vec<TimingRow>> {
    if steps == 0 {
        return Err(Error::Config("timing benchmark needs steps >= 1 after warm-up".into()));
    }
    let mut rows = Vec::new();
    for &method in methods {
        for &k in flow_steps {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.network.flow_steps = k;
            let mut st = TrainState::new(&cfg, 0, 2)?;
            let mut rngs = Streams::new(cfg.seed);
            // one BC step so every network has been touched once
            let b = ds.batch(&sample_indices(ds.len(), cfg.train.batch_size, &mut rngs.batch));
            bc_step(&mut st, &b, &cfg, &mut rngs)?;
            let mut times = Vec::with_capacity(steps);
            for i in 0..WARMUP_STEPS + steps {
                let b = ds.batch(&sample_indices(ds.len(), cfg.train.batch_size, &mut rngs.batch));
                let t0 = Instant::now();
                rl_step(&mut st, &b, &cfg, &mut rngs)?;
                if i >= WARMUP_STEPS {
                    times.push(t0.elapsed().as_secs_f64() * 1e3);
                }
            }
            let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let median_ms = if times.len() % 2 == 1 {
                times[mid]
            } else {
                0.5 * (times[mid - 1] + times[mid])
            };
            rows.push(TimingRow {
                method,
                flow_steps: k,
                steps,
                median_ms,
                mean_ms,
            });
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("method,flow_steps,steps,median_ms,mean_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.flow_steps, r.steps, r.median_ms, r.mean_ms
        ));
    }
    out
}
