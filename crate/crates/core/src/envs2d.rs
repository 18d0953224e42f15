//! Synthetic 2D offline datasets with rewards defined over actions.
//!
//! Each task is a single-step bandit with a fixed (empty) state: the dataset
//! is a point cloud on a 2D manifold and the reward depends only on where a
//! point sits along that manifold.
//!
//! The reward shapes are reconstructions, not ground truth: curve datasets
//! score a point by the normalized curve parameter of its nearest manifold
//! point (so the reward grows toward the outer end of each arm), and the
//! eight-Gaussian task uses a fixed per-mode table `0.125 · k` in angular
//! order.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::empty_states;
use crate::rng::{self, Rng};
use crate::value::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    SwissRoll,
    TwoSpirals,
    EightGaussians,
    Moons,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [
        DatasetName::SwissRoll,
        DatasetName::TwoSpirals,
        DatasetName::EightGaussians,
        DatasetName::Moons,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::SwissRoll => "swiss_roll",
            DatasetName::TwoSpirals => "two_spirals",
            DatasetName::EightGaussians => "eight_gaussians",
            DatasetName::Moons => "moons",
        }
    }

    /// Noise std in generator units.
    pub fn default_noise(self) -> f64 {
        match self {
            DatasetName::TwoSpirals => 0.02,
            _ => 0.05,
        }
    }

    pub fn reward_spec(self, norm: Normalization) -> RewardSpec {
        match self {
            DatasetName::SwissRoll => RewardSpec::ArcProgress {
                curve: Curve::SwissRoll,
                segments: 8,
                norm,
            },
            DatasetName::TwoSpirals => RewardSpec::ArcProgress {
                curve: Curve::TwoSpirals,
                segments: 4,
                norm,
            },
            DatasetName::Moons => RewardSpec::ArcProgress {
                curve: Curve::Moons,
                segments: 4,
                norm,
            },
            DatasetName::EightGaussians => RewardSpec::ModeTable {
                means: eight_means().to_vec(),
                values: (0..8).map(|k| 0.125 * k as f64).collect(),
                norm,
            },
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset `{s}` (expected one of swiss_roll, two_spirals, eight_gaussians, moons)"
                ))
            })
    }
}

fn eight_means() -> [[f64; 2]; 8] {
    std::array::from_fn(|k| {
        let a = k as f64 * PI / 4.0;
        [a.cos(), a.sin()]
    })
}

/// Uniform affine map `p ↦ (p − offset) / scale` into `[−1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        scale: 1.0,
        offset: [0.0, 0.0],
    };

    /// Centers the bounding box and scales its larger half-extent to 1.
    pub fn fit(points: &[[f64; 2]]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let offset = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = ((hi[0] - lo[0]) / 2.0).max((hi[1] - lo[1]) / 2.0);
        let scale = if half > 0.0 && half.is_finite() { half } else { 1.0 };
        Self { scale, offset }
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
        ]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
        ]
    }
}

/// Parametric curves in generator units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    /// `(t cos t, t sin t) / 4.5π`, `t ∈ [1.5π, 4.5π]`.
    SwissRoll,
    /// Arm 0: `(−t cos t, t sin t) / 3.5π`, arm 1 its point reflection, `t ∈ [0.5π, 3.5π]`.
    TwoSpirals,
    /// Arm 0: `(cos t, sin t)`, arm 1: `(1 − cos t, 0.5 − sin t)`, `t ∈ [0, π]`.
    Moons,
}

const PROJECTION_GRID: usize = 2048;

impl Curve {
    pub fn arms(self) -> usize {
        match self {
            Curve::SwissRoll => 1,
            Curve::TwoSpirals | Curve::Moons => 2,
        }
    }

    pub fn t_range(self) -> (f64, f64) {
        match self {
            Curve::SwissRoll => (1.5 * PI, 4.5 * PI),
            Curve::TwoSpirals => (0.5 * PI, 3.5 * PI),
            Curve::Moons => (0.0, PI),
        }
    }

    pub fn point(self, arm: usize, t: f64) -> [f64; 2] {
        match self {
            Curve::SwissRoll => {
                let s = 4.5 * PI;
                [t * t.cos() / s, t * t.sin() / s]
            }
            Curve::TwoSpirals => {
                let s = 3.5 * PI;
                let p = [-t * t.cos() / s, t * t.sin() / s];
                if arm == 0 {
                    p
                } else {
                    [-p[0], -p[1]]
                }
            }
            Curve::Moons => {
                if arm == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
        }
    }

    /// Nearest curve point to `p` (generator units): `(arm, t, distance)`.
    pub fn project(self, p: [f64; 2]) -> (usize, f64, f64) {
        let (t0, t1) = self.t_range();
        let dt = (t1 - t0) / (PROJECTION_GRID - 1) as f64;
        let d2 = |arm: usize, t: f64| {
            let q = self.point(arm, t);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
        };
        let mut best = (0usize, t0, f64::INFINITY);
        for arm in 0..self.arms() {
            let (j, _) = (0..PROJECTION_GRID)
                .map(|j| (j, d2(arm, t0 + j as f64 * dt)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            // golden-section refinement inside the neighbouring grid cells
            let mut lo = (t0 + (j as f64 - 1.0) * dt).max(t0);
            let mut hi = (t0 + (j as f64 + 1.0) * dt).min(t1);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..80 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if d2(arm, m1) <= d2(arm, m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let t = 0.5 * (lo + hi);
            let d = d2(arm, t);
            if d < best.2 {
                best = (arm, t, d);
            }
        }
        (best.0, best.1, best.2.sqrt())
    }
}

/// Reward over (normalized) actions, evaluable anywhere in the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Normalized curve parameter of the nearest manifold point.
    ArcProgress {
        curve: Curve,
        /// Regions per arm used for coverage statistics.
        segments: usize,
        norm: Normalization,
    },
    /// Value of the nearest mode.
    ModeTable {
        means: Vec<[f64; 2]>,
        values: Vec<f64>,
        norm: Normalization,
    },
    /// `1 − min(1, |p − center| / radius)` in normalized coordinates.
    Radial { center: [f64; 2], radius: f64 },
}

impl RewardSpec {
    fn nearest_mode(means: &[[f64; 2]], q: [f64; 2]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in means.iter().enumerate() {
            let d = (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Reward in `[0, 1]` at a normalized point.
    pub fn reward(&self, p: [f64; 2]) -> f64 {
        match self {
            RewardSpec::ArcProgress { curve, norm, .. } => {
                let (_, t, _) = curve.project(norm.denormalize(p));
                let (t0, t1) = curve.t_range();
                ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
            }
            RewardSpec::ModeTable {
                means,
                values,
                norm,
            } => values[Self::nearest_mode(means, norm.denormalize(p))],
            RewardSpec::Radial { center, radius } => {
                let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                1.0 - (d / radius).min(1.0)
            }
        }
    }

    pub fn num_regions(&self) -> usize {
        match self {
            RewardSpec::ArcProgress {
                curve, segments, ..
            } => curve.arms() * segments,
            RewardSpec::ModeTable { means, .. } => means.len(),
            RewardSpec::Radial { .. } => 1,
        }
    }

    /// Region label used for mode/arm coverage.
    pub fn region(&self, p: [f64; 2]) -> usize {
        match self {
            RewardSpec::ArcProgress {
                curve,
                segments,
                norm,
            } => {
                let (arm, t, _) = curve.project(norm.denormalize(p));
                let (t0, t1) = curve.t_range();
                let u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                arm * segments + ((u * *segments as f64) as usize).min(segments - 1)
            }
            RewardSpec::ModeTable { means, norm, .. } => {
                Self::nearest_mode(means, norm.denormalize(p))
            }
            RewardSpec::Radial { .. } => 0,
        }
    }
}

/// Uniform-grid nearest-neighbour index over 2D points.
#[derive(Clone, Debug)]
pub struct SupportIndex {
    points: Vec<[f64; 2]>,
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl SupportIndex {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("support index over an empty point set"));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        // about four points per occupied cell for area-filling clouds
        let per_side = ((points.len() as f64 / 4.0).sqrt().ceil() as usize).clamp(1, 512);
        let cell = extent / per_side as f64;
        let dims = [
            ((hi[0] - lo[0]) / cell) as usize + 1,
            ((hi[1] - lo[1]) / cell) as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (i, p) in points.iter().enumerate() {
            let cx = (((p[0] - lo[0]) / cell) as usize).min(dims[0] - 1);
            let cy = (((p[1] - lo[1]) / cell) as usize).min(dims[1] - 1);
            buckets[cy * dims[0] + cx].push(i as u32);
        }
        Ok(Self {
            points,
            origin: lo,
            cell,
            dims,
            buckets,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// `(distance, index)` of the nearest indexed point.
    pub fn nearest(&self, q: [f64; 2]) -> (f64, usize) {
        let qx = ((q[0] - self.origin[0]) / self.cell).floor();
        let qy = ((q[1] - self.origin[1]) / self.cell).floor();
        let (nx, ny) = (self.dims[0] as i64, self.dims[1] as i64);
        let clamp_i = |v: f64| v.clamp(-1e12, 1e12) as i64;
        let (qx, qy) = (clamp_i(qx), clamp_i(qy));
        // first ring that can touch the grid
        let gap = |q: i64, n: i64| if q < 0 { -q } else if q >= n { q - n + 1 } else { 0 };
        let r0 = gap(qx, nx).max(gap(qy, ny));
        let r_max = r0 + nx.max(ny) + 1;
        let mut best = (f64::INFINITY, 0usize);
        let mut r = r0;
        while r <= r_max {
            let y_lo = (qy - r).max(0);
            let y_hi = (qy + r).min(ny - 1);
            for cy in y_lo..=y_hi {
                let on_edge_row = (cy - qy).abs() == r;
                let xs: Vec<i64> = if on_edge_row {
                    ((qx - r).max(0)..=(qx + r).min(nx - 1)).collect()
                } else {
                    [qx - r, qx + r]
                        .into_iter()
                        .filter(|&x| x >= 0 && x < nx)
                        .collect()
                };
                for cx in xs {
                    for &i in &self.buckets[(cy * nx + cx) as usize] {
                        let p = self.points[i as usize];
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                        if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                            best = (d, i as usize);
                        }
                    }
                }
            }
            // unvisited cells are at Chebyshev index distance > r, hence at least r·cell away
            if best.0 <= r as f64 * self.cell {
                break;
            }
            r += 1;
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub name: DatasetName,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub norm: Normalization,
    pub reward_spec: RewardSpec,
    /// Raw reward range mapped onto `[0, 1]` for the stored rewards.
    pub reward_range: [f64; 2],
    pub high_value_region: String,
}

/// Offline dataset of normalized 2D actions and min-max scaled rewards.
#[derive(Clone, Debug)]
pub struct OfflineDataset2D {
    meta: DatasetMeta,
    actions: Tensor,
    rewards: Vec<f64>,
    index: SupportIndex,
}

fn high_value_note(name: DatasetName) -> &'static str {
    match name {
        DatasetName::SwissRoll => "outer end of the roll",
        DatasetName::TwoSpirals => "outer end of both arms (placement chosen, not given)",
        DatasetName::Moons => "far end of both moons (placement chosen, not given)",
        DatasetName::EightGaussians => "mode 7 (angle 315 deg)",
    }
}

/// Raw, un-normalized samples of a generator.
pub fn raw_samples(name: DatasetName, n: usize, noise: f64, rng: &mut Rng) -> Vec<[f64; 2]> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let jitter = |rng: &mut Rng| -> [f64; 2] {
        if noise > 0.0 {
            [normal.sample(rng), normal.sample(rng)]
        } else {
            [0.0, 0.0]
        }
    };
    (0..n)
        .map(|_| {
            let p = match name {
                DatasetName::SwissRoll => {
                    let (t0, t1) = Curve::SwissRoll.t_range();
                    Curve::SwissRoll.point(0, rng.random_range(t0..t1))
                }
                DatasetName::TwoSpirals | DatasetName::Moons => {
                    let curve = if name == DatasetName::Moons {
                        Curve::Moons
                    } else {
                        Curve::TwoSpirals
                    };
                    let arm = rng.random_range(0..2);
                    let (t0, t1) = curve.t_range();
                    curve.point(arm, rng.random_range(t0..t1))
                }
                DatasetName::EightGaussians => eight_means()[rng.random_range(0..8)],
            };
            let j = jitter(rng);
            [p[0] + j[0], p[1] + j[1]]
        })
        .collect()
}

impl OfflineDataset2D {
    /// Generates `n` samples, normalizes them to `[−1, 1]²` and scores them.
    pub fn generate(name: DatasetName, n: usize, noise: Option<f64>, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("dataset size must be >= 1".into()));
        }
        let noise = noise.unwrap_or(name.default_noise());
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
        }
        let mut rng = rng::stream(seed, &format!("dataset/{name}"));
        let raw = raw_samples(name, n, noise, &mut rng);
        let norm = Normalization::fit(&raw);
        let points: Vec<[f64; 2]> = raw.iter().map(|&p| norm.normalize(p)).collect();
        let spec = name.reward_spec(norm);
        let raw_rewards: Vec<f64> = points.iter().map(|&p| spec.reward(p)).collect();
        let lo = raw_rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rewards = raw_rewards
            .iter()
            .map(|&r| if hi > lo { (r - lo) / (hi - lo) } else { 0.0 })
            .collect();
        let meta = DatasetMeta {
            format_version: 1,
            name,
            n,
            noise,
            seed,
            norm,
            reward_spec: spec,
            reward_range: [lo, hi],
            high_value_region: high_value_note(name).to_string(),
        };
        Self::from_parts(meta, points, rewards)
    }

    fn from_parts(meta: DatasetMeta, points: Vec<[f64; 2]>, rewards: Vec<f64>) -> Result<Self> {
        let actions = Tensor::from_rows(&points);
        let index = SupportIndex::new(points)?;
        Ok(Self {
            meta,
            actions,
            rewards,
            index,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn name(&self) -> DatasetName {
        self.meta.name
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `[N, 2]` normalized actions.
    pub fn actions(&self) -> &Tensor {
        &self.actions
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.index.points()[i]
    }

    pub fn points(&self) -> &[[f64; 2]] {
        self.index.points()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.meta.reward_spec
    }

    pub fn norm(&self) -> Normalization {
        self.meta.norm
    }

    /// Distance from `p` to the nearest dataset action.
    pub fn support_distance(&self, p: [f64; 2]) -> f64 {
        self.index.nearest(p).0
    }

    pub fn nearest(&self, p: [f64; 2]) -> (f64, usize) {
        self.index.nearest(p)
    }

    /// Bandit transitions for the given rows: empty states, terminal.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            s: empty_states(idx.len()),
            a: self.actions.gather_rows(idx),
            r: idx.iter().map(|&i| self.rewards[i]).collect(),
            s_next: empty_states(idx.len()),
            terminal: vec![true; idx.len()],
        }
    }

    /// CSV body with header `x,y,reward`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 48);
        out.push_str("x,y,reward\n");
        for (p, r) in self.points().iter().zip(&self.rewards) {
            out.push_str(&format!("{},{},{}\n", p[0], p[1], r));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns the CSV path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        fs::write(&json, meta).map_err(|e| Error::io(&json, e))?;
        Ok(csv)
    }

    /// Loads a CSV plus its JSON sidecar (same stem).
    pub fn load(csv_path: &Path) -> Result<Self> {
        let json_path = csv_path.with_extension("json");
        let meta_bytes = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format {
            path: json_path.clone(),
            msg: e.to_string(),
        })?;
        let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let bad = |line: usize, msg: &str| Error::Format {
            path: csv_path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "x,y,reward" => {}
            _ => return Err(bad(1, "expected header `x,y,reward`")),
        }
        let mut points = Vec::new();
        let mut rewards = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(i + 1, "expected 3 fields"));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(i + 1, &e.to_string()))
            };
            points.push([parse(fields[0])?, parse(fields[1])?]);
            rewards.push(parse(fields[2])?);
        }
        if points.len() != meta.n {
            return Err(bad(
                points.len() + 1,
                &format!("sidecar declares {} rows, found {}", meta.n, points.len()),
            ));
        }
        Self::from_parts(meta, points, rewards)
    }
}
