//! Planar toy kitchen: a point end-effector moving above a pan towards a
//! spoon. Produces fixed-horizon trajectories, their hand-crafted features
//! and ground-truth linear rewards, plus stratified trajectory pools.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const FEATURE_COUNT: usize = 4;

/// Feature order used everywhere a feature index appears.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = ["height", "speed", "pan_distance", "success"];

pub const HEIGHT: usize = 0;
pub const SPEED: usize = 1;
pub const PAN_DISTANCE: usize = 2;
pub const SUCCESS: usize = 3;

/// Per-step state: `(x, y, gripper_open)`; positions in meters.
pub type State = [f64; 3];
/// Per-step action: `(dx, dy, gripper_toggle)`.
pub type Action = [f64; 3];

pub type TrajId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub bounds: Bounds,
    pub pan: [f64; 2],
    pub spoon: [f64; 2],
    /// Steps per trajectory.
    pub horizon: usize,
    /// Seconds per step.
    pub dt: f64,
    /// The gripper can only close on the spoon within this distance.
    pub grasp_radius: f64,
    /// Distance at which the reach term of task success drops to zero.
    pub success_radius: f64,
    /// Feasible `[min, max]` of each feature, used for pool coverage checks.
    pub feature_ranges: [[f64; 2]; FEATURE_COUNT],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bounds: Bounds {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            pan: [0.4, 0.45],
            spoon: [0.8, 0.2],
            horizon: 64,
            dt: 0.1,
            grasp_radius: 0.08,
            success_radius: 0.5,
            feature_ranges: [[0.0, 1.0], [0.0, 0.5], [0.0, 0.7], [0.0, 1.0]],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.min[0] < b.max[0] && b.min[1] < b.max[1]) {
            return Err(Error::Config(format!("empty workspace {b:?}")));
        }
        if !b.contains(self.pan) || !b.contains(self.spoon) {
            return Err(Error::Config("pan and spoon must lie inside the workspace".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon must be >= 2, got {}", self.horizon)));
        }
        if !(self.dt > 0.0) || !(self.grasp_radius > 0.0) || !(self.success_radius > 0.0) {
            return Err(Error::Config("dt, grasp_radius and success_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Scripted controller input for [`rollout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub start: [f64; 2],
    pub waypoints: Vec<[f64; 2]>,
    /// Nominal travel speed in m/s.
    pub speed: f64,
    /// Close the gripper on arrival when the spoon is within reach.
    pub grasp: bool,
    /// Standard deviation (m) of the seeded waypoint perturbation.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: TrajId,
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    /// Set when the control had to be clamped into the workspace.
    #[serde(default)]
    pub clamped: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks length, bounds and `s[t+1] = s[t] + a[t]`; the final action is zero.
    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        let t = cfg.horizon;
        if self.states.len() != t || self.actions.len() != t {
            return Err(Error::Invalid(format!(
                "trajectory {} has {} states / {} actions, expected {t}",
                self.id,
                self.states.len(),
                self.actions.len()
            )));
        }
        for (i, s) in self.states.iter().enumerate() {
            if !cfg.bounds.contains([s[0], s[1]]) {
                return Err(Error::Invalid(format!("trajectory {} leaves the workspace at step {i}", self.id)));
            }
        }
        for i in 0..t - 1 {
            for k in 0..3 {
                let next = self.states[i][k] + self.actions[i][k];
                if (next - self.states[i + 1][k]).abs() > 1e-12 {
                    return Err(Error::Invalid(format!(
                        "trajectory {} is not dynamically consistent at step {i}",
                        self.id
                    )));
                }
            }
        }
        if self.actions[t - 1] != [0.0; 3] {
            return Err(Error::Invalid(format!("trajectory {} has a non-zero final action", self.id)));
        }
        Ok(())
    }
}

/// Cumulative per-step features divided by the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features(pub [f64; FEATURE_COUNT]);

impl Features {
    pub fn get(&self, d: usize) -> f64 {
        self.0[d]
    }

    pub fn dot(&self, w: &[f64; FEATURE_COUNT]) -> f64 {
        self.0.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    pub fn delta(&self, other: &Features) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|d| other.0[d] - self.0[d])
    }
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = FEATURE_NAMES
            .iter()
            .zip(self.0)
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Weights `w` of the linear reward `w . theta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReward {
    pub w: [f64; FEATURE_COUNT],
}

impl GroundTruthReward {
    pub fn new(w: [f64; FEATURE_COUNT]) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite()) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Invalid(format!("reward weights {w:?} must be finite and not all zero")));
        }
        Ok(GroundTruthReward { w })
    }

    pub fn reward(&self, features: &Features) -> f64 {
        features.dot(&self.w)
    }
}

/// `w . theta(tau)`.
pub fn true_reward(w: &[f64; FEATURE_COUNT], traj: &Trajectory, cfg: &WorldConfig) -> f64 {
    features(traj, cfg).dot(w)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

fn point_along(points: &[[f64; 2]], u: f64) -> [f64; 2] {
    let mut remaining = u;
    for seg in points.windows(2) {
        let len = dist(seg[0], seg[1]);
        if remaining <= len && len > 0.0 {
            let f = remaining / len;
            return [
                seg[0][0] + f * (seg[1][0] - seg[0][0]),
                seg[0][1] + f * (seg[1][1] - seg[0][1]),
            ];
        }
        remaining -= len;
    }
    *points.last().expect("at least the start point")
}

/// Runs a scripted controller: the end-effector follows the polyline
/// `start -> waypoints` with smoothstep-eased arc-length progress, travelling
/// `speed * (T-1) * dt` meters in total unless it reaches the last waypoint
/// first, in which case it stays there.
pub fn rollout(cfg: &WorldConfig, control: &Control, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    if !(control.speed > 0.0) || !control.speed.is_finite() {
        return Err(Error::Invalid(format!("speed scale must be positive, got {}", control.speed)));
    }
    if control.jitter < 0.0 {
        return Err(Error::Invalid("jitter must be non-negative".into()));
    }
    let mut clamped = false;
    let mut clamp = |p: [f64; 2]| {
        let c = cfg.bounds.clamp(p);
        clamped |= c != p;
        c
    };
    let mut points = vec![clamp(control.start)];
    let mut rng = rng_from_seed(seed);
    for &w in &control.waypoints {
        let mut w = w;
        if control.jitter > 0.0 {
            let n = Normal::new(0.0, control.jitter).expect("finite jitter");
            w = [w[0] + n.sample(&mut rng), w[1] + n.sample(&mut rng)];
            w = cfg.bounds.clamp(w);
        }
        points.push(clamp(w));
    }
    let length: f64 = points.windows(2).map(|s| dist(s[0], s[1])).sum();
    let horizon = cfg.horizon;
    let travel = control.speed * (horizon - 1) as f64 * cfg.dt;

    let mut states = Vec::with_capacity(horizon);
    let mut open = 1.0;
    for t in 0..horizon {
        let x = t as f64 / (horizon - 1) as f64;
        let u = travel * smoothstep(x);
        let arrived = u >= length;
        let pos = cfg.bounds.clamp(point_along(&points, u.min(length)));
        if control.grasp && arrived && dist(pos, cfg.spoon) <= cfg.grasp_radius {
            open = 0.0;
        }
        states.push([pos[0], pos[1], open]);
    }
    let mut actions = Vec::with_capacity(horizon);
    for t in 0..horizon - 1 {
        let (s, n) = (states[t], states[t + 1]);
        actions.push([n[0] - s[0], n[1] - s[1], n[2] - s[2]]);
    }
    actions.push([0.0; 3]);
    Ok(Trajectory {
        id: 0,
        states,
        actions,
        clamped,
    })
}

/// Per-step feature vector of one state-action pair.
pub fn step_features(state: &State, action: &Action, cfg: &WorldConfig) -> [f64; FEATURE_COUNT] {
    let pos = [state[0], state[1]];
    let speed = (action[0] * action[0] + action[1] * action[1]).sqrt() / cfg.dt;
    let to_spoon = dist(pos, cfg.spoon);
    let grasped = state[2] == 0.0 && to_spoon <= cfg.grasp_radius;
    let reach = (1.0 - to_spoon / cfg.success_radius).max(0.0);
    let success = (0.7 * reach + if grasped { 0.3 } else { 0.0 }).clamp(0.0, 1.0);
    [state[1], speed, dist(pos, cfg.pan), success]
}

pub fn features(traj: &Trajectory, cfg: &WorldConfig) -> Features {
    let mut acc = [0.0; FEATURE_COUNT];
    for (s, a) in traj.states.iter().zip(&traj.actions) {
        for (acc, f) in acc.iter_mut().zip(step_features(s, a, cfg)) {
            *acc += f;
        }
    }
    let n = traj.states.len().max(1) as f64;
    Features(acc.map(|v| v / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub trajectory: Trajectory,
    pub features: Features,
    pub split: Option<Split>,
    /// Filled from the nearest feasible stratum.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPool {
    pub config: WorldConfig,
    /// Per-feature low/high boundary used for stratification.
    pub thresholds: [f64; FEATURE_COUNT],
    pub entries: Vec<PoolEntry>,
}

impl TrajectoryPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: TrajId) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| e.trajectory.id == id)
    }

    pub fn index_of(&self, id: TrajId) -> Option<usize> {
        self.entries.iter().position(|e| e.trajectory.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn ids(&self) -> Vec<TrajId> {
        self.entries.iter().map(|e| e.trajectory.id).collect()
    }

    /// Checks id uniqueness and that every trajectory is valid.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.trajectory.id) {
                return Err(Error::Invalid(format!("duplicate trajectory id {}", e.trajectory.id)));
            }
            e.trajectory.validate(&self.config)?;
        }
        Ok(())
    }
}

fn sample_control<R: Rng + ?Sized>(cfg: &WorldConfig, rng: &mut R) -> Control {
    let b = &cfg.bounds;
    let margin = 0.05;
    let uniform_point = |rng: &mut R| {
        [
            rng.random_range(b.min[0] + margin..b.max[0] - margin),
            rng.random_range(b.min[1] + margin..b.max[1] - margin),
        ]
    };
    let start = uniform_point(rng);
    let n = rng.random_range(1..=3);
    let mut waypoints: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng)).collect();
    if rng.random_bool(0.5) {
        let n = Normal::new(0.0, 0.03).expect("valid");
        let last = [cfg.spoon[0] + n.sample(rng), cfg.spoon[1] + n.sample(rng)];
        *waypoints.last_mut().expect("n >= 1") = b.clamp(last);
    }
    // log-uniform over [0.03, 0.8] m/s
    let speed = (rng.random_range(0.03f64.ln()..0.8f64.ln())).exp();
    Control {
        start,
        waypoints,
        speed,
        grasp: rng.random_bool(0.5),
        jitter: 0.02,
    }
}

fn stratum(f: &Features, thresholds: &[f64; FEATURE_COUNT]) -> usize {
    (0..FEATURE_COUNT).fold(0, |acc, d| acc | (usize::from(f.0[d] > thresholds[d]) << d))
}

const STRATA: usize = 1 << FEATURE_COUNT;

/// How far `f` is from stratum `s`, in units of the feature ranges.
fn stratum_distance(f: &Features, s: usize, thresholds: &[f64; FEATURE_COUNT], cfg: &WorldConfig) -> f64 {
    (0..FEATURE_COUNT)
        .map(|d| {
            let high = (s >> d) & 1 == 1;
            let inside = (f.0[d] > thresholds[d]) == high;
            let span = (cfg.feature_ranges[d][1] - cfg.feature_ranges[d][0]).max(1e-9);
            if inside {
                0.0
            } else {
                (f.0[d] - thresholds[d]).abs() / span
            }
        })
        .sum()
}

/// Stratified pool: every low/high combination of the features receives
/// `count / 2^D` trajectories (the remainder spread one each over a seeded
/// choice of strata). Boundaries are the medians of a calibration sample.
pub fn generate_pool(cfg: &WorldConfig, count: usize, seed: u64) -> Result<TrajectoryPool> {
    cfg.validate()?;
    if count < 10 {
        return Err(Error::Invalid(format!("pool needs at least 10 trajectories, got {count}")));
    }
    let mut rng = rng_from_seed(seed);

    let calibration: Vec<Features> = (0..2000)
        .map(|_| {
            let c = sample_control(cfg, &mut rng);
            let s = rng.random();
            rollout(cfg, &c, s).map(|t| features(&t, cfg))
        })
        .collect::<Result<_>>()?;
    let thresholds: [f64; FEATURE_COUNT] = std::array::from_fn(|d| {
        let mut v: Vec<f64> = calibration.iter().map(|f| f.0[d]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    });

    let mut need = [count / STRATA; STRATA];
    let mut order: Vec<usize> = (0..STRATA).collect();
    order.shuffle(&mut rng);
    for &s in order.iter().take(count % STRATA) {
        need[s] += 1;
    }

    let mut accepted: Vec<(Trajectory, Features, bool)> = Vec::with_capacity(count);
    // rejected (control, seed, features), most recent kept for nearest fills
    let mut rejected: Vec<(Control, u64, Features)> = Vec::new();
    let budget = 400 * count;
    for _ in 0..budget {
        if accepted.len() == count {
            break;
        }
        let c = sample_control(cfg, &mut rng);
        let s: u64 = rng.random();
        let traj = rollout(cfg, &c, s)?;
        let f = features(&traj, cfg);
        let k = stratum(&f, &thresholds);
        if need[k] > 0 {
            need[k] -= 1;
            accepted.push((traj, f, false));
        } else {
            if rejected.len() >= 8192 {
                rejected.swap_remove(rng.random_range(0..rejected.len()));
            }
            rejected.push((c, s, f));
        }
    }
    for k in 0..STRATA {
        while need[k] > 0 {
            let best = rejected
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    stratum_distance(&a.1 .2, k, &thresholds, cfg)
                        .total_cmp(&stratum_distance(&b.1 .2, k, &thresholds, cfg))
                })
                .map(|(i, _)| i)
                .ok_or_else(|| Error::Invalid("no candidates left to fill infeasible strata".into()))?;
            let (c, s, f) = rejected.swap_remove(best);
            tracing::warn!(stratum = k, "filling infeasible stratum with nearest trajectory");
            accepted.push((rollout(cfg, &c, s)?, f, true));
            need[k] -= 1;
        }
    }

    let entries = accepted
        .into_iter()
        .enumerate()
        .map(|(i, (mut t, f, flagged))| {
            t.id = i as TrajId;
            PoolEntry {
                trajectory: t,
                features: f,
                split: None,
                flagged,
            }
        })
        .collect();
    Ok(TrajectoryPool {
        config: cfg.clone(),
        thresholds,
        entries,
    })
}

/// Largest-remainder apportionment of `n` items by `ratios`.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let raw = ratios.map(|r| r * n as f64);
    let mut counts = raw.map(|x| x.floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    Ok(counts)
}

/// Tags every pool entry with a split after a seeded shuffle.
pub fn split(pool: &mut TrajectoryPool, ratios: [f64; 3], seed: u64) -> Result<()> {
    let n = pool.len();
    if n < 10 {
        return Err(Error::Invalid(format!("pool of {n} trajectories is too small to split")));
    }
    let counts = split_counts(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut cursor = 0;
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for &i in &order[cursor..cursor + count] {
            pool.entries[i].split = Some(split);
        }
        cursor += count;
    }
    Ok(())
}
