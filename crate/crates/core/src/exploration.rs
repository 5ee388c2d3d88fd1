//! The exploration loop: steer toward the edge of the certified set, scan, learn a local
//! barrier, add it to the composite, repeat. Also the comparison drivers built on it.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::CosineFeatures;
use crate::composite::{sdf_baseline_filter, CompositeCbf, FilterResult, ScanSdf};
use crate::dynamics::{ControlAffineSystem, FilterStatus, InputNorm, Trajectory};
use crate::environment::{Bounds, Environment, LidarConfig, Measurement, Point};
use crate::error::{Error, Result};
use crate::learning::{
    assemble_qp, centers_for_scans, fit_weights, learn_local_cbf, sample_outside, sample_superlevel_set, BasisConfig, Fit, FitStats,
    LearnHyperParams, LearningDatasets, LocalCbf, ValidityDomain,
};
use crate::oracle::{run_oracle, OracleConfig, SolveInfo};
use crate::par::{self, Execution};
use crate::qp::{solve_qp, QpOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    /// Scan attempts, the initial one included.
    pub max_scans: usize,
    pub dt: f64,
    /// Steering steps allowed between two scans.
    pub max_steps: usize,
    /// A leg ends once the agent is this close to its target in `q`.
    pub target_tolerance: f64,
    /// A leg also ends after this many steps without `stall_progress` improvement.
    pub stall_steps: usize,
    pub stall_progress: f64,
    /// Prediction horizon of the reference controller, seconds.
    pub lookahead: f64,
    /// Almost-active tolerance of the composite.
    pub eps: f64,
    /// Lattice step of frontier candidates.
    pub candidate_spacing: f64,
    /// Candidates must lie within this `q`-distance of a certified state.
    pub frontier_reach: f64,
    /// Candidates closer than this to every previous scan site do not count as frontier.
    pub min_frontier_distance: f64,
    pub superlevel_samples: usize,
    pub coverage_samples: usize,
    pub seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            max_scans: 8,
            dt: 0.05,
            max_steps: 1500,
            target_tolerance: 0.1,
            stall_steps: 200,
            stall_progress: 1e-3,
            lookahead: 1.0,
            eps: 5e-4,
            candidate_spacing: 0.1,
            frontier_reach: 0.3,
            min_frontier_distance: 0.25,
            superlevel_samples: 4000,
            coverage_samples: 20_000,
            seed: 0,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("max_scans", self.max_scans as f64),
            ("dt", self.dt),
            ("max_steps", self.max_steps as f64),
            ("target_tolerance", self.target_tolerance),
            ("stall_steps", self.stall_steps as f64),
            ("stall_progress", self.stall_progress),
            ("lookahead", self.lookahead),
            ("eps", self.eps),
            ("candidate_spacing", self.candidate_spacing),
            ("frontier_reach", self.frontier_reach),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("exploration.{name} must be positive, got {v}")));
            }
        }
        if !(self.min_frontier_distance >= 0.0) {
            return Err(Error::Config("exploration.min_frontier_distance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. The environment is ground truth: the agent only sees it through
/// scans, and the audit uses it to check the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub env: Environment,
    pub sys: ControlAffineSystem,
    pub x0: Vec<f64>,
    pub lidar: LidarConfig,
    pub explore: ExplorationConfig,
    pub learn: LearnHyperParams,
    pub basis: BasisConfig,
    pub oracle: OracleConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.x0.len() != self.sys.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "initial state has {} coordinates, system expects {}",
                self.x0.len(),
                self.sys.state_dim()
            )));
        }
        self.explore.validate()?;
        self.learn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LegEnd {
    Reached,
    Stalled,
    Budget,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxScans,
    NoFrontier,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Scan { step: usize, index: usize, state: Vec<f64>, hash: String },
    Learned { index: usize, part: usize, relaxed: bool },
    LearnFailed { index: usize, relaxed: bool, error: String },
    Target { step: usize, target: Vec<f64>, value: f64, score: f64 },
    LegEnd { step: usize, reason: LegEnd },
    Fallback { step: usize, status: FilterStatus, value: f64 },
    Infeasible { step: usize, value: f64 },
    Stop { step: usize, reason: StopReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub index: usize,
    /// Trajectory index of the state the scan was taken from.
    pub step: usize,
    pub state: Vec<f64>,
    pub hash: String,
    pub safe_points: usize,
    pub oracle: Option<SolveInfo>,
    pub oracle_pairs: usize,
    /// Index into the composite, if the scan produced a barrier.
    pub part: Option<usize>,
    pub relaxed: bool,
}

/// A state where the ground-truth signed distance was not positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub time: f64,
    pub state: Vec<f64>,
    pub distance: f64,
}

/// Wall-clock seconds per phase. Never part of the deterministic outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub oracle: Vec<f64>,
    pub learn: Vec<f64>,
    /// Solver share of each `learn` entry.
    pub qp: Vec<f64>,
    pub steering: Vec<f64>,
    pub frontier: Vec<f64>,
    pub total: f64,
}

impl PhaseTimings {
    pub fn learn_total(&self) -> f64 {
        self.learn.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplorationLog {
    pub trajectory: Trajectory,
    pub composite: Option<CompositeCbf>,
    pub scans: Vec<ScanRecord>,
    pub events: Vec<Event>,
    /// Smallest filter constraint residual at every step, with the step's status.
    pub filter_residuals: Vec<f64>,
    pub audit: Vec<Violation>,
    /// Monte Carlo fraction of the workspace certified after each added barrier.
    pub coverage: Vec<f64>,
    pub stop: Option<StopReason>,
    #[serde(skip)]
    pub measurements: Vec<Measurement>,
    #[serde(skip)]
    pub datasets: Vec<LearningDatasets>,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl ExplorationLog {
    pub fn cbfs(&self) -> &[LocalCbf] {
        self.composite.as_ref().map(|c| c.parts.as_slice()).unwrap_or(&[])
    }

    pub fn is_safe(&self) -> bool {
        self.audit.is_empty()
    }

    pub fn min_distance(&self, env: &Environment) -> f64 {
        min_distance(env, &self.trajectory)
    }
}

pub fn min_distance(env: &Environment, traj: &Trajectory) -> f64 {
    traj.states.iter().map(|x| env.signed_distance([x[0], x[1]])).fold(f64::INFINITY, f64::min)
}

/// Discretized admissible inputs used by the reference controller.
fn input_grid(sys: &ControlAffineSystem) -> Vec<Vec<f64>> {
    let umax = sys.input_set.u_max;
    let lin = |n: usize| (0..n).map(move |i| -umax + 2.0 * umax * i as f64 / (n - 1) as f64);
    if sys.input_dim() == 1 {
        return lin(21).map(|v| vec![v]).collect();
    }
    let mut out: Vec<Vec<f64>> = lin(11).flat_map(|a| lin(11).map(move |b| vec![a, b])).collect();
    if sys.input_set.norm == InputNorm::L2 {
        out.retain(|u| sys.input_set.contains(u));
        out.extend((0..24).map(|k| {
            let a = TAU * k as f64 / 24.0;
            vec![umax * a.cos(), umax * a.sin()]
        }));
    }
    out
}

fn qdist(x: &[f64], q: Point) -> f64 {
    (x[0] - q[0]).hypot(x[1] - q[1])
}

/// Greedy steering: the grid input whose constant application over `lookahead` seconds ends
/// closest to `target` in `q`. Ties keep the first grid entry.
pub fn reference_controller(sys: &ControlAffineSystem, x: &[f64], target: Point, lookahead: f64) -> Vec<f64> {
    let steps = (lookahead / 0.05).ceil().max(1.0) as usize;
    let h = lookahead / steps as f64;
    let mut best = (f64::INFINITY, vec![0.0; sys.input_dim()]);
    for u in input_grid(sys) {
        let mut y = x.to_vec();
        let mut ok = true;
        for _ in 0..steps {
            match sys.rk4_step(&y, &u, h) {
                Ok(v) => y = v,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        let d = if ok { qdist(&y, target) } else { f64::INFINITY };
        if d < best.0 - 1e-12 {
            best = (d, u);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTarget {
    pub x: Vec<f64>,
    pub value: f64,
    /// Distance to the nearest previous scan site.
    pub score: f64,
}

/// Headings checked when deciding whether a position is certified for some orientation.
fn heading_probe(sys: &ControlAffineSystem) -> Vec<f64> {
    if sys.state_dim() == 3 {
        (0..16).map(|k| -PI + TAU * k as f64 / 16.0).collect()
    } else {
        vec![0.0]
    }
}

fn max_over_headings(cc: &CompositeCbf, q: Point, thetas: &[f64], dim: usize) -> Result<(f64, f64)> {
    if dim == 2 {
        return Ok((cc.eval_h(&q)?.0, 0.0));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &th in thetas {
        let v = cc.eval_h(&[q[0], q[1], th])?.0;
        if v > best.0 {
            best = (v, th);
        }
    }
    Ok(best)
}

/// Picks the next exploration target `x-` with `H(x-) < 0`.
///
/// Candidates form a lattice over `window`. A candidate must sit outside every scan disk,
/// within `frontier_reach` of a certified position `reachable` (with a straight path that
/// stays in observed free or unobserved space), and just outside the certified set:
/// `-2b <= max_theta H <= -1e-6`. Among those the one farthest from all previous scan
/// sites `visited` wins.
pub fn select_boundary_target(
    cc: &CompositeCbf,
    sys: &ControlAffineSystem,
    visited: &[Point],
    reachable: &[Point],
    window: &Bounds,
    cfg: &ExplorationConfig,
) -> Result<BoundaryTarget> {
    if cc.is_empty() {
        return Err(Error::EmptyComposite);
    }
    let b = cc.parts.iter().map(|p| p.bias).fold(0.0, f64::max);
    let scans: Vec<&Measurement> = cc.parts.iter().map(|p| &p.scan).collect();
    let thetas = heading_probe(sys);
    let h = cfg.candidate_spacing;
    let nx = ((window.max[0] - window.min[0]) / h).floor() as usize;
    let ny = ((window.max[1] - window.min[1]) / h).floor() as usize;
    let in_disk = |q: Point, m: &Measurement| {
        let c = m.center_q();
        (q[0] - c[0]).hypot(q[1] - c[1]) < m.scan_radius
    };
    let passable = |q: Point| scans.iter().any(|m| m.contains_safe(q)) || !scans.iter().any(|m| in_disk(q, m));
    let mut best: Option<BoundaryTarget> = None;
    for i in 1..nx {
        for j in 1..ny {
            let q = [window.min[0] + i as f64 * h, window.min[1] + j as f64 * h];
            if scans.iter().any(|m| in_disk(q, m)) {
                continue;
            }
            let score = visited.iter().map(|v| (q[0] - v[0]).hypot(q[1] - v[1])).fold(f64::INFINITY, f64::min);
            if score < cfg.min_frontier_distance || best.as_ref().is_some_and(|t| score <= t.score) {
                continue;
            }
            let Some((near, d)) = reachable.iter().map(|p| (*p, (q[0] - p[0]).hypot(q[1] - p[1]))).min_by(|a, b| a.1.total_cmp(&b.1))
            else {
                continue;
            };
            if d > cfg.frontier_reach {
                continue;
            }
            let n = (d / 0.02).ceil().max(1.0) as usize;
            let clear = (1..n).all(|k| {
                let t = k as f64 / n as f64;
                passable([near[0] + t * (q[0] - near[0]), near[1] + t * (q[1] - near[1])])
            });
            if !clear {
                continue;
            }
            let (value, th) = max_over_headings(cc, q, &thetas, sys.state_dim())?;
            if !(value >= -2.0 * b && value <= -1e-6) {
                continue;
            }
            let x = if sys.state_dim() == 3 { vec![q[0], q[1], th] } else { vec![q[0], q[1]] };
            best = Some(BoundaryTarget { x, value, score });
        }
    }
    best.ok_or(Error::NoFrontier)
}

/// Closed-loop rollout under a filter until the target is reached, progress stalls or the
/// budget runs out. Returns how the leg ended.
#[allow(clippy::too_many_arguments)]
fn steer<F>(
    env: &Environment,
    sys: &ControlAffineSystem,
    filter: F,
    target: Point,
    cfg: &ExplorationConfig,
    traj: &mut Trajectory,
    log: &mut LegLog,
    stop_on_violation: bool,
) -> Result<LegEnd>
where
    F: Fn(&[f64], &[f64]) -> Result<FilterResult>,
{
    let mut best = f64::INFINITY;
    let mut since = 0;
    for _ in 0..cfg.max_steps {
        let x = traj.last_state().to_vec();
        let d = qdist(&x, target);
        if d <= cfg.target_tolerance {
            return Ok(LegEnd::Reached);
        }
        if d < best - cfg.stall_progress {
            best = d;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.stall_steps {
                return Ok(LegEnd::Stalled);
            }
        }
        let u_ref = reference_controller(sys, &x, target, cfg.lookahead);
        let r = filter(&x, &u_ref)?;
        let step = traj.len() - 1;
        if !r.feasible {
            log.events.push(Event::Infeasible { step, value: r.value });
        } else if r.status == FilterStatus::FallbackSingleCbf {
            log.events.push(Event::Fallback { step, status: r.status, value: r.value });
        }
        log.residuals.push(r.min_residual());
        let next = sys.rk4_step(&x, &r.u, cfg.dt)?;
        let dist = env.signed_distance([next[0], next[1]]);
        traj.push(r.u, r.value, r.argmax, r.status, next.clone());
        if dist <= 0.0 {
            log.audit.push(Violation { step: traj.len() - 1, time: traj.last_time(), state: next, distance: dist });
            if stop_on_violation {
                return Ok(LegEnd::Violation);
            }
        }
    }
    Ok(LegEnd::Budget)
}

#[derive(Debug, Default)]
struct LegLog {
    events: Vec<Event>,
    residuals: Vec<f64>,
    audit: Vec<Violation>,
}

/// Scans at `x`, runs the oracle and learns a barrier (retrying once with relaxed margins).
struct ScanOutcome {
    meas: Measurement,
    record: ScanRecord,
    learned: Option<(LocalCbf, LearningDatasets, f64, f64)>,
    events: Vec<Event>,
    oracle_seconds: f64,
}

fn scan_and_learn(sc: &Scenario, x: &[f64], step: usize, index: usize, exec: Execution) -> Result<ScanOutcome> {
    let meas = sc.env.lidar_scan(x, &sc.lidar)?;
    let hash = meas.hash_hex();
    let mut events = vec![Event::Scan { step, index, state: x.to_vec(), hash: hash.clone() }];
    let mut record = ScanRecord {
        index,
        step,
        state: x.to_vec(),
        hash,
        safe_points: meas.safe_points.len(),
        oracle: None,
        oracle_pairs: 0,
        part: None,
        relaxed: false,
    };
    let t = Instant::now();
    let oracle = run_oracle(&meas, &sc.sys, &sc.oracle, exec);
    let oracle_seconds = t.elapsed().as_secs_f64();
    let out = match oracle {
        Ok((vg, out)) => {
            record.oracle = Some(vg.info);
            record.oracle_pairs = out.len();
            out
        }
        Err(e) => {
            log::warn!("oracle failed on scan {index}: {e}");
            events.push(Event::LearnFailed { index, relaxed: false, error: e.to_string() });
            return Ok(ScanOutcome { meas, record, learned: None, events, oracle_seconds });
        }
    };
    let mut learned = None;
    for relaxed in [false, true] {
        let hp = if relaxed { sc.learn.relaxed() } else { sc.learn.clone() };
        match learn_local_cbf(&meas, &out, &sc.sys, &hp, &sc.basis, index, exec) {
            Ok(o) => {
                record.relaxed = relaxed;
                learned = Some((o.cbf, o.datasets, o.seconds, o.qp_seconds));
                break;
            }
            Err(e) => {
                log::warn!("learning failed on scan {index} (relaxed: {relaxed}): {e}");
                events.push(Event::LearnFailed { index, relaxed, error: e.to_string() });
            }
        }
    }
    Ok(ScanOutcome { meas, record, learned, events, oracle_seconds })
}

fn coverage_samples(env: &Environment, sys: &ControlAffineSystem, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let b = env.bounds;
    (0..n)
        .map(|_| {
            let mut x = vec![rng.gen_range(b.min[0]..b.max[0]), rng.gen_range(b.min[1]..b.max[1])];
            if sys.state_dim() == 3 {
                x.push(rng.gen_range(-PI..PI));
            }
            x
        })
        .collect()
}

fn voxel_q(xs: &[Vec<f64>], h: f64) -> Vec<Point> {
    let mut seen = BTreeSet::new();
    xs.iter().map(|x| [x[0], x[1]]).filter(|q| seen.insert(((q[0] / h).floor() as i64, (q[1] / h).floor() as i64))).collect()
}

/// Runs the full loop: scan at `x0`, learn, then alternate steering legs and scans until the
/// scan budget is spent, no frontier is left, or the agent collides.
pub fn run_exploration(sc: &Scenario, exec: Execution) -> Result<ExplorationLog> {
    sc.validate()?;
    let start = Instant::now();
    let cfg = &sc.explore;
    let mut log = ExplorationLog { trajectory: Trajectory::new(cfg.dt, sc.x0.clone(), 0.0), ..Default::default() };
    let d0 = sc.env.signed_distance([sc.x0[0], sc.x0[1]]);
    if d0 <= 0.0 {
        return Err(Error::ScanFromUnsafeState { distance: d0 });
    }
    let mut cc = CompositeCbf::new(cfg.eps);
    let mut visited: Vec<Point> = Vec::new();
    let mut reachable: Vec<Point> = Vec::new();
    let probes = coverage_samples(&sc.env, &sc.sys, cfg.coverage_samples, cfg.seed);
    let kappa = sc.learn.kappa;
    for index in 0..cfg.max_scans {
        if index > 0 {
            let t = Instant::now();
            let target = select_boundary_target(&cc, &sc.sys, &visited, &reachable, &sc.env.bounds, cfg);
            log.timings.frontier.push(t.elapsed().as_secs_f64());
            let target = match target {
                Ok(t) => t,
                Err(Error::NoFrontier) => {
                    log.stop = Some(StopReason::NoFrontier);
                    break;
                }
                Err(e) => return Err(e),
            };
            log::info!("leg {index}: target {:?} (H = {:.2e}, score {:.3})", target.x, target.value, target.score);
            let step = log.trajectory.len() - 1;
            log.events.push(Event::Target { step, target: target.x.clone(), value: target.value, score: target.score });
            let t = Instant::now();
            let mut leg = LegLog::default();
            let q = [target.x[0], target.x[1]];
            let end = steer(&sc.env, &sc.sys, |x, u| cc.safety_filter(&sc.sys, x, u, kappa), q, cfg, &mut log.trajectory, &mut leg, true)?;
            log.timings.steering.push(t.elapsed().as_secs_f64());
            log.events.extend(leg.events);
            log.filter_residuals.extend(leg.residuals);
            log.audit.extend(leg.audit);
            log.events.push(Event::LegEnd { step: log.trajectory.len() - 1, reason: end });
            if end == LegEnd::Violation {
                log.stop = Some(StopReason::Violation);
                break;
            }
        }
        let x = log.trajectory.last_state().to_vec();
        let step = log.trajectory.len() - 1;
        visited.push([x[0], x[1]]);
        let out = scan_and_learn(sc, &x, step, index, exec)?;
        log.timings.oracle.push(out.oracle_seconds);
        log.events.extend(out.events);
        let mut record = out.record;
        if let Some((cbf, ds, secs, qp)) = out.learned {
            log.timings.learn.push(secs);
            log.timings.qp.push(qp);
            let seed = cfg.seed ^ (index as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let sup = sample_superlevel_set(&cbf, cfg.superlevel_samples, seed, exec);
            let relaxed = record.relaxed;
            match cc.push(cbf) {
                Ok(()) => {
                    let part = cc.len() - 1;
                    record.part = Some(part);
                    reachable.extend(voxel_q(&sup, 0.05));
                    log.datasets.push(ds);
                    log.events.push(Event::Learned { index, part, relaxed });
                    let hs = par::map_slice(exec, &probes, |x| cc.eval_h(x).map(|v| v.0).unwrap_or(f64::NEG_INFINITY));
                    log.coverage.push(hs.iter().filter(|&&v| v >= 0.0).count() as f64 / probes.len().max(1) as f64);
                }
                Err(e) => {
                    log.events.push(Event::LearnFailed { index, relaxed, error: e.to_string() });
                }
            }
        }
        log.measurements.push(out.meas);
        log.scans.push(record);
        if cc.is_empty() {
            return Err(Error::EmptyComposite);
        }
    }
    let reason = *log.stop.get_or_insert(StopReason::MaxScans);
    log.events.push(Event::Stop { step: log.trajectory.len() - 1, reason });
    log.composite = Some(cc);
    log.timings.total = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Outcome of a closed-loop rollout toward a fixed goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRollout {
    pub reached: bool,
    /// Simulated seconds until the goal tolerance was met (whole rollout if never).
    pub time: f64,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_distance: f64,
    pub violations: usize,
    pub infeasible_steps: usize,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_filter_residual: f64,
    pub trajectory: Trajectory,
}

/// Steers from `x0` toward `goal` under `filter` with the exploration steering settings,
/// but without the stall trigger.
pub fn goal_rollout<F>(sc: &Scenario, x0: &[f64], goal: Point, steps: usize, stop_on_violation: bool, filter: F) -> Result<GoalRollout>
where
    F: Fn(&[f64], &[f64]) -> Result<FilterResult>,
{
    let cfg = ExplorationConfig { max_steps: steps, stall_steps: usize::MAX, ..sc.explore.clone() };
    let mut traj = Trajectory::new(cfg.dt, x0.to_vec(), 0.0);
    let mut leg = LegLog::default();
    let reached = steer(&sc.env, &sc.sys, filter, goal, &cfg, &mut traj, &mut leg, stop_on_violation)? == LegEnd::Reached;
    let infeasible_steps = leg.events.iter().filter(|e| matches!(e, Event::Infeasible { .. })).count();
    Ok(GoalRollout {
        reached,
        time: traj.last_time(),
        min_distance: min_distance(&sc.env, &traj),
        violations: leg.audit.len(),
        infeasible_steps,
        min_filter_residual: leg.residuals.iter().copied().fold(f64::INFINITY, f64::min),
        trajectory: traj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleShotReport {
    pub incremental_parts: usize,
    pub incremental_learn_seconds: f64,
    pub single_shot_learn_seconds: f64,
    pub ratio: f64,
    /// Solver time alone, excluding dataset assembly and containment sampling.
    pub incremental_qp_seconds: f64,
    pub single_shot_qp_seconds: f64,
    pub qp_ratio: f64,
    pub single_shot_centers: usize,
    pub single_shot_stats: Option<FitStats>,
    /// Set when the single-shot fit failed; the rollout fields are then absent.
    pub single_shot_error: Option<String>,
    pub goal: Point,
    pub incremental: GoalRollout,
    pub single_shot: Option<GoalRollout>,
}

impl SingleShotReport {
    pub fn time_ratio(&self) -> Option<f64> {
        self.single_shot.as_ref().map(|s| self.incremental.time / s.time)
    }
}

/// Refits one barrier on the union of every incremental dataset (centers spanning all scans)
/// and races both barriers from `x0` to `goal`.
pub fn run_single_shot_comparison(
    sc: &Scenario,
    log: &ExplorationLog,
    goal: Point,
    steps: usize,
    exec: Execution,
) -> Result<SingleShotReport> {
    let cc = log.composite.as_ref().ok_or(Error::EmptyComposite)?;
    let learned: Vec<Measurement> =
        log.scans.iter().zip(&log.measurements).filter(|(r, _)| r.part.is_some()).map(|(_, m)| m.clone()).collect();
    let kappa = sc.learn.kappa;
    let incremental = goal_rollout(sc, &sc.x0, goal, steps, false, |x, u| cc.safety_filter(&sc.sys, x, u, kappa))?;
    let t = Instant::now();
    let fit = (|| -> Result<(LocalCbf, f64)> {
        let ds = LearningDatasets::union(&log.datasets, &learned);
        let basis = centers_for_scans(&learned, &sc.sys, &sc.basis)?;
        let domain = ValidityDomain::hull(&basis, basis.support);
        let Fit { weights, stats, qp_seconds } = fit_weights(&ds, &basis, &domain, &sc.sys, &sc.learn, &learned, sc.learn.seed, exec)?;
        let scan = learned[0].clone();
        let cbf = LocalCbf { basis, weights, bias: sc.learn.b, domain, scan_index: 0, scan_hash: String::new(), scan, stats };
        Ok((cbf, qp_seconds))
    })();
    let single_shot_learn_seconds = t.elapsed().as_secs_f64();
    let incremental_learn_seconds = log.timings.learn_total();
    let incremental_qp_seconds: f64 = log.timings.qp.iter().sum();
    let mut report = SingleShotReport {
        incremental_parts: cc.len(),
        incremental_learn_seconds,
        single_shot_learn_seconds,
        ratio: single_shot_learn_seconds / incremental_learn_seconds.max(1e-12),
        incremental_qp_seconds,
        single_shot_qp_seconds: 0.0,
        qp_ratio: 0.0,
        single_shot_centers: 0,
        single_shot_stats: None,
        single_shot_error: None,
        goal,
        incremental,
        single_shot: None,
    };
    match fit {
        Ok((cbf, qp)) => {
            report.single_shot_qp_seconds = qp;
            report.qp_ratio = qp / incremental_qp_seconds.max(1e-12);
            report.single_shot_centers = cbf.basis.len();
            report.single_shot_stats = Some(cbf.stats.clone());
            let one = CompositeCbf { parts: vec![cbf], eps: cc.eps };
            report.single_shot = Some(goal_rollout(sc, &sc.x0, goal, steps, false, |x, u| one.safety_filter(&sc.sys, x, u, kappa))?);
        }
        Err(e) => {
            log::warn!("single-shot fit failed: {e}");
            report.single_shot_error = Some(e.to_string());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfBaselineReport {
    pub goal: Point,
    pub baseline: GoalRollout,
    pub composite: GoalRollout,
}

/// Races the scan-distance baseline against the learned barrier of the same first scan,
/// both steered toward `goal`.
pub fn run_sdf_baseline(sc: &Scenario, goal: Point, steps: usize, exec: Execution) -> Result<SdfBaselineReport> {
    sc.validate()?;
    let out = scan_and_learn(sc, &sc.x0, 0, 0, exec)?;
    let (cbf, _, _, _) = out.learned.ok_or_else(|| Error::Artifact("first scan produced no barrier".into()))?;
    let sdf = ScanSdf::new(vec![out.meas]);
    let kappa = sc.learn.kappa;
    let baseline = goal_rollout(sc, &sc.x0, goal, steps, true, |x, u| sdf_baseline_filter(&sdf, &sc.sys, x, u, kappa))?;
    let mut cc = CompositeCbf::new(sc.explore.eps);
    cc.push(cbf)?;
    let composite = goal_rollout(sc, &sc.x0, goal, steps, true, |x, u| cc.safety_filter(&sc.sys, x, u, kappa))?;
    Ok(SdfBaselineReport { goal, baseline, composite })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffReport {
    pub features: usize,
    pub lengthscale: f64,
    pub fit_error: Option<String>,
    pub outside_samples: usize,
    pub rff_positive: usize,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub rff_max: f64,
    pub csrbf_positive: usize,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub csrbf_max: f64,
    pub domain: ValidityDomain,
    /// Position projections of the first positive cosine-feature samples, at most 2000.
    pub rff_positive_points: Vec<Point>,
}

/// Fits cosine features to the first scan's learning data and counts positive values away
/// from that data, next to the compact fit on identical rows.
pub fn run_rff_demo(sc: &Scenario, features: usize, lengthscale: f64, samples: usize, exec: Execution) -> Result<RffReport> {
    sc.validate()?;
    let out = scan_and_learn(sc, &sc.x0, 0, 0, exec)?;
    let (cbf, ds, _, _) = out.learned.ok_or_else(|| Error::Artifact("first scan produced no barrier".into()))?;
    let rff = CosineFeatures::new(sc.sys.state_dim(), features, lengthscale, sc.learn.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.learn.seed ^ 0x5eed);
    let pts = sample_outside(&cbf.domain, 4.0 * cbf.basis.support, samples, &mut rng);
    let hs = par::map_slice(exec, &pts, |x| cbf.value(x));
    let csrbf_max = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let csrbf_positive = hs.iter().filter(|&&v| v > 0.0).count();
    let mut report = RffReport {
        features,
        lengthscale,
        fit_error: None,
        outside_samples: pts.len(),
        rff_positive: 0,
        rff_max: f64::NAN,
        csrbf_positive,
        csrbf_max,
        domain: cbf.domain.clone(),
        rff_positive_points: Vec::new(),
    };
    let fit = assemble_qp(&ds, &rff, &sc.sys, &sc.learn, exec).and_then(|qp| {
        let opts = QpOptions { max_iter: sc.learn.qp_max_iter, ..QpOptions::default() };
        solve_qp(qp.n, vec![0.0; qp.n], qp.rows, opts)
    });
    match fit {
        Ok(sol) => {
            let b = sc.learn.b;
            let hr = par::map_slice(exec, &pts, |x| {
                use crate::basis::FeatureMap;
                rff.eval_sparse(x).iter().map(|e| sol.x[e.index] * e.value).sum::<f64>() - b
            });
            report.rff_max = hr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            report.rff_positive = hr.iter().filter(|&&v| v > 0.0).count();
            report.rff_positive_points = pts.iter().zip(&hr).filter(|(_, &v)| v > 0.0).take(2000).map(|(x, _)| [x[0], x[1]]).collect();
        }
        Err(e) => report.fit_error = Some(e.to_string()),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dubins_reference_straight_and_left() {
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        assert_eq!(reference_controller(&sys, &[0.0, 0.0, 0.0], [1.0, 0.0], 1.0), vec![0.0]);
        let u = reference_controller(&sys, &[0.0, 0.0, 0.0], [0.0, 1.0], 1.0);
        assert!((u[0] - 0.4).abs() < 1e-12);
        let u = reference_controller(&sys, &[0.0, 0.0, 0.0], [0.0, -1.0], 1.0);
        assert!((u[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn planar_reference_matches_grid_search() {
        let sys = ControlAffineSystem::planar(0.33, 1.0, InputNorm::Inf);
        let u = reference_controller(&sys, &[0.0, 0.0], [1.0, 0.0], 0.05);
        assert_eq!(u, vec![1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = ExplorationConfig::default();
        c.validate().unwrap();
        c.dt = -1.0;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("dt")));
    }
}
