//! Command-line entry points, kept in the library so they can be driven from tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifacts::{self, RunSummary};
use crate::composite::CompositeCbf;
use crate::config::ScenarioConfig;
use crate::environment::{Measurement, Point};
use crate::error::{Error, Result};
use crate::exploration::{self, ExplorationLog, RffReport, SdfBaselineReport, SingleShotReport};
use crate::learning::{verify_local_cbf, VerificationReport};
use crate::par::Execution;
use crate::plot::{self, Canvas, PlotKind};

/// Samples per check in [`cmd_verify`].
pub const VERIFY_SAMPLES: usize = 10_000;

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub log: ExplorationLog,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.log.audit.is_empty() {
            0
        } else {
            1
        }
    }
}

pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>, exec: Execution) -> Result<RunOutcome> {
    let cfg = load_config(config, seed)?;
    let sc = cfg.to_scenario()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    log::info!("run `{}` seed {} into {}", cfg.name, cfg.seed, dir.display());
    let log = exploration::run_exploration(&sc, exec)?;
    let summary = artifacts::save_run(&dir, &cfg.name, cfg.seed, &sc, &log)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(RunOutcome { dir, summary, log })
}

/// Renders one figure of a saved run.
pub fn render_plot(run: &artifacts::LoadedRun, kind: PlotKind, theta: f64, exec: Execution) -> String {
    let sc = &run.scenario;
    let dim = sc.sys.state_dim();
    let mut cv = Canvas::for_env(&sc.env);
    let empty = CompositeCbf::new(sc.explore.eps);
    let cc = run.log.composite.as_ref().unwrap_or(&empty);
    let title = match kind {
        PlotKind::Trajectory => {
            plot::draw_scans(&mut cv, &run.log.measurements);
            plot::draw_trajectory(&mut cv, &run.log.trajectory, "#d62728");
            "trajectory".to_string()
        }
        PlotKind::Levelsets => {
            plot::draw_levelsets(&mut cv, cc, dim, theta, &plot::env_lattice(&sc.env, 161), "black", exec);
            plot::draw_trajectory(&mut cv, &run.log.trajectory, "#d62728");
            format!("zero level sets, theta = {theta:.3}")
        }
        PlotKind::AngleArcs => {
            let pos = plot::arc_positions(&sc.env, &run.log.measurements, 0.2);
            plot::draw_angle_arcs(&mut cv, cc, dim, &pos, 0.07);
            "heading arcs (blue safe, red unsafe)".to_string()
        }
        PlotKind::Gradnorm => {
            let max = plot::draw_gradnorm(&mut cv, cc, dim, theta, &plot::env_lattice(&sc.env, 121), exec);
            format!("gradient norm on the safe set, theta = {theta:.3}, max {max:.3}")
        }
    };
    plot::draw_environment(&mut cv, &sc.env);
    cv.finish(&title)
}

/// Writes SVGs of a saved run; all kinds when `kind` is `None`. Returns the written paths.
pub fn cmd_plot(dir: &Path, kind: Option<PlotKind>, out: Option<&Path>, theta: f64, exec: Execution) -> Result<Vec<PathBuf>> {
    for required in ["scenario.json", "log.json"] {
        if !dir.join(required).exists() {
            return Err(Error::Artifact(format!("missing run artifact {}", dir.join(required).display())));
        }
    }
    let run = artifacts::load_run(dir)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("plots"));
    fs::create_dir_all(&out)?;
    let kinds: Vec<PlotKind> = kind.map(|k| vec![k]).unwrap_or_else(|| PlotKind::ALL.to_vec());
    let mut written = Vec::new();
    for k in kinds {
        let path = out.join(format!("{}.svg", k.as_str()));
        fs::write(&path, render_plot(&run, k, theta, exec))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMode {
    SdfBaseline,
    SingleShot,
    RffDemo,
}

impl CompareMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CompareMode::SdfBaseline => "sdf-baseline",
            CompareMode::SingleShot => "single-shot",
            CompareMode::RffDemo => "rff-demo",
        }
    }
}

impl FromStr for CompareMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [CompareMode::SdfBaseline, CompareMode::SingleShot, CompareMode::RffDemo]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown compare mode `{s}` (sdf-baseline, single-shot, rff-demo)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "report", rename_all = "kebab-case")]
pub enum CompareReport {
    SdfBaseline(SdfBaselineReport),
    SingleShot(SingleShotReport),
    RffDemo(RffReport),
}

/// Thresholds of the single-shot race.
pub const MIN_LEARN_RATIO: f64 = 1.5;
pub const MAX_TIME_RATIO: f64 = 1.1;

impl CompareReport {
    /// Whether the run shows the behaviour each comparison is meant to exhibit.
    pub fn expected_outcome(&self) -> bool {
        match self {
            CompareReport::SdfBaseline(r) => r.baseline.violations > 0 && r.composite.violations == 0,
            CompareReport::SingleShot(r) => {
                let Some(single) = &r.single_shot else { return false };
                r.qp_ratio >= MIN_LEARN_RATIO
                    && r.time_ratio().is_some_and(|t| t <= MAX_TIME_RATIO)
                    && r.incremental.violations == 0
                    && single.violations == 0
            }
            CompareReport::RffDemo(r) => r.rff_positive > 0 && r.csrbf_positive == 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareOutcome {
    pub expected_outcome: bool,
    #[serde(flatten)]
    pub report: CompareReport,
    #[serde(skip)]
    pub report_path: PathBuf,
    #[serde(skip)]
    pub svgs: Vec<PathBuf>,
}

pub fn cmd_compare(config: &Path, mode: CompareMode, seed: Option<u64>, out: Option<&Path>, exec: Execution) -> Result<CompareOutcome> {
    let cfg = load_config(config, seed)?;
    let sc = cfg.to_scenario()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let cc_cfg = &cfg.compare;
    let mut cv = Canvas::for_env(&sc.env);
    let report = match mode {
        CompareMode::SdfBaseline => {
            let r = exploration::run_sdf_baseline(&sc, cc_cfg.sdf_goal, cc_cfg.steps, exec)?;
            if let Ok(m) = sc.env.lidar_scan(&sc.x0, &sc.lidar) {
                plot::draw_scans(&mut cv, &[m]);
            }
            plot::draw_trajectory(&mut cv, &r.baseline.trajectory, "#d4a017");
            plot::draw_trajectory(&mut cv, &r.composite.trajectory, "#1f4fd8");
            draw_goal(&mut cv, r.goal);
            CompareReport::SdfBaseline(r)
        }
        CompareMode::SingleShot => {
            let log = exploration::run_exploration(&sc, exec)?;
            let goal = match cc_cfg.goal {
                Some(g) => g,
                None => log.scans.last().map(|s| [s.state[0], s.state[1]]).ok_or(Error::EmptyComposite)?,
            };
            let r = exploration::run_single_shot_comparison(&sc, &log, goal, cc_cfg.steps, exec)?;
            if let Some(cc) = &log.composite {
                plot::draw_levelsets(&mut cv, cc, sc.sys.state_dim(), 0.0, &plot::env_lattice(&sc.env, 121), "#1f4fd8", exec);
            }
            plot::draw_trajectory(&mut cv, &r.incremental.trajectory, "#1f4fd8");
            if let Some(s) = &r.single_shot {
                plot::draw_trajectory(&mut cv, &s.trajectory, "#ff7f0e");
            }
            draw_goal(&mut cv, goal);
            CompareReport::SingleShot(r)
        }
        CompareMode::RffDemo => {
            let r = exploration::run_rff_demo(&sc, cc_cfg.rff_features, cc_cfg.rff_lengthscale, cc_cfg.rff_samples, exec)?;
            cv.rect([r.domain.lo[0], r.domain.lo[1]], [r.domain.hi[0], r.domain.hi[1]], r##"fill="#e8f0ff" stroke="#1f4fd8""##);
            for p in &r.rff_positive_points {
                cv.dot(*p, 1.5, r##"fill="#d62728""##);
            }
            CompareReport::RffDemo(r)
        }
    };
    plot::draw_environment(&mut cv, &sc.env);
    let expected_outcome = report.expected_outcome();
    let report_path = dir.join(format!("compare_{}.json", mode.as_str()));
    let svg = dir.join(format!("compare_{}.svg", mode.as_str()));
    fs::write(&svg, cv.finish(mode.as_str()))?;
    let mut outcome = CompareOutcome { expected_outcome, report, report_path: report_path.clone(), svgs: vec![svg] };
    artifacts::write_json(&report_path, &outcome)?;
    outcome.report_path = report_path;
    Ok(outcome)
}

fn draw_goal(cv: &mut Canvas, g: Point) {
    cv.dot(g, 5.0, r#"fill="none" stroke="black" stroke-width="2""#);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartVerification {
    pub part: usize,
    pub scan_index: usize,
    /// Whether the raw scan saved next to the artifact hashes to the recorded value; unset
    /// when no scan file is found.
    pub scan_hash_ok: Option<bool>,
    /// No positive-weight center within one support radius of the domain boundary.
    pub decay_buffer: bool,
    pub report: VerificationReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub artifact: String,
    pub parts: Vec<PartVerification>,
    pub passed: bool,
}

/// `scans/scan_NNN.json` beside a manifest, or one level up from a `cbfs/` file.
fn raw_scan(artifact: &Path, index: usize) -> Option<Measurement> {
    let name = format!("scans/scan_{index:03}.json");
    artifact.ancestors().skip(1).take(2).map(|d| d.join(&name)).find(|p| p.exists()).and_then(|p| artifacts::read_json(&p).ok())
}

/// Audits a saved barrier file or composite manifest against the system of `config`.
pub fn cmd_verify(artifact: &Path, config: &Path, exec: Execution) -> Result<VerifyReport> {
    let cfg = load_config(config, None)?;
    let sc = cfg.to_scenario()?;
    if !artifact.exists() {
        return Err(Error::Artifact(format!("missing artifact {}", artifact.display())));
    }
    let cc = artifacts::load_barriers(artifact)?;
    let dim = sc.sys.state_dim();
    let mut parts = Vec::with_capacity(cc.len());
    for (i, cbf) in cc.parts.iter().enumerate() {
        if cbf.basis.dim != dim {
            return Err(Error::Artifact(format!("part {i} has state dimension {}, system has {dim}", cbf.basis.dim)));
        }
        let report = verify_local_cbf(cbf, &sc.sys, sc.learn.kappa, VERIFY_SAMPLES, sc.learn.seed.wrapping_add(i as u64), exec);
        let scan_hash_ok = raw_scan(artifact, cbf.scan_index).map(|m| m.hash_hex() == cbf.scan_hash);
        let decay_buffer = report.decay_buffer_violations == 0;
        let passed = report.passed() && scan_hash_ok != Some(false);
        parts.push(PartVerification { part: i, scan_index: cbf.scan_index, scan_hash_ok, decay_buffer, report, passed });
    }
    let passed = !parts.is_empty() && parts.iter().all(|p| p.passed);
    Ok(VerifyReport { artifact: artifact.display().to_string(), parts, passed })
}
