//! On-disk layout of a run directory.
//!
//! ```text
//! <out>/scenario.json        resolved scenario (environment, system, every knob)
//! <out>/summary.json         deterministic run summary
//! <out>/timings.json         wall-clock phase timings
//! <out>/log.json             trajectory, scan records, audit, coverage
//! <out>/events.jsonl         one event per line
//! <out>/trajectory.csv       t, x.., u.., H, active, status
//! <out>/composite.json       manifest: eps and the part files in order
//! <out>/cbfs/cbf_NNN.json    one local barrier per file
//! <out>/scans/scan_NNN.json  raw scans
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::composite::CompositeCbf;
use crate::dynamics::{FilterStatus, Trajectory};
use crate::environment::Measurement;
use crate::error::{Error, Result};
use crate::exploration::{Event, ExplorationLog, PhaseTimings, Scenario, StopReason};
use crate::learning::LocalCbf;

/// Serde adapter for `f64` that survives JSON: non-finite values become the strings
/// `"inf"`, `"-inf"` and `"nan"`.
pub mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("not a number: {s}"))),
            },
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

/// Part files referenced by a composite manifest, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeManifest {
    pub eps: f64,
    pub parts: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub scan_index: usize,
    pub scan_hash: String,
}

pub fn save_composite(dir: &Path, cc: &CompositeCbf) -> Result<PathBuf> {
    let mut parts = Vec::new();
    for (i, p) in cc.parts.iter().enumerate() {
        let file = format!("cbfs/cbf_{i:03}.json");
        write_json(&dir.join(&file), p)?;
        parts.push(ManifestEntry { file, scan_index: p.scan_index, scan_hash: p.scan_hash.clone() });
    }
    let path = dir.join("composite.json");
    write_json(&path, &CompositeManifest { eps: cc.eps, parts })?;
    Ok(path)
}

pub fn load_composite(manifest: &Path) -> Result<CompositeCbf> {
    let m: CompositeManifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let parts = m.parts.iter().map(|e| read_json::<LocalCbf>(&base.join(&e.file))).collect::<Result<Vec<_>>>()?;
    Ok(CompositeCbf { parts, eps: m.eps })
}

/// A barrier artifact on disk: one part or a composite manifest.
pub fn load_barriers(path: &Path) -> Result<CompositeCbf> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("parts").is_some() && value.get("eps").is_some() {
        load_composite(path)
    } else {
        let cbf: LocalCbf = serde_json::from_value(value).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        Ok(CompositeCbf { parts: vec![cbf], eps: 0.0 })
    }
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let dim = traj.states.first().map_or(0, Vec::len);
    let m = traj.controls.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for k in 0..dim {
        let _ = write!(out, ",x{k}");
    }
    for k in 0..m {
        let _ = write!(out, ",u{k}");
    }
    out.push_str(",H,active,status\n");
    for i in 0..traj.states.len() {
        let _ = write!(out, "{}", traj.times[i]);
        for v in &traj.states[i] {
            let _ = write!(out, ",{v}");
        }
        if i < traj.controls.len() {
            for v in &traj.controls[i] {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{}", traj.barrier[i], traj.active[i], traj.status[i].as_str());
        } else {
            // Final state: no control applied from it.
            out.push_str(&",".repeat(m));
            out.push_str(",,,\n");
        }
    }
    out
}

/// Parses [`trajectory_csv`] output back.
pub fn parse_trajectory_csv(text: &str, dt: f64) -> Result<Trajectory> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Artifact("empty trajectory".into()))?.split(',').collect();
    let dim = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    let bad = |l: &str| Error::Artifact(format!("malformed trajectory row: {l}"));
    let num = |s: &str, l: &str| s.parse::<f64>().map_err(|_| bad(l));
    let mut traj = Trajectory { dt, ..Default::default() };
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 1 + dim + m + 3 {
            return Err(bad(line));
        }
        traj.times.push(num(f[0], line)?);
        traj.states.push(f[1..1 + dim].iter().map(|s| num(s, line)).collect::<Result<_>>()?);
        if f[1 + dim + m].is_empty() {
            continue;
        }
        traj.controls.push(f[1 + dim..1 + dim + m].iter().map(|s| num(s, line)).collect::<Result<_>>()?);
        traj.barrier.push(num(f[1 + dim + m], line)?);
        traj.active.push(f[2 + dim + m].parse().map_err(|_| bad(line))?);
        let status: FilterStatus = serde_json::from_value(serde_json::Value::String(f[3 + dim + m].to_string())).map_err(|_| bad(line))?;
        traj.status.push(status);
    }
    Ok(traj)
}

/// Deterministic digest of a run; no clock readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub safe: bool,
    pub violations: usize,
    #[serde(with = "lenient_f64")]
    pub min_signed_distance: f64,
    #[serde(with = "lenient_f64")]
    pub min_barrier: f64,
    pub cbf_count: usize,
    pub scans: usize,
    pub steps: usize,
    pub final_time: f64,
    pub stop: Option<StopReason>,
    pub coverage: Vec<f64>,
    pub status_counts: StatusCounts,
    pub infeasible_steps: usize,
    #[serde(with = "lenient_f64")]
    pub min_filter_residual: f64,
    pub scan_hashes: Vec<String>,
    pub timings_file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub filtered: usize,
    pub reference_passed: usize,
    pub fallback_single_cbf: usize,
    pub hold_safe: usize,
}

pub fn summarize(name: &str, seed: u64, sc: &Scenario, log: &ExplorationLog) -> RunSummary {
    let mut counts = StatusCounts::default();
    for s in &log.trajectory.status {
        match s {
            FilterStatus::Filtered => counts.filtered += 1,
            FilterStatus::ReferencePassed => counts.reference_passed += 1,
            FilterStatus::FallbackSingleCbf => counts.fallback_single_cbf += 1,
            FilterStatus::HoldSafe => counts.hold_safe += 1,
        }
    }
    let min_filter_residual = log
        .filter_residuals
        .iter()
        .zip(&log.trajectory.status)
        .filter(|(_, s)| matches!(s, FilterStatus::Filtered | FilterStatus::ReferencePassed))
        .map(|(r, _)| *r)
        .fold(f64::INFINITY, f64::min);
    RunSummary {
        name: name.to_string(),
        seed,
        safe: log.is_safe(),
        violations: log.audit.len(),
        min_signed_distance: log.min_distance(&sc.env),
        min_barrier: log.trajectory.barrier.iter().copied().fold(f64::INFINITY, f64::min),
        cbf_count: log.cbfs().len(),
        scans: log.scans.len(),
        steps: log.trajectory.controls.len(),
        final_time: log.trajectory.last_time(),
        stop: log.stop,
        coverage: log.coverage.clone(),
        status_counts: counts,
        infeasible_steps: log.events.iter().filter(|e| matches!(e, Event::Infeasible { .. })).count(),
        min_filter_residual,
        scan_hashes: log.scans.iter().map(|s| s.hash.clone()).collect(),
        timings_file: "timings.json".into(),
    }
}

/// Writes every artifact of a finished run into `dir`.
pub fn save_run(dir: &Path, name: &str, seed: u64, sc: &Scenario, log: &ExplorationLog) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("scenario.json"), sc)?;
    let summary = summarize(name, seed, sc, log);
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("timings.json"), &log.timings)?;
    let mut slim = log.clone();
    slim.composite = None;
    write_json(&dir.join("log.json"), &slim)?;
    let mut ev = fs::File::create(dir.join("events.jsonl"))?;
    for e in &log.events {
        writeln!(ev, "{}", serde_json::to_string(e)?)?;
    }
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&log.trajectory))?;
    if let Some(cc) = &log.composite {
        save_composite(dir, cc)?;
    }
    for (i, m) in log.measurements.iter().enumerate() {
        write_json(&dir.join(format!("scans/scan_{i:03}.json")), m)?;
    }
    Ok(summary)
}

/// A run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub scenario: Scenario,
    pub log: ExplorationLog,
    pub timings: Option<PhaseTimings>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let scenario: Scenario = read_json(&dir.join("scenario.json"))?;
    let mut log: ExplorationLog = read_json(&dir.join("log.json"))?;
    let manifest = dir.join("composite.json");
    if manifest.exists() {
        log.composite = Some(load_composite(&manifest)?);
    }
    for i in 0.. {
        let p = dir.join(format!("scans/scan_{i:03}.json"));
        if !p.exists() {
            break;
        }
        log.measurements.push(read_json::<Measurement>(&p)?);
    }
    let timings = read_json(&dir.join("timings.json")).ok();
    Ok(LoadedRun { scenario, log, timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut t = Trajectory::new(0.05, vec![0.1, -1.0 / 3.0, 2.0f64.sqrt()], 0.0);
        t.push(vec![0.4], 1e-17, 2, FilterStatus::Filtered, vec![0.2, std::f64::consts::PI, -0.0]);
        t.push(vec![-0.123456789012345], -3.5e-5, 0, FilterStatus::HoldSafe, vec![1.0, 2.0, 3.0]);
        let back = parse_trajectory_csv(&trajectory_csv(&t), 0.05).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn lenient_floats() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W(#[serde(with = "lenient_f64")] f64);
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.1 + 0.2, -0.0] {
            let s = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&s).unwrap(), W(v));
        }
        let s = serde_json::to_string(&W(f64::NAN)).unwrap();
        assert!(serde_json::from_str::<W>(&s).unwrap().0.is_nan());
    }
}
