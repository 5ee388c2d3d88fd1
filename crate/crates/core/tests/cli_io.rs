mod common;

use std::fs;
use std::path::Path;

use cbf_compose::artifacts::{load_run, parse_trajectory_csv, read_json, trajectory_csv, write_json, LoadedRun, RunSummary};
use cbf_compose::commands::{cmd_plot, cmd_run, cmd_verify, render_plot};
use cbf_compose::config::{reference_toml, ScenarioConfig};
use cbf_compose::exploration::ExplorationLog;
use cbf_compose::learning::LocalCbf;
use cbf_compose::par::Execution;
use cbf_compose::plot::PlotKind;
use cbf_compose::Error;
use quick_xml::events::Event;
use quick_xml::Reader;

const EXEC: Execution = Execution::Parallel;

fn planar_text() -> String {
    fs::read_to_string(common::scenario_path("planar.cfg")).unwrap()
}

fn config_error(text: &str) -> String {
    match ScenarioConfig::parse(text) {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn negative_input_bound_names_the_field() {
    let m = config_error(&planar_text().replace("u_max = 1.0", "u_max = -1.0"));
    assert!(m.contains("system.u_max"), "{m}");
    let m = config_error(&planar_text().replace("radius = 1.0\n\n[learning]", "radius = 0.0\n\n[learning]"));
    assert!(m.contains("lidar.radius"), "{m}");
    let m = config_error(&planar_text().replace("x0 = [0.0, 0.0]", "x0 = [0.0, 0.0, 1.0]"));
    assert!(m.contains("system.x0"), "{m}");
}

#[test]
fn unknown_keys_are_rejected() {
    let m = config_error(&planar_text().replace("[lidar]", "[lidar]\nrange_noise = 0.1"));
    assert!(m.contains("range_noise"), "{m}");
    let m = config_error(&format!("{}\n[extras]\nfoo = 1\n", planar_text()));
    assert!(m.contains("extras"), "{m}");
}

#[test]
fn reference_config_round_trips() {
    let text = reference_toml();
    let cfg = ScenarioConfig::parse(&text).unwrap();
    assert_eq!(cfg.to_toml().unwrap(), text);
    let sc = cfg.to_scenario().unwrap();
    assert_eq!(sc.sys.state_dim(), 3);
}

#[test]
fn bundled_scenarios_parse() {
    for name in ["dubins.cfg", "planar.cfg", "planar_quick.cfg"] {
        common::load(name);
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "cbfs", "scans"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            if rel != "timings.json" {
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out
}

fn well_formed(svg: &str) {
    let mut r = Reader::from_str(svg);
    let mut depth = 0i64;
    let mut saw_svg = false;
    loop {
        match r.read_event().unwrap() {
            Event::Start(e) => {
                saw_svg |= e.name().as_ref() == b"svg";
                depth += 1;
            }
            Event::End(_) => depth -= 1,
            Event::Eof => break,
            _ => {}
        }
    }
    assert!(saw_svg && depth == 0);
}

#[test]
fn quick_run_is_reproducible_and_verifiable() {
    let cfg = common::scenario_path("planar_quick.cfg");
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ra = cmd_run(&cfg, Some(4), Some(&a), EXEC).unwrap();
    let rb = cmd_run(&cfg, Some(4), Some(&b), EXEC).unwrap();
    assert_eq!(ra.exit_code(), 0);
    assert_eq!(ra.summary, rb.summary);
    assert_eq!(files(&a), files(&b));
    assert!(a.join("timings.json").exists() && a.join("config.toml").exists());

    // Artifacts read back to what was written.
    let run = load_run(&a).unwrap();
    assert_eq!(run.log.trajectory.states, ra.log.trajectory.states);
    assert_eq!(run.log.composite, ra.log.composite);
    assert_eq!(run.log.measurements.len(), ra.log.scans.len());
    let summary: RunSummary = read_json(&a.join("summary.json")).unwrap();
    assert_eq!(summary, ra.summary);
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let traj = parse_trajectory_csv(&csv, run.log.trajectory.dt).unwrap();
    assert_eq!(trajectory_csv(&traj), csv);

    // Every plot kind is well-formed XML.
    let written = cmd_plot(&a, None, None, 0.0, EXEC).unwrap();
    assert_eq!(written.len(), PlotKind::ALL.len());
    for p in &written {
        well_formed(&fs::read_to_string(p).unwrap());
    }

    // A fresh artifact passes; tampered ones do not.
    let report = cmd_verify(&a.join("composite.json"), &cfg, EXEC).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.parts.iter().all(|p| p.scan_hash_ok == Some(true)));
    let part = a.join("cbfs/cbf_000.json");
    let original: LocalCbf = read_json(&part).unwrap();
    let mut wrong_hash = original.clone();
    wrong_hash.scan_hash = "0".repeat(64);
    write_json(&part, &wrong_hash).unwrap();
    let r = cmd_verify(&part, &cfg, EXEC).unwrap();
    assert!(!r.passed && r.parts[0].scan_hash_ok == Some(false));
    let mut flipped = original.clone();
    flipped.weights.iter_mut().for_each(|w| *w = -*w);
    write_json(&part, &flipped).unwrap();
    assert!(!cmd_verify(&part, &cfg, EXEC).unwrap().passed);

    assert!(matches!(cmd_verify(&a.join("nope.json"), &cfg, EXEC), Err(Error::Artifact(_))));
    assert!(matches!(cmd_plot(&tmp.path().join("missing"), None, None, 0.0, EXEC), Err(Error::Artifact(_))));
}

#[test]
fn empty_run_plots_only_the_environment() {
    let (_, sc) = common::planar();
    let run = LoadedRun { scenario: sc, log: ExplorationLog::default(), timings: None };
    for kind in PlotKind::ALL {
        let svg = render_plot(&run, kind, 0.0, EXEC);
        well_formed(&svg);
        assert!(!svg.contains("<polyline"), "{kind:?} drew a path");
    }
    let svg = render_plot(&run, PlotKind::Trajectory, 0.0, EXEC);
    assert_eq!(svg.matches("<circle").count(), 2);
}
