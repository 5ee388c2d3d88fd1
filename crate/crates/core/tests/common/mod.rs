#![allow(dead_code)]

use std::path::PathBuf;

use cbf_compose::config::ScenarioConfig;
use cbf_compose::exploration::Scenario;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load(name: &str) -> (ScenarioConfig, Scenario) {
    let cfg = ScenarioConfig::load(&scenario_path(name)).expect("bundled scenario parses");
    let sc = cfg.to_scenario().expect("bundled scenario resolves");
    (cfg, sc)
}

pub fn dubins() -> (ScenarioConfig, Scenario) {
    load("dubins.cfg")
}

pub fn planar() -> (ScenarioConfig, Scenario) {
    load("planar.cfg")
}

use cbf_compose::basis::CsRbfBasis;
use cbf_compose::environment::{Bounds, Environment, LidarConfig, Measurement};
use cbf_compose::learning::{FitStats, LocalCbf, ValidityDomain};

pub fn open_env() -> Environment {
    Environment::new(Bounds { min: [-10.0, -10.0], max: [10.0, 10.0] }, vec![]).unwrap()
}

pub fn open_scan(state: &[f64], r: f64) -> Measurement {
    open_env().lidar_scan(state, &LidarConfig::new(r)).unwrap()
}

/// Planar barrier built from hand-picked centers and weights.
pub fn hand_cbf(centers: Vec<Vec<f64>>, weights: Vec<f64>, support: f64, bias: f64) -> LocalCbf {
    let dim = centers[0].len();
    let angular = vec![false; dim];
    let basis = CsRbfBasis::new(centers, support, angular).unwrap();
    let domain = ValidityDomain::hull(&basis, support);
    let c = [basis.center(0)[0], basis.center(0)[1]];
    LocalCbf {
        weights,
        bias,
        domain,
        scan_index: 0,
        scan: cbf_compose::learning::footprint(&open_scan(&c, 1.0)),
        scan_hash: String::new(),
        stats: FitStats::default(),
        basis,
    }
}
