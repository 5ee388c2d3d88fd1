mod common;

use cbf_compose::composite::{CompositeCbf, DRIFT_TOL};
use cbf_compose::dynamics::{ControlAffineSystem, InputNorm};
use cbf_compose::environment::Bounds;
use cbf_compose::exploration::{reference_controller, run_exploration, select_boundary_target, ExplorationConfig, StopReason};
use cbf_compose::learning::{learn_local_cbf, BasisConfig, LearnHyperParams};
use cbf_compose::oracle::{run_oracle, OracleConfig};
use cbf_compose::par::Execution;
use cbf_compose::Error;
use common::{hand_cbf, open_scan};

const EXEC: Execution = Execution::Parallel;

#[test]
fn reference_controller_heads_for_the_target() {
    let si = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
    assert_eq!(reference_controller(&si, &[0.0, 0.0], [3.0, 0.0], 1.0), vec![1.0, 0.0]);
    assert_eq!(reference_controller(&si, &[0.0, 0.0], [-3.0, -3.0], 1.0), vec![-1.0, -1.0]);
    let u = reference_controller(&si, &[0.0, 0.0], [0.4, 0.0], 1.0);
    assert!((u[0] - 0.4).abs() < 1e-12 && u[1].abs() < 1e-12);
    let dubins = ControlAffineSystem::dubins(0.1, 0.4);
    assert!(reference_controller(&dubins, &[0.0, 0.0, 0.0], [2.0, 0.0], 1.0)[0].abs() < 1e-12);
    assert!(reference_controller(&dubins, &[0.0, 0.0, 0.0], [0.0, 1.0], 1.0)[0] > 0.0);
    assert!(reference_controller(&dubins, &[0.0, 0.0, 0.0], [0.0, -1.0], 1.0)[0] < 0.0);
}

#[test]
fn frontier_of_one_open_disk_hugs_its_boundary() {
    let m = open_scan(&[0.0, 0.0], 1.0);
    let sys = ControlAffineSystem::planar(0.33, 1.0, InputNorm::Inf);
    let (_, oracle) = run_oracle(&m, &sys, &OracleConfig::for_system(&sys), EXEC).unwrap();
    let hp = LearnHyperParams { kappa: 3.0, ..Default::default() };
    let cbf = learn_local_cbf(&m, &oracle, &sys, &hp, &BasisConfig::for_system(&sys), 0, EXEC).unwrap().cbf;
    let mut cc = CompositeCbf::new(5e-4);
    cc.push(cbf).unwrap();
    let cfg = ExplorationConfig::default();
    let reachable: Vec<[f64; 2]> = (0..360)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 360.0;
            [0.8 * a.cos(), 0.8 * a.sin()]
        })
        .filter(|q| cc.eval_h(q).unwrap().0 >= 0.0)
        .collect();
    assert!(!reachable.is_empty());
    let window = Bounds { min: [-2.0, -2.0], max: [2.0, 2.0] };
    let t = select_boundary_target(&cc, &sys, &[[0.0, 0.0]], &reachable, &window, &cfg).unwrap();
    let rho = t.x[0].hypot(t.x[1]);
    assert!(rho >= 1.0 && rho <= 1.0 + cfg.frontier_reach + cfg.candidate_spacing, "target at radius {rho}");
    assert!(t.value < 0.0 && t.value >= -2.0 * hp.b);
    assert!((t.score - rho).abs() < 1e-12);
}

#[test]
fn fully_scanned_window_has_no_frontier() {
    let mut cc = CompositeCbf::new(5e-4);
    cc.push(hand_cbf(vec![vec![-0.3, 0.0]], vec![1.0], 0.5, 0.01)).unwrap();
    cc.push(hand_cbf(vec![vec![0.3, 0.0]], vec![1.0], 0.5, 0.01)).unwrap();
    let sys = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
    let window = Bounds { min: [-0.6, -0.6], max: [0.6, 0.6] };
    let r = select_boundary_target(&cc, &sys, &[[-0.3, 0.0], [0.3, 0.0]], &[[0.0, 0.0]], &window, &ExplorationConfig::default());
    assert!(matches!(r, Err(Error::NoFrontier)));
    let empty = CompositeCbf::new(5e-4);
    assert!(matches!(select_boundary_target(&empty, &sys, &[], &[], &window, &ExplorationConfig::default()), Err(Error::EmptyComposite)));
}

#[test]
fn single_scan_budget_keeps_the_first_safe_set() {
    let (_, mut sc) = common::planar();
    sc.explore.max_scans = 1;
    let log = run_exploration(&sc, EXEC).unwrap();
    assert_eq!(log.cbfs().len(), 1);
    assert_eq!(log.stop, Some(StopReason::MaxScans));
    let cc = log.composite.as_ref().unwrap();
    for x in &log.trajectory.states {
        assert!(cc.eval_h(x).unwrap().0 >= -DRIFT_TOL);
    }
    assert!(log.is_safe());
}

#[test]
fn coverage_never_shrinks() {
    let (_, mut sc) = common::planar();
    sc.explore.max_scans = 3;
    let log = run_exploration(&sc, EXEC).unwrap();
    assert!(log.coverage.len() >= 2);
    assert!(log.coverage.windows(2).all(|w| w[1] >= w[0]), "{:?}", log.coverage);
    assert!(log.coverage[0] > 0.0);
    assert!(log.is_safe());
    let cc = log.composite.as_ref().unwrap();
    assert!(log.trajectory.states.iter().all(|x| cc.eval_h(x).unwrap().0 >= -1e-3));
}
