//! Composite barrier `H(x) = max_i h_i(x)` and the multi-constraint safety filter.
//!
//! The filter never forms a gradient of `H`. Every almost-active part contributes its own
//! derivative constraint `<grad h_i, f + g u> >= -kappa H(x)`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineSystem, FilterStatus, InputNorm, MAX_STATE};
use crate::environment::{point_segment_distance, Measurement, Point};
use crate::error::{Error, Result};
use crate::learning::LocalCbf;
use crate::qp::{solve_qp, QpOptions, SparseRows};

/// Below this value of `H` the state is treated as having left the safe set.
pub const DRIFT_TOL: f64 = 1e-6;

/// Facets of the polygon inscribed in a 2-norm input ball.
const BALL_FACETS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeCbf {
    pub parts: Vec<LocalCbf>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u: Vec<f64>,
    pub status: FilterStatus,
    /// Parts whose constraints entered the solve.
    pub active: Vec<usize>,
    pub argmax: usize,
    pub value: f64,
    /// Constraint residuals `<grad h_i, f + g u> + kappa H` at the returned input, one per
    /// index in `active`.
    pub residuals: Vec<f64>,
    /// False when no admissible input met the constraints.
    pub feasible: bool,
}

impl FilterResult {
    pub fn min_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl CompositeCbf {
    pub fn new(eps: f64) -> Self {
        CompositeCbf { parts: Vec::new(), eps }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Adds a part after checking its decay buffer.
    pub fn push(&mut self, part: LocalCbf) -> Result<()> {
        let v = part.decay_buffer_violations();
        if !v.is_empty() {
            return Err(Error::DecayBufferViolation { violations: v.len() });
        }
        self.parts.push(part);
        Ok(())
    }

    /// `H(x)` and the lowest index attaining it.
    pub fn eval_h(&self, x: &[f64]) -> Result<(f64, usize)> {
        if self.parts.is_empty() {
            return Err(Error::EmptyComposite);
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in self.parts.iter().enumerate() {
            let v = p.value(x);
            if v > best.0 {
                best = (v, i);
            }
        }
        Ok(best)
    }

    /// `I_eps(x) = { i : |h_i(x) - H(x)| <= eps }`, in index order.
    pub fn almost_active(&self, x: &[f64]) -> Result<Vec<usize>> {
        let values: Vec<f64> = self.parts.iter().map(|p| p.value(x)).collect();
        let (h, _) = self.eval_h(x)?;
        Ok(values.iter().enumerate().filter(|(_, v)| (h - **v).abs() <= self.eps).map(|(i, _)| i).collect())
    }

    /// Minimally modifies `u_ref` so that every almost-active part satisfies its derivative
    /// constraint, falling back to the argmax part alone and then to a best-effort input.
    pub fn safety_filter(&self, sys: &ControlAffineSystem, x: &[f64], u_ref: &[f64], kappa: f64) -> Result<FilterResult> {
        if x.iter().chain(u_ref).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let values: Vec<(f64, [f64; MAX_STATE])> = self.parts.iter().map(|p| p.value_and_gradient(x)).collect();
        let (h, argmax) = self.eval_h(x)?;
        if h < -DRIFT_TOL {
            log::debug!("filter queried outside the safe set (H = {h:.3e}); steering back");
            return Ok(best_effort(sys, x, u_ref, kappa, h, argmax, &values[argmax].1));
        }
        let active: Vec<usize> = values.iter().enumerate().filter(|(_, (v, _))| (h - v).abs() <= self.eps).map(|(i, _)| i).collect();
        let grads: Vec<[f64; MAX_STATE]> = active.iter().map(|&i| values[i].1).collect();
        if let Some(r) = filter_qp(sys, x, u_ref, kappa, h, &grads) {
            let status = if r.1 { FilterStatus::ReferencePassed } else { FilterStatus::Filtered };
            return Ok(FilterResult { u: r.0, status, active, argmax, value: h, residuals: r.2, feasible: true });
        }
        Ok(self.fallback_hold(sys, x, u_ref, kappa, h, argmax, &values[argmax].1))
    }

    /// Retries with only the argmax part's constraint, then gives up to a best-effort input.
    #[allow(clippy::too_many_arguments)]
    pub fn fallback_hold(
        &self,
        sys: &ControlAffineSystem,
        x: &[f64],
        u_ref: &[f64],
        kappa: f64,
        h: f64,
        argmax: usize,
        grad: &[f64; MAX_STATE],
    ) -> FilterResult {
        if let Some(r) = filter_qp(sys, x, u_ref, kappa, h, std::slice::from_ref(grad)) {
            return FilterResult {
                u: r.0,
                status: FilterStatus::FallbackSingleCbf,
                active: vec![argmax],
                argmax,
                value: h,
                residuals: r.2,
                feasible: true,
            };
        }
        log::debug!("part {argmax} admits no input meeting its own constraint at {x:?}");
        best_effort(sys, x, u_ref, kappa, h, argmax, grad)
    }
}

/// `(a, c)` with `a^T u >= c` equivalent to `<grad, f + g u> >= -kappa h`.
fn constraint(sys: &ControlAffineSystem, x: &[f64], grad: &[f64], kappa: f64, h: f64) -> (Vec<f64>, f64) {
    let dim = sys.state_dim();
    let f = sys.drift(x);
    let drift: f64 = (0..dim).map(|k| grad[k] * f[k]).sum();
    let a = sys.input_gain(x, &grad[..dim]);
    (a[..sys.input_dim()].to_vec(), -kappa * h - drift)
}

fn input_rows(sys: &ControlAffineSystem, rows: &mut SparseRows) {
    let m = sys.input_dim();
    let umax = sys.input_set.u_max;
    match sys.input_set.norm {
        InputNorm::Inf => {
            for k in 0..m {
                rows.push([(k, 1.0)], -umax, u32::MAX);
                rows.push([(k, -1.0)], -umax, u32::MAX);
            }
        }
        InputNorm::L2 => {
            if m == 1 {
                rows.push([(0, 1.0)], -umax, u32::MAX);
                rows.push([(0, -1.0)], -umax, u32::MAX);
            } else {
                // Inscribed polygon: every feasible point lies inside the ball.
                let r = umax * (std::f64::consts::PI / BALL_FACETS as f64).cos();
                for j in 0..BALL_FACETS {
                    let a = std::f64::consts::TAU * (j as f64 + 0.5) / BALL_FACETS as f64;
                    rows.push([(0, -a.cos()), (1, -a.sin())], -r, u32::MAX);
                }
            }
        }
    }
}

/// Solves `min ||u - u_ref||^2` over the input set and the given constraints.
/// Returns the input, whether `u_ref` itself was optimal, and per-constraint residuals.
fn filter_qp(
    sys: &ControlAffineSystem,
    x: &[f64],
    u_ref: &[f64],
    kappa: f64,
    h: f64,
    grads: &[[f64; MAX_STATE]],
) -> Option<(Vec<f64>, bool, Vec<f64>)> {
    let m = sys.input_dim();
    let cons: Vec<(Vec<f64>, f64)> = grads.iter().map(|g| constraint(sys, x, g, kappa, h)).collect();
    let residual = |u: &[f64]| -> Vec<f64> { cons.iter().map(|(a, c)| a.iter().zip(u).map(|(ai, ui)| ai * ui).sum::<f64>() - c).collect() };
    if sys.input_set.contains(u_ref) {
        let r = residual(u_ref);
        if r.iter().all(|&v| v >= 0.0) {
            return Some((u_ref.to_vec(), true, r));
        }
    }
    let mut rows = SparseRows::new();
    for (a, c) in &cons {
        rows.push(a.iter().copied().enumerate(), *c, 0);
    }
    input_rows(sys, &mut rows);
    let c: Vec<f64> = u_ref.iter().map(|v| -v).collect();
    let sol = solve_qp(m, c, rows, QpOptions::default()).ok()?;
    // The polygon keeps the solution in the ball; clamp only trims round-off.
    let u = sys.input_set.clamp(&sol.x);
    let r = residual(&u);
    Some((u, false, r))
}

/// `argmax_u <grad h, f + g u>`; input components with no influence keep the (clamped)
/// reference value.
fn best_effort(
    sys: &ControlAffineSystem,
    x: &[f64],
    u_ref: &[f64],
    kappa: f64,
    h: f64,
    argmax: usize,
    grad: &[f64; MAX_STATE],
) -> FilterResult {
    let m = sys.input_dim();
    let (a, c) = constraint(sys, x, grad, kappa, h);
    let mut u = sys.input_set.support_point(&a);
    let uref = sys.input_set.clamp(u_ref);
    if sys.input_set.norm == InputNorm::Inf {
        for k in 0..m {
            if a[k] == 0.0 {
                u[k] = uref[k];
            }
        }
    } else if a.iter().all(|&v| v == 0.0) {
        u = uref;
    }
    let r = a.iter().zip(&u).map(|(ai, ui)| ai * ui).sum::<f64>() - c;
    FilterResult { u, status: FilterStatus::HoldSafe, active: vec![argmax], argmax, value: h, residuals: vec![r], feasible: false }
}

/// Scan-derived signed distance `l(q)` used as a naive barrier: distance to blocked ray
/// segments and the scan circle inside the observed free region, negative outside it.
#[derive(Debug, Clone)]
pub struct ScanSdf {
    scans: Vec<Measurement>,
    segments: Vec<Vec<(Point, Point)>>,
}

impl ScanSdf {
    pub fn new(scans: Vec<Measurement>) -> Self {
        let segments = scans.iter().map(|m| m.blocked_segments()).collect();
        ScanSdf { scans, segments }
    }

    pub fn value(&self, q: Point) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for (m, segs) in self.scans.iter().zip(&self.segments) {
            let c = m.center_q();
            let v = if m.contains_safe(q) {
                let rho = (q[0] - c[0]).hypot(q[1] - c[1]);
                segs.iter().map(|&(a, b)| point_segment_distance(q, a, b)).fold(m.scan_radius - rho, f64::min)
            } else {
                -m.safe_depth(q).abs().max(1e-9)
            };
            best = best.max(v);
        }
        best
    }

    /// Central-difference gradient in `q`, zero along unobserved coordinates.
    pub fn gradient(&self, q: Point) -> [f64; MAX_STATE] {
        let h = 1e-5;
        let mut g = [0.0; MAX_STATE];
        for k in 0..2 {
            let mut a = q;
            let mut b = q;
            a[k] += h;
            b[k] -= h;
            g[k] = (self.value(a) - self.value(b)) / (2.0 * h);
        }
        g
    }
}

/// The filter QP with the scan SDF in place of a learned barrier. When no input can satisfy
/// the constraint the reference passes through unchanged and the result is flagged infeasible.
pub fn sdf_baseline_filter(sdf: &ScanSdf, sys: &ControlAffineSystem, x: &[f64], u_ref: &[f64], kappa: f64) -> Result<FilterResult> {
    if x.iter().chain(u_ref).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let q = [x[0], x[1]];
    let l = sdf.value(q);
    let g = sdf.gradient(q);
    match filter_qp(sys, x, u_ref, kappa, l, &[g]) {
        Some((u, passed, residuals)) => Ok(FilterResult {
            u,
            status: if passed { FilterStatus::ReferencePassed } else { FilterStatus::Filtered },
            active: vec![0],
            argmax: 0,
            value: l,
            residuals,
            feasible: true,
        }),
        None => {
            log::debug!("distance barrier cannot be enforced at {x:?} (l = {l:.3})");
            let u = sys.input_set.clamp(u_ref);
            let (a, c) = constraint(sys, x, &g, kappa, l);
            let r = a.iter().zip(&u).map(|(ai, ui)| ai * ui).sum::<f64>() - c;
            Ok(FilterResult {
                u,
                status: FilterStatus::ReferencePassed,
                active: vec![0],
                argmax: 0,
                value: l,
                residuals: vec![r],
                feasible: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::CsRbfBasis;
    use crate::learning::{FitStats, ValidityDomain};

    fn footprint(c: [f64; 2], r: f64) -> Measurement {
        Measurement {
            scan_center: c.to_vec(),
            scan_radius: r,
            ranges: vec![r; 8],
            safe_points: vec![],
            unsafe_points: vec![],
            occluded_points: vec![],
            boundary_points: vec![],
        }
    }

    /// One-center planar part `w phi(x - c) - b`.
    fn bump(c: [f64; 2], w: f64) -> LocalCbf {
        let basis = CsRbfBasis::new(vec![c.to_vec()], 1.0, vec![false, false]).unwrap();
        let domain = ValidityDomain::hull(&basis, 1.0);
        LocalCbf {
            basis,
            weights: vec![w],
            bias: 0.01,
            domain,
            scan_index: 0,
            scan: footprint(c, 1.0),
            scan_hash: String::new(),
            stats: FitStats::default(),
        }
    }

    #[test]
    fn max_and_tie_break() {
        let mut cc = CompositeCbf::new(1e-3);
        assert!(matches!(cc.eval_h(&[0.0, 0.0]), Err(Error::EmptyComposite)));
        cc.push(bump([0.0, 0.0], 1.0)).unwrap();
        let p0 = cc.parts[0].value(&[0.1, 0.0]);
        assert_eq!(cc.eval_h(&[0.1, 0.0]).unwrap(), (p0, 0));
        cc.push(bump([0.0, 0.0], 1.0)).unwrap();
        assert_eq!(cc.eval_h(&[0.1, 0.0]).unwrap().1, 0);
        cc.push(bump([5.0, 0.0], 1.0)).unwrap();
        assert_eq!(cc.eval_h(&[5.0, 0.1]).unwrap().1, 2);
        assert_eq!(cc.eval_h(&[20.0, 20.0]).unwrap().0, -0.01);
    }

    #[test]
    fn almost_active_limits() {
        let mut cc = CompositeCbf::new(f64::INFINITY);
        cc.push(bump([0.0, 0.0], 1.0)).unwrap();
        cc.push(bump([0.5, 0.0], 1.0)).unwrap();
        cc.push(bump([5.0, 0.0], 1.0)).unwrap();
        assert_eq!(cc.almost_active(&[0.2, 0.0]).unwrap(), vec![0, 1, 2]);
        cc.eps = 0.0;
        assert_eq!(cc.almost_active(&[0.25, 0.0]).unwrap(), vec![0, 1]);
        assert_eq!(cc.almost_active(&[0.1, 0.0]).unwrap(), vec![0]);
    }

    #[test]
    fn reference_passes_when_feasible() {
        let mut cc = CompositeCbf::new(1e-3);
        cc.push(bump([0.0, 0.0], 1.0)).unwrap();
        let sys = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
        // Moving toward the center increases h.
        let r = cc.safety_filter(&sys, &[0.2, 0.0], &[-0.5, 0.0], 1.0).unwrap();
        assert_eq!(r.status, FilterStatus::ReferencePassed);
        assert_eq!(r.u, vec![-0.5, 0.0]);
    }

    #[test]
    fn halfspace_projection() {
        let mut cc = CompositeCbf::new(1e-3);
        cc.push(bump([0.0, 0.0], 1.0)).unwrap();
        let sys = ControlAffineSystem::single_integrator(10.0, InputNorm::Inf);
        let x = [0.3, 0.1];
        let u_ref = [2.0, 1.0];
        let r = cc.safety_filter(&sys, &x, &u_ref, 1.0).unwrap();
        assert_eq!(r.status, FilterStatus::Filtered);
        let (h, g) = cc.parts[0].value_and_gradient(&x);
        let (a, c) = ([g[0], g[1]], -h);
        let s = (c - a[0] * u_ref[0] - a[1] * u_ref[1]) / (a[0] * a[0] + a[1] * a[1]);
        let expect = [u_ref[0] + a[0] * s, u_ref[1] + a[1] * s];
        assert!((r.u[0] - expect[0]).abs() < 1e-9 && (r.u[1] - expect[1]).abs() < 1e-9);
        assert!(r.min_residual() >= -1e-9);
    }

    #[test]
    fn conflicting_constraints_fall_back() {
        // Two parts with opposing gradients at x and an input bound too small for both.
        let mut cc = CompositeCbf::new(1.0);
        cc.push(bump([-0.5, 0.0], 1.0)).unwrap();
        cc.push(bump([0.5, 0.0], 1.0)).unwrap();
        let sys = ControlAffineSystem::planar(0.33, 1e-3, InputNorm::Inf);
        let x = [0.0, 0.4];
        let r = cc.safety_filter(&sys, &x, &[0.0, 0.0], 50.0).unwrap();
        assert_ne!(r.status, FilterStatus::Filtered);
        assert!(sys.input_set.contains(&r.u));
    }

    #[test]
    fn dubins_sdf_gradient_is_blind_to_heading() {
        let sdf = ScanSdf::new(vec![footprint([0.0, 0.0], 1.0)]);
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        // Heading straight at the scan edge from close by: u cannot help.
        let x = [0.95, 0.0, 0.0];
        let r = sdf_baseline_filter(&sdf, &sys, &x, &[0.1], 1.0).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.u, vec![0.1]);
        let x = [0.0, 0.0, 0.0];
        let r = sdf_baseline_filter(&sdf, &sys, &x, &[0.1], 1.0).unwrap();
        assert_eq!(r.status, FilterStatus::ReferencePassed);
    }
}
