//! Control-affine models `x' = f(x) + g(x) u`, input sets and RK4 integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest state dimension supported by the built-in models.
pub const MAX_STATE: usize = 3;
/// Largest input dimension supported by the built-in models.
pub const MAX_INPUT: usize = 2;

pub type Drift = [f64; MAX_STATE];
pub type InputMatrix = [[f64; MAX_INPUT]; MAX_STATE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `|u_i| <= u_max` for every component.
    Inf,
    /// `||u||_2 <= u_max`.
    L2,
}

/// Norm-ball input constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSet {
    pub norm: InputNorm,
    pub u_max: f64,
}

impl InputSet {
    pub fn contains(&self, u: &[f64]) -> bool {
        let tol = 1e-12 * self.u_max.max(1.0);
        match self.norm {
            InputNorm::Inf => u.iter().all(|c| c.abs() <= self.u_max + tol),
            InputNorm::L2 => l2(u) <= self.u_max + tol,
        }
    }

    /// Projection onto the ball; identity for points already inside.
    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        match self.norm {
            InputNorm::Inf => u.iter().map(|c| c.clamp(-self.u_max, self.u_max)).collect(),
            InputNorm::L2 => {
                let n = l2(u);
                if n <= self.u_max {
                    u.to_vec()
                } else {
                    u.iter().map(|c| c * self.u_max / n).collect()
                }
            }
        }
    }

    /// Norm dual to the constraint norm (1-norm for the box, 2-norm for the disk).
    pub fn dual_norm(&self, v: &[f64]) -> f64 {
        match self.norm {
            InputNorm::Inf => v.iter().map(|c| c.abs()).sum(),
            InputNorm::L2 => l2(v),
        }
    }

    /// `argmax_{u in U} <c, u>`. Components with a zero coefficient are set to zero.
    pub fn support_point(&self, c: &[f64]) -> Vec<f64> {
        match self.norm {
            InputNorm::Inf => c
                .iter()
                .map(|&ci| {
                    if ci > 0.0 {
                        self.u_max
                    } else if ci < 0.0 {
                        -self.u_max
                    } else {
                        0.0
                    }
                })
                .collect(),
            InputNorm::L2 => {
                let n = l2(c);
                if n == 0.0 {
                    vec![0.0; c.len()]
                } else {
                    c.iter().map(|ci| self.u_max * ci / n).collect()
                }
            }
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    /// Fixed-speed Dubins car, state `(q1, q2, heading)`.
    Dubins { speed: f64 },
    /// Feedback-linearizable planar system `x_i' = x_i + (x_i^2 + delta) u_i`.
    Planar { delta: f64 },
    /// `x' = u` in the plane; used as a toy model for the oracle.
    SingleIntegrator,
}

/// A control-affine system together with its input constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAffineSystem {
    pub model: Model,
    pub input_set: InputSet,
}

impl ControlAffineSystem {
    pub fn dubins(speed: f64, u_max: f64) -> Self {
        assert!(speed > 0.0 && u_max > 0.0, "dubins parameters must be positive");
        ControlAffineSystem { model: Model::Dubins { speed }, input_set: InputSet { norm: InputNorm::Inf, u_max } }
    }

    pub fn planar(delta: f64, u_max: f64, norm: InputNorm) -> Self {
        assert!(delta > 0.0 && u_max > 0.0, "planar parameters must be positive");
        ControlAffineSystem { model: Model::Planar { delta }, input_set: InputSet { norm, u_max } }
    }

    pub fn single_integrator(u_max: f64, norm: InputNorm) -> Self {
        ControlAffineSystem { model: Model::SingleIntegrator, input_set: InputSet { norm, u_max } }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            Model::Dubins { .. } => 3,
            Model::Planar { .. } | Model::SingleIntegrator => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.model {
            Model::Dubins { .. } => 1,
            Model::Planar { .. } | Model::SingleIntegrator => 2,
        }
    }

    /// Number of leading coordinates observable by the sensor.
    pub fn observable_dim(&self) -> usize {
        2
    }

    /// Per-dimension flag marking periodic (angle) coordinates.
    pub fn angular_dims(&self) -> Vec<bool> {
        match self.model {
            Model::Dubins { .. } => vec![false, false, true],
            _ => vec![false; self.state_dim()],
        }
    }

    pub fn drift(&self, x: &[f64]) -> Drift {
        match self.model {
            Model::Dubins { speed } => [speed * x[2].cos(), speed * x[2].sin(), 0.0],
            Model::Planar { .. } => [x[0], x[1], 0.0],
            Model::SingleIntegrator => [0.0; MAX_STATE],
        }
    }

    pub fn input_matrix(&self, x: &[f64]) -> InputMatrix {
        let mut g = [[0.0; MAX_INPUT]; MAX_STATE];
        match self.model {
            Model::Dubins { .. } => g[2][0] = 1.0,
            Model::Planar { delta } => {
                g[0][0] = x[0] * x[0] + delta;
                g[1][1] = x[1] * x[1] + delta;
            }
            Model::SingleIntegrator => {
                g[0][0] = 1.0;
                g[1][1] = 1.0;
            }
        }
        g
    }

    /// `f(x) + g(x) u`.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> Drift {
        let mut xd = self.drift(x);
        let g = self.input_matrix(x);
        for (i, row) in g.iter().enumerate().take(self.state_dim()) {
            for (k, uk) in u.iter().enumerate() {
                xd[i] += row[k] * uk;
            }
        }
        xd
    }

    /// `g(x)^T v` for a state-space covector `v`.
    pub fn input_gain(&self, x: &[f64], v: &[f64]) -> [f64; MAX_INPUT] {
        let g = self.input_matrix(x);
        let mut out = [0.0; MAX_INPUT];
        for (k, o) in out.iter_mut().enumerate().take(self.input_dim()) {
            *o = (0..self.state_dim()).map(|i| g[i][k] * v[i]).sum();
        }
        out
    }

    /// Bound on `|f_i| + ||g_i|| u_max` for row `i` at `x`, used for dissipation coefficients.
    pub fn axis_speed_bound(&self, x: &[f64], i: usize) -> f64 {
        let f = self.drift(x);
        let g = self.input_matrix(x);
        let row = &g[i][..self.input_dim()];
        let gn = match self.input_set.norm {
            // dual pairing: sup_{|u|_inf <= 1} <g_i, u> = |g_i|_1
            InputNorm::Inf => row.iter().map(|c| c.abs()).sum::<f64>(),
            InputNorm::L2 => l2(row),
        };
        f[i].abs() + gn * self.input_set.u_max
    }

    pub fn clamp_to_input_set(&self, u: &[f64]) -> Vec<f64> {
        self.input_set.clamp(u)
    }

    /// Classical RK4 step with the control held constant over the step.
    pub fn rk4_step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        debug_assert!(dt > 0.0);
        if !self.input_set.contains(u) {
            log::warn!("rk4_step: control {u:?} outside the input set");
        }
        let n = self.state_dim();
        let k1 = self.vector_field(x, u);
        let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
        let k2 = self.vector_field(&x2, u);
        let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
        let k3 = self.vector_field(&x3, u);
        let x4: Vec<f64> = (0..n).map(|i| x[i] + dt * k3[i]).collect();
        let k4 = self.vector_field(&x4, u);
        let mut out: Vec<f64> = (0..n).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        for (v, ang) in out.iter_mut().zip(self.angular_dims()) {
            if ang {
                *v = wrap_angle(*v);
            }
        }
        Ok(out)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    // Fast path for differences of already-wrapped angles.
    if (-PI..PI).contains(&a) {
        return a;
    }
    if (PI..3.0 * PI).contains(&a) {
        let w = a - TAU;
        if w < PI {
            return w;
        }
    } else if (-3.0 * PI..-PI).contains(&a) {
        let w = a + TAU;
        if w >= -PI {
            return w;
        }
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Filter outcome recorded for every applied control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStatus {
    Filtered,
    ReferencePassed,
    FallbackSingleCbf,
    HoldSafe,
}

impl FilterStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterStatus::Filtered => "filtered",
            FilterStatus::ReferencePassed => "reference-passed",
            FilterStatus::FallbackSingleCbf => "fallback-single-cbf",
            FilterStatus::HoldSafe => "hold-safe",
        }
    }
}

/// A logged closed-loop rollout with fixed step `dt`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `controls[i]` is applied between `times[i]` and `times[i] + dt`.
    pub controls: Vec<Vec<f64>>,
    pub barrier: Vec<f64>,
    pub active: Vec<usize>,
    pub status: Vec<FilterStatus>,
}

impl Trajectory {
    pub fn new(dt: f64, x0: Vec<f64>, t0: f64) -> Self {
        Trajectory { dt, times: vec![t0], states: vec![x0], ..Default::default() }
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds its initial state")
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds its initial state")
    }

    /// Appends one step: the control applied at the current state and the resulting state.
    pub fn push(&mut self, u: Vec<f64>, barrier: f64, active: usize, status: FilterStatus, next: Vec<f64>) {
        let t = self.last_time() + self.dt;
        self.controls.push(u);
        self.barrier.push(barrier);
        self.active.push(active);
        self.status.push(status);
        self.states.push(next);
        self.times.push(t);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn dubins_fields() {
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        assert_eq!((sys.state_dim(), sys.input_dim(), sys.observable_dim()), (3, 1, 2));
        let f = sys.drift(&[0.0, 0.0, 0.0]);
        assert_eq!(f, [0.1, 0.0, 0.0]);
        let f = sys.drift(&[0.0, 0.0, FRAC_PI_2]);
        assert!(f[0].abs() < 1e-17 && (f[1] - 0.1).abs() < 1e-17 && f[2] == 0.0);
        let g = sys.input_matrix(&[3.0, -1.0, 2.0]);
        assert_eq!([g[0][0], g[1][0], g[2][0]], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn planar_fields() {
        let sys = ControlAffineSystem::planar(0.33, 1.0, InputNorm::Inf);
        assert_eq!(sys.drift(&[0.0, 0.0]), [0.0, 0.0, 0.0]);
        let g = sys.input_matrix(&[0.0, 0.0]);
        assert_eq!((g[0][0], g[1][1], g[0][1], g[1][0]), (0.33, 0.33, 0.0, 0.0));
        let g = sys.input_matrix(&[1.0, 0.0]);
        assert_eq!((g[0][0], g[1][1]), (1.33, 0.33));
        assert_eq!(sys.drift(&[1.0, 0.0]), [1.0, 0.0, 0.0]);
        assert_eq!(sys.vector_field(&[0.0, 0.0], &[0.0, 0.0]), [0.0; 3]);
    }

    #[test]
    fn rk4_static_and_straight_line() {
        let sys = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
        assert_eq!(sys.rk4_step(&[0.3, 0.4], &[0.0, 0.0], 0.1).unwrap(), vec![0.3, 0.4]);
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        let x = sys.rk4_step(&[0.0, 0.0, 0.0], &[0.0], 1.0).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15 && x[1] == 0.0 && x[2] == 0.0);
    }

    fn dubins_arc(x0: [f64; 3], v: f64, u: f64, t: f64) -> [f64; 3] {
        let th = x0[2] + u * t;
        [x0[0] + v / u * (th.sin() - x0[2].sin()), x0[1] - v / u * (th.cos() - x0[2].cos()), th]
    }

    fn arc_error(dt: f64, t_end: f64) -> f64 {
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        let x0 = [0.2, -0.3, 0.7];
        let mut x = x0.to_vec();
        let steps = (t_end / dt).round() as usize;
        for _ in 0..steps {
            x = sys.rk4_step(&x, &[0.3], dt).unwrap();
        }
        let e = dubins_arc(x0, 0.1, 0.3, t_end);
        ((x[0] - e[0]).powi(2) + (x[1] - e[1]).powi(2) + (wrap_angle(x[2] - e[2])).powi(2)).sqrt()
    }

    #[test]
    fn rk4_matches_closed_form_arc() {
        assert!(arc_error(0.01, 5.0) < 1e-8);
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Large steps so the error sits well above round-off.
        let e1 = arc_error(1.0, 20.0);
        let e2 = arc_error(0.5, 20.0);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn clamping() {
        let inf = InputSet { norm: InputNorm::Inf, u_max: 0.4 };
        assert_eq!(inf.clamp(&[0.2]), vec![0.2]);
        assert_eq!(inf.clamp(&[0.9]), vec![0.4]);
        let l2b = InputSet { norm: InputNorm::L2, u_max: 1.0 };
        let u = l2b.clamp(&[3.0, 4.0]);
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2b.clamp(&[0.3, 0.4]), vec![0.3, 0.4]);
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(PI) + PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }
}
