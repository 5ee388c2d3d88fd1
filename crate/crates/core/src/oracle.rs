//! Grid Hamilton-Jacobi safety oracle.
//!
//! The avoid value `V` over a local box around a scan solves
//! `min(l(x) - V, dV/dtau - min(0, H(x, grad V))) = 0` with
//! `H(x, p) = <p, f(x)> + u_max ||g(x)^T p||_*`, time-marched with a Lax-Friedrichs numerical
//! Hamiltonian from `V = l`. Every sweep is a Jacobi update over all nodes, so nodes are
//! evaluated in parallel against the previous iterate.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, ControlAffineSystem, MAX_STATE};
use crate::environment::{point_segment_distance, Measurement, Point};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Periodic axes cover `[min, max)` and wrap; others include both end points.
    pub periodic: bool,
}

impl Axis {
    pub fn step(&self) -> f64 {
        if self.periodic {
            (self.max - self.min) / self.count as f64
        } else {
            (self.max - self.min) / (self.count - 1) as f64
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }
}

/// Oracle tuning knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Node count per state dimension; empty means the per-system default.
    #[serde(default)]
    pub grid_counts: Vec<usize>,
    /// Extra margin around the scan box on the observable axes.
    #[serde(default = "default_padding")]
    pub padding: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Lattice step for harvested positions.
    #[serde(default = "default_harvest_spacing")]
    pub harvest_spacing: f64,
    /// Heading samples per harvested position (ignored when every coordinate is observable).
    #[serde(default = "default_theta_samples")]
    pub theta_samples: usize,
}

fn default_padding() -> f64 {
    0.1
}
fn default_horizon() -> f64 {
    20.0
}
fn default_tol() -> f64 {
    1e-4
}
fn default_cfl() -> f64 {
    0.8
}
fn default_margin() -> f64 {
    0.02
}
fn default_harvest_spacing() -> f64 {
    0.1
}
fn default_theta_samples() -> usize {
    16
}

impl OracleConfig {
    /// Fills an empty `grid_counts` with the default for `sys`.
    pub fn resolved(mut self, sys: &ControlAffineSystem) -> Self {
        if self.grid_counts.is_empty() {
            self.grid_counts = Self::for_system(sys).grid_counts;
        }
        self
    }

    pub fn for_system(sys: &ControlAffineSystem) -> Self {
        let grid_counts = if sys.state_dim() == 3 { vec![41, 41, 41] } else { vec![81, 81] };
        OracleConfig {
            grid_counts,
            padding: default_padding(),
            horizon: default_horizon(),
            tolerance: default_tol(),
            cfl: default_cfl(),
            margin: default_margin(),
            harvest_spacing: default_harvest_spacing(),
            theta_samples: default_theta_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub iterations: usize,
    pub time_marched: f64,
    pub last_update: f64,
    pub converged: bool,
    /// Accumulated sup-norm of the dissipative part of the update; a rough bound on how far
    /// the numerical viscosity can have moved any value.
    pub dissipation_bound: f64,
}

/// Gridded value function with multilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub axes: Vec<Axis>,
    /// Row-major values, last axis fastest.
    pub values: Vec<f64>,
    pub info: SolveInfo,
}

pub fn grid_for_scan(meas: &Measurement, sys: &ControlAffineSystem, cfg: &OracleConfig) -> Result<Vec<Axis>> {
    use std::f64::consts::PI;
    let dim = sys.state_dim();
    if cfg.grid_counts.len() != dim {
        return Err(Error::DimensionMismatch(format!("grid_counts has {} entries for a {dim}-d state", cfg.grid_counts.len())));
    }
    if cfg.grid_counts.iter().any(|&c| c < 3) {
        return Err(Error::Config("oracle.grid_counts: every axis needs at least 3 nodes".into()));
    }
    let half = meas.scan_radius + cfg.padding;
    let ang = sys.angular_dims();
    Ok((0..dim)
        .map(|k| {
            if ang[k] {
                Axis { min: -PI, max: PI, count: cfg.grid_counts[k], periodic: true }
            } else {
                let c = meas.scan_center[k];
                Axis { min: c - half, max: c + half, count: cfg.grid_counts[k], periodic: false }
            }
        })
        .collect())
}

fn strides(axes: &[Axis]) -> Vec<usize> {
    let mut s = vec![1; axes.len()];
    for k in (0..axes.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * axes[k + 1].count;
    }
    s
}

fn total(axes: &[Axis]) -> usize {
    axes.iter().map(|a| a.count).product()
}

fn unravel(mut idx: usize, axes: &[Axis]) -> [usize; MAX_STATE] {
    let mut out = [0; MAX_STATE];
    for k in (0..axes.len()).rev() {
        out[k] = idx % axes[k].count;
        idx /= axes[k].count;
    }
    out
}

fn node_state(idx: &[usize], axes: &[Axis]) -> [f64; MAX_STATE] {
    let mut x = [0.0; MAX_STATE];
    for k in 0..axes.len() {
        x[k] = axes[k].node(idx[k]);
    }
    x
}

/// Terminal cost: signed distance (in `q`) to the complement of the observed free region,
/// positive inside it and constant along unobserved coordinates.
pub fn build_terminal_cost(meas: &Measurement, axes: &[Axis], exec: Execution) -> Result<Vec<f64>> {
    if meas.safe_points.len() < 3 {
        return Err(Error::DegenerateScan { safe_points: meas.safe_points.len() });
    }
    let segments = meas.blocked_segments();
    let c = meas.center_q();
    let r = meas.scan_radius;
    let (nx, ny) = (axes[0].count, axes[1].count);
    let plane: Vec<f64> = par::map_range(exec, nx * ny, |i| {
        let q: Point = [axes[0].node(i / ny), axes[1].node(i % ny)];
        terminal_cost_at(meas, &segments, c, r, q)
    });
    let rest: usize = axes[2..].iter().map(|a| a.count).product();
    let mut out = Vec::with_capacity(plane.len() * rest);
    for v in plane {
        out.extend(std::iter::repeat_n(v, rest));
    }
    Ok(out)
}

fn terminal_cost_at(meas: &Measurement, segments: &[(Point, Point)], c: Point, r: f64, q: Point) -> f64 {
    if meas.contains_safe(q) {
        let rho = (q[0] - c[0]).hypot(q[1] - c[1]);
        segments.iter().map(|&(a, b)| point_segment_distance(q, a, b)).fold(r - rho, f64::min)
    } else {
        let d = meas.safe_points.iter().map(|p| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min);
        -d.max(1e-9)
    }
}

/// Solves the avoid problem over `axes` starting from the terminal cost `l`.
pub fn solve_avoid_value(l: &[f64], sys: &ControlAffineSystem, axes: &[Axis], cfg: &OracleConfig, exec: Execution) -> Result<ValueGrid> {
    let dim = axes.len();
    let n = total(axes);
    if l.len() != n || dim != sys.state_dim() {
        return Err(Error::DimensionMismatch("terminal cost does not match the grid".into()));
    }
    let st = strides(axes);
    let h: Vec<f64> = axes.iter().map(|a| a.step()).collect();
    // Lax-Friedrichs coefficients: per-axis bounds on |f_i| + ||g_i|| u_max over the grid.
    let mut alpha = vec![0.0f64; dim];
    for idx in 0..n {
        let x = node_state(&unravel(idx, axes), axes);
        for (k, a) in alpha.iter_mut().enumerate() {
            *a = a.max(sys.axis_speed_bound(&x[..dim], k));
        }
    }
    let rate: f64 = (0..dim).map(|k| alpha[k] / h[k]).sum();
    let dt = if rate > 0.0 { cfg.cfl / rate } else { cfg.horizon };
    let mut v = l.to_vec();
    let mut next = vec![0.0; n];
    let mut info = SolveInfo { iterations: 0, time_marched: 0.0, last_update: f64::INFINITY, converged: false, dissipation_bound: 0.0 };
    // Precompute node states and input matrices once; they do not change between sweeps.
    let states: Vec<[f64; MAX_STATE]> = par::map_range(exec, n, |idx| node_state(&unravel(idx, axes), axes));
    while info.time_marched < cfg.horizon {
        let step = dt.min(cfg.horizon - info.time_marched);
        let prev = &v;
        let updates: Vec<(f64, f64)> = par::map_range(exec, n, |idx| {
            let ii = unravel(idx, axes);
            let x = &states[idx][..dim];
            let mut p = [0.0; MAX_STATE];
            let mut diss = 0.0;
            for k in 0..dim {
                let cnt = axes[k].count;
                let i = ii[k];
                let (lo, hi) = if axes[k].periodic {
                    let im = (i + cnt - 1) % cnt;
                    let ip = (i + 1) % cnt;
                    (idx - i * st[k] + im * st[k], idx - i * st[k] + ip * st[k])
                } else {
                    (if i > 0 { idx - st[k] } else { idx }, if i + 1 < cnt { idx + st[k] } else { idx })
                };
                let vm = prev[idx] - prev[lo];
                let vp = prev[hi] - prev[idx];
                let (mut dm, mut dp) = (vm / h[k], vp / h[k]);
                if !axes[k].periodic {
                    if i == 0 {
                        dm = dp;
                    } else if i + 1 == cnt {
                        dp = dm;
                    }
                }
                p[k] = 0.5 * (dm + dp);
                diss += 0.5 * alpha[k] * (dp - dm);
            }
            let ham = hamiltonian(sys, x, &p[..dim]) + diss;
            let delta = step * ham.min(0.0);
            (prev[idx] + delta, step * diss.abs())
        });
        let mut upd: f64 = 0.0;
        let mut dmax: f64 = 0.0;
        for (i, (val, d)) in updates.into_iter().enumerate() {
            upd = upd.max((val - v[i]).abs());
            dmax = dmax.max(d);
            next[i] = val;
        }
        std::mem::swap(&mut v, &mut next);
        info.iterations += 1;
        info.time_marched += step;
        info.last_update = upd;
        info.dissipation_bound += dmax;
        if upd < cfg.tolerance {
            info.converged = true;
            break;
        }
    }
    if !info.converged {
        log::warn!(
            "avoid value not converged over a horizon of {:.2} (last update {:.2e}); using the conservative iterate",
            info.time_marched,
            info.last_update
        );
    }
    Ok(ValueGrid { axes: axes.to_vec(), values: v, info })
}

/// `H(x, p) = <p, f(x)> + u_max ||g(x)^T p||_*`, the maximum of `<p, f + g u>` over the input set.
pub fn hamiltonian(sys: &ControlAffineSystem, x: &[f64], p: &[f64]) -> f64 {
    let f = sys.drift(x);
    let gp = sys.input_gain(x, p);
    let drift: f64 = (0..sys.state_dim()).map(|k| p[k] * f[k]).sum();
    drift + sys.input_set.u_max * sys.input_set.dual_norm(&gp[..sys.input_dim()])
}

impl ValueGrid {
    fn strides(&self) -> Vec<usize> {
        strides(&self.axes)
    }

    /// Lower corner index and fractional offset along each axis, or `None` outside the grid.
    fn locate(&self, x: &[f64]) -> Option<([usize; MAX_STATE], [f64; MAX_STATE])> {
        let mut base = [0; MAX_STATE];
        let mut frac = [0.0; MAX_STATE];
        for (k, a) in self.axes.iter().enumerate() {
            let h = a.step();
            if a.periodic {
                let span = a.max - a.min;
                let mut s = ((x[k] - a.min).rem_euclid(span)) / h;
                if s >= a.count as f64 {
                    s -= a.count as f64;
                }
                let i = (s.floor() as usize).min(a.count - 1);
                base[k] = i;
                frac[k] = s - i as f64;
            } else {
                let s = (x[k] - a.min) / h;
                if !(s >= -1e-12 && s <= (a.count - 1) as f64 + 1e-12) {
                    return None;
                }
                let i = (s.floor().max(0.0) as usize).min(a.count - 2);
                base[k] = i;
                frac[k] = (s - i as f64).clamp(0.0, 1.0);
            }
        }
        Some((base, frac))
    }

    fn neighbor(&self, i: usize, k: usize, offset: isize) -> Option<usize> {
        let a = &self.axes[k];
        let j = i as isize + offset;
        if a.periodic {
            Some(j.rem_euclid(a.count as isize) as usize)
        } else if j < 0 || j >= a.count as isize {
            None
        } else {
            Some(j as usize)
        }
    }

    fn interp_with<F: Fn(&[usize]) -> f64>(&self, x: &[f64], f: F) -> Result<f64> {
        let (base, frac) = self.locate(x).ok_or(Error::OutOfGrid)?;
        let dim = self.axes.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_STATE];
            for k in 0..dim {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx[k] = self.neighbor(base[k], k, bit as isize).unwrap_or(base[k]);
            }
            if w != 0.0 {
                acc += w * f(&idx[..dim]);
            }
        }
        Ok(acc)
    }

    fn at(&self, idx: &[usize]) -> f64 {
        let st = self.strides();
        self.values[idx.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.interp_with(x, |idx| self.at(idx))
    }

    /// Central-difference gradient at a node (one-sided on non-periodic edges).
    pub fn node_gradient(&self, idx: &[usize]) -> [f64; MAX_STATE] {
        let mut g = [0.0; MAX_STATE];
        let mut tmp = [0usize; MAX_STATE];
        tmp[..idx.len()].copy_from_slice(idx);
        for k in 0..self.axes.len() {
            let h = self.axes[k].step();
            let (lo, span_lo) = match self.neighbor(idx[k], k, -1) {
                Some(j) => (j, 1.0),
                None => (idx[k], 0.0),
            };
            let (hi, span_hi) = match self.neighbor(idx[k], k, 1) {
                Some(j) => (j, 1.0),
                None => (idx[k], 0.0),
            };
            tmp[k] = hi;
            let vh = self.at(&tmp[..idx.len()]);
            tmp[k] = lo;
            let vl = self.at(&tmp[..idx.len()]);
            tmp[k] = idx[k];
            g[k] = (vh - vl) / ((span_lo + span_hi) * h);
        }
        g
    }

    /// Gradient by central differences at the nodes, multilinearly interpolated.
    pub fn gradient(&self, x: &[f64]) -> Result<[f64; MAX_STATE]> {
        let mut g = [0.0; MAX_STATE];
        for (k, gk) in g.iter_mut().enumerate().take(self.axes.len()) {
            *gk = self.interp_with(x, |idx| self.node_gradient(idx)[k])?;
        }
        Ok(g)
    }

    /// Writes the grid as a binary cache file: magic, axes, then row-major little-endian f64s.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.values.len() * 8);
        buf.extend_from_slice(b"VGRD");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.axes.len() as u32).to_le_bytes());
        for a in &self.axes {
            buf.extend_from_slice(&a.min.to_le_bytes());
            buf.extend_from_slice(&a.max.to_le_bytes());
            buf.extend_from_slice(&(a.count as u64).to_le_bytes());
            buf.push(a.periodic as u8);
        }
        buf.extend_from_slice(&(self.info.iterations as u64).to_le_bytes());
        buf.extend_from_slice(&self.info.time_marched.to_le_bytes());
        buf.extend_from_slice(&self.info.last_update.to_le_bytes());
        buf.push(self.info.converged as u8);
        buf.extend_from_slice(&self.info.dissipation_bound.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != b"VGRD" {
            return Err(Error::Artifact("value grid cache: bad magic".into()));
        }
        if cur.u32()? != 1 {
            return Err(Error::Artifact("value grid cache: unsupported version".into()));
        }
        let dim = cur.u32()? as usize;
        if dim == 0 || dim > MAX_STATE {
            return Err(Error::Artifact("value grid cache: bad dimension".into()));
        }
        let mut axes = Vec::with_capacity(dim);
        for _ in 0..dim {
            axes.push(Axis { min: cur.f64()?, max: cur.f64()?, count: cur.u64()? as usize, periodic: cur.take(1)?[0] != 0 });
        }
        let info = SolveInfo {
            iterations: cur.u64()? as usize,
            time_marched: cur.f64()?,
            last_update: cur.f64()?,
            converged: cur.take(1)?[0] != 0,
            dissipation_bound: cur.f64()?,
        };
        let n = total(&axes);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(cur.f64()?);
        }
        if cur.pos != buf.len() {
            return Err(Error::Artifact("value grid cache: trailing bytes".into()));
        }
        Ok(ValueGrid { axes, values, info })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Artifact("value grid cache: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `argmax_{u in U} <grad V(x), f(x) + g(x) u>`.
pub fn extract_policy(vg: &ValueGrid, sys: &ControlAffineSystem, x: &[f64]) -> Result<Vec<f64>> {
    let grad = vg.gradient(x)?;
    let gp = sys.input_gain(x, &grad[..sys.state_dim()]);
    Ok(sys.input_set.support_point(&gp[..sys.input_dim()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePair {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub value: f64,
    /// Harvest lattice index `(i, j, heading sample)`.
    pub cell: [i64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub pairs: Vec<OraclePair>,
    pub margin: f64,
    /// Harvest-lattice states inside the observed free region with `V <= 0`: no admissible
    /// input keeps them clear of the unsafe set.
    #[serde(default)]
    pub doomed: Vec<Vec<f64>>,
}

impl OracleOutput {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Harvest safe state-action pairs: positions on a lattice inside the observed free region,
/// crossed with evenly spaced headings when the state has unobserved angular coordinates.
pub fn harvest_pairs(
    vg: &ValueGrid,
    sys: &ControlAffineSystem,
    meas: &Measurement,
    cfg: &OracleConfig,
    exec: Execution,
) -> Result<OracleOutput> {
    harvest_with_margin(vg, sys, meas, cfg, cfg.margin, exec)
}

pub fn harvest_with_margin(
    vg: &ValueGrid,
    sys: &ControlAffineSystem,
    meas: &Measurement,
    cfg: &OracleConfig,
    margin: f64,
    exec: Execution,
) -> Result<OracleOutput> {
    use std::f64::consts::{PI, TAU};
    assert!(margin > 0.0, "harvest margin must be positive");
    let c = meas.center_q();
    let r = meas.scan_radius;
    let hs = cfg.harvest_spacing;
    let k = (r / hs).floor() as i64;
    let mut cells = Vec::new();
    for i in -k..=k {
        for j in -k..=k {
            let q = [c[0] + i as f64 * hs, c[1] + j as f64 * hs];
            if meas.contains_safe(q) {
                cells.push((i, j, q));
            }
        }
    }
    let dim = sys.state_dim();
    let headings: Vec<f64> =
        if dim > 2 { (0..cfg.theta_samples).map(|t| -PI + TAU * t as f64 / cfg.theta_samples as f64).collect() } else { vec![0.0] };
    type CellHarvest = Result<(Vec<OraclePair>, Vec<Vec<f64>>)>;
    let per_cell: Vec<CellHarvest> = par::map_slice(exec, &cells, |&(i, j, q)| {
        let mut out = Vec::new();
        let mut doomed = Vec::new();
        for (t, &th) in headings.iter().enumerate() {
            let mut x = vec![q[0], q[1]];
            if dim > 2 {
                x.push(wrap_angle(th));
            }
            let value = match vg.value(&x) {
                Ok(v) => v,
                Err(Error::OutOfGrid) => continue,
                Err(e) => return Err(e),
            };
            if value >= margin {
                let u = extract_policy(vg, sys, &x)?;
                out.push(OraclePair { x, u, value, cell: [i, j, t as i64] });
            } else if value <= 0.0 {
                doomed.push(x);
            }
        }
        Ok((out, doomed))
    });
    let mut pairs = Vec::new();
    let mut doomed = Vec::new();
    for r in per_cell {
        let (p, d) = r?;
        pairs.extend(p);
        doomed.extend(d);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyOracleOutput { margin });
    }
    Ok(OracleOutput { pairs, margin, doomed })
}

/// Full oracle pass for one measurement.
pub fn run_oracle(meas: &Measurement, sys: &ControlAffineSystem, cfg: &OracleConfig, exec: Execution) -> Result<(ValueGrid, OracleOutput)> {
    let axes = grid_for_scan(meas, sys, cfg)?;
    let l = build_terminal_cost(meas, &axes, exec)?;
    let vg = solve_avoid_value(&l, sys, &axes, cfg, exec)?;
    let out = harvest_pairs(&vg, sys, meas, cfg, exec)?;
    Ok((vg, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InputNorm;
    use crate::environment::{Bounds, Environment, LidarConfig, Shape};

    fn open_scan(state: &[f64], r: f64) -> Measurement {
        let env = Environment::new(Bounds { min: [-10.0, -10.0], max: [10.0, 10.0] }, vec![]).unwrap();
        env.lidar_scan(state, &LidarConfig::new(r)).unwrap()
    }

    #[test]
    fn terminal_cost_examples() {
        let m = open_scan(&[0.0, 0.0], 1.0);
        let sys = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
        let mut cfg = OracleConfig::for_system(&sys);
        cfg.grid_counts = vec![21, 21];
        let axes = grid_for_scan(&m, &sys, &cfg).unwrap();
        let l = build_terminal_cost(&m, &axes, Execution::Sequential).unwrap();
        // Center node: distance to the scan circle.
        assert!((l[10 * 21 + 10] - 1.0).abs() < 1e-12);
        // Corner node lies outside the scan disk.
        assert!(l[0] < 0.0);
        // A node on an obstacle hit point is non-positive.
        let env =
            Environment::new(Bounds { min: [-10.0, -10.0], max: [10.0, 10.0] }, vec![Shape::Rect { min: [0.5, -2.0], max: [3.0, 2.0] }])
                .unwrap();
        let m = env.lidar_scan(&[0.0, 0.0], &LidarConfig::new(1.0)).unwrap();
        let axes = vec![Axis { min: -1.0, max: 1.0, count: 21, periodic: false }; 2];
        let l = build_terminal_cost(&m, &axes, Execution::Sequential).unwrap();
        assert!((axes[0].node(15) - 0.5).abs() < 1e-12);
        assert!(l[15 * 21 + 10] <= 0.0);
        assert!(l[14 * 21 + 10] > 0.0);
    }

    #[test]
    fn degenerate_scan_rejected() {
        let mut m = open_scan(&[0.0, 0.0], 1.0);
        m.safe_points.truncate(2);
        let sys = ControlAffineSystem::single_integrator(1.0, InputNorm::Inf);
        let axes = grid_for_scan(&m, &sys, &OracleConfig::for_system(&sys)).unwrap();
        assert!(matches!(build_terminal_cost(&m, &axes, Execution::Sequential), Err(Error::DegenerateScan { .. })));
    }

    /// Brute-force rollout: constant controls from a small discrete set. Returns whether
    /// some control keeps `q` inside the scan until `t_end`.
    fn some_constant_control_stays(m: &Measurement, sys: &ControlAffineSystem, x0: &[f64], t_end: f64, controls: &[Vec<f64>]) -> bool {
        controls.iter().any(|u| {
            let mut x = x0.to_vec();
            let dt = 0.02;
            let steps = (t_end / dt) as usize;
            (0..steps).all(|_| {
                x = sys.rk4_step(&x, u, dt).unwrap();
                m.contains_safe([x[0], x[1]])
            })
        })
    }

    #[test]
    fn single_integrator_center_is_safe() {
        let m = open_scan(&[0.0, 0.0], 1.0);
        let sys = ControlAffineSystem::single_integrator(0.5, InputNorm::Inf);
        let mut cfg = OracleConfig::for_system(&sys);
        cfg.grid_counts = vec![41, 41];
        cfg.horizon = 5.0;
        let axes = grid_for_scan(&m, &sys, &cfg).unwrap();
        let l = build_terminal_cost(&m, &axes, Execution::Parallel).unwrap();
        let vg = solve_avoid_value(&l, &sys, &axes, &cfg, Execution::Parallel).unwrap();
        assert!(vg.value(&[0.0, 0.0]).unwrap() > 0.0);
        // Value never exceeds the terminal cost.
        assert!(vg.values.iter().zip(&l).all(|(v, l)| v <= l));
        // Zero control keeps the resting single integrator in place: the rollout oracle agrees.
        assert!(some_constant_control_stays(&m, &sys, &[0.0, 0.0], 10.0, &[vec![0.0, 0.0]]));
    }

    /// Exhaustive bang-bang search over piecewise-constant turn rates on a coarse time grid.
    fn dubins_can_stay(m: &Measurement, sys: &ControlAffineSystem, x0: &[f64], depth: usize, seg: f64) -> bool {
        fn rec(m: &Measurement, sys: &ControlAffineSystem, x: Vec<f64>, depth: usize, seg: f64) -> bool {
            if depth == 0 {
                return true;
            }
            let umax = sys.input_set.u_max;
            [-umax, 0.0, umax].iter().any(|&u| {
                let mut y = x.clone();
                let dt = 0.02;
                for _ in 0..(seg / dt) as usize {
                    y = sys.rk4_step(&y, &[u], dt).unwrap();
                    if !m.contains_safe([y[0], y[1]]) {
                        return false;
                    }
                }
                rec(m, sys, y, depth - 1, seg)
            })
        }
        rec(m, sys, x0.to_vec(), depth, seg)
    }

    #[test]
    fn dubins_inevitable_collision_has_negative_value() {
        let m = open_scan(&[0.0, 0.0, 0.0], 1.1);
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        let cfg = OracleConfig::for_system(&sys);
        let axes = grid_for_scan(&m, &sys, &cfg).unwrap();
        let l = build_terminal_cost(&m, &axes, Execution::Parallel).unwrap();
        let vg = solve_avoid_value(&l, &sys, &axes, &cfg, Execution::Parallel).unwrap();
        // Heading straight at the scan boundary 0.1 away: turning radius 0.25 cannot avoid it.
        let doomed = [1.0, 0.0, 0.0];
        assert!(m.contains_safe([1.0, 0.0]));
        assert!(vg.value(&doomed).unwrap() < 0.0);
        assert!(!dubins_can_stay(&m, &sys, &doomed, 4, 1.0));
        // Same position heading tangentially is fine for a while; the center is safe.
        assert!(vg.value(&[0.0, 0.0, 0.0]).unwrap() > 0.0);
        assert!(dubins_can_stay(&m, &sys, &[0.0, 0.0, 0.0], 4, 2.0));
        // Monotone structure: nodes with l <= 0 keep V <= 0.
        for (v, lv) in vg.values.iter().zip(&l) {
            assert!(v <= lv);
        }
    }

    #[test]
    fn policy_tie_and_sign_rules() {
        let axes = vec![
            Axis { min: -1.0, max: 1.0, count: 5, periodic: false },
            Axis { min: -1.0, max: 1.0, count: 5, periodic: false },
            Axis { min: -std::f64::consts::PI, max: std::f64::consts::PI, count: 8, periodic: true },
        ];
        let sys = ControlAffineSystem::dubins(0.1, 0.4);
        let n = 5 * 5 * 8;
        let flat = ValueGrid { axes: axes.clone(), values: vec![1.0; n], info: dummy_info() };
        assert_eq!(extract_policy(&flat, &sys, &[0.1, 0.2, 0.3]).unwrap(), vec![0.0]);
        // V increasing in heading near theta = 0.
        let mut values = vec![0.0; n];
        for (idx, v) in values.iter_mut().enumerate() {
            let ii = unravel(idx, &axes);
            *v = axes[2].node(ii[2]).sin();
        }
        let vg = ValueGrid { axes, values, info: dummy_info() };
        assert_eq!(extract_policy(&vg, &sys, &[0.0, 0.0, 0.1]).unwrap(), vec![0.4]);
        assert!(matches!(extract_policy(&vg, &sys, &[2.0, 0.0, 0.1]), Err(Error::OutOfGrid)));
    }

    fn dummy_info() -> SolveInfo {
        SolveInfo { iterations: 0, time_marched: 0.0, last_update: 0.0, converged: true, dissipation_bound: 0.0 }
    }

    #[test]
    fn cache_round_trip() {
        let axes = vec![Axis { min: -1.0, max: 1.0, count: 3, periodic: false }, Axis { min: 0.0, max: 6.0, count: 4, periodic: true }];
        let vg = ValueGrid { axes, values: (0..12).map(|i| i as f64 * 0.1 - 0.3).collect(), info: dummy_info() };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vgrid");
        vg.write_cache(&p).unwrap();
        assert_eq!(ValueGrid::read_cache(&p).unwrap(), vg);
    }
}
