//! SVG figures: trajectory over the environment, zero level sets, per-position heading
//! arcs, and gradient-norm heatmaps.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::composite::CompositeCbf;
use crate::dynamics::Trajectory;
use crate::environment::{Environment, Measurement, Point, Shape};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub type Segment = (Point, Point);

/// Iso-contour segments of a scalar field sampled on a regular lattice.
///
/// `values[j * nx + i]` is the field at `(x0 + i hx, y0 + j hy)`. Saddle cells are resolved
/// with the cell-center average.
#[allow(clippy::too_many_arguments)]
pub fn marching_squares(values: &[f64], nx: usize, ny: usize, x0: f64, y0: f64, hx: f64, hy: f64, level: f64) -> Vec<Segment> {
    assert_eq!(values.len(), nx * ny);
    let mut out = Vec::new();
    let at = |i: usize, j: usize| values[j * nx + i] - level;
    let pt = |i: usize, j: usize| [x0 + i as f64 * hx, y0 + j as f64 * hy];
    let lerp = |a: Point, b: Point, va: f64, vb: f64| {
        let t = if va == vb { 0.5 } else { va / (va - vb) };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            // Corners counter-clockwise from bottom-left.
            let c = [pt(i, j), pt(i + 1, j), pt(i + 1, j + 1), pt(i, j + 1)];
            let v = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let case = v.iter().enumerate().fold(0usize, |acc, (k, &x)| acc | (((x >= 0.0) as usize) << k));
            if case == 0 || case == 15 {
                continue;
            }
            let edge = |e: usize| lerp(c[e], c[(e + 1) % 4], v[e], v[(e + 1) % 4]);
            let crossed: Vec<usize> = (0..4).filter(|&e| (v[e] >= 0.0) != (v[(e + 1) % 4] >= 0.0)).collect();
            if crossed.len() == 2 {
                out.push((edge(crossed[0]), edge(crossed[1])));
            } else {
                let center = v.iter().sum::<f64>() / 4.0;
                // Pair each edge with its neighbour so that the center's side stays connected.
                let pairs = if (center >= 0.0) == (v[0] >= 0.0) { [(0, 1), (2, 3)] } else { [(0, 3), (1, 2)] };
                for (a, b) in pairs {
                    out.push((edge(a), edge(b)));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Trajectory,
    Levelsets,
    AngleArcs,
    Gradnorm,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::Trajectory, PlotKind::Levelsets, PlotKind::AngleArcs, PlotKind::Gradnorm];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Trajectory => "trajectory",
            PlotKind::Levelsets => "levelsets",
            PlotKind::AngleArcs => "angle-arcs",
            PlotKind::Gradnorm => "gradnorm",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind `{s}` (trajectory, levelsets, angle-arcs, gradnorm)")))
    }
}

/// World-to-pixel mapping plus an SVG body under construction.
pub struct Canvas {
    lo: Point,
    hi: Point,
    scale: f64,
    body: String,
}

const MARGIN_PX: f64 = 20.0;

impl Canvas {
    pub fn new(lo: Point, hi: Point, width_px: f64) -> Self {
        let scale = width_px / (hi[0] - lo[0]);
        Canvas { lo, hi, scale, body: String::new() }
    }

    pub fn for_env(env: &Environment) -> Self {
        let pad = 0.1;
        let b = env.bounds;
        Canvas::new([b.min[0] - pad, b.min[1] - pad], [b.max[0] + pad, b.max[1] + pad], 600.0)
    }

    fn px(&self, p: Point) -> (f64, f64) {
        (MARGIN_PX + (p[0] - self.lo[0]) * self.scale, MARGIN_PX + (self.hi[1] - p[1]) * self.scale)
    }

    pub fn rect(&mut self, lo: Point, hi: Point, style: &str) {
        let (x, y) = self.px([lo[0], hi[1]]);
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
            (hi[0] - lo[0]) * self.scale,
            (hi[1] - lo[1]) * self.scale
        );
    }

    pub fn circle(&mut self, c: Point, r: f64, style: &str) {
        let (x, y) = self.px(c);
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" {style}/>"#, r * self.scale);
    }

    pub fn dot(&mut self, c: Point, r_px: f64, style: &str) {
        let (x, y) = self.px(c);
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r_px:.2}" {style}/>"#);
    }

    pub fn polyline(&mut self, pts: &[Point], style: &str) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for p in pts {
            let (x, y) = self.px(*p);
            let _ = write!(d, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" {style}/>"#, d.trim_end());
    }

    pub fn segments(&mut self, segs: &[Segment], style: &str) {
        if segs.is_empty() {
            return;
        }
        let mut d = String::new();
        for (a, b) in segs {
            let (x1, y1) = self.px(*a);
            let (x2, y2) = self.px(*b);
            let _ = write!(d, "M{x1:.2} {y1:.2}L{x2:.2} {y2:.2}");
        }
        let _ = writeln!(self.body, r#"<path d="{d}" fill="none" {style}/>"#);
    }

    /// Circular arc of radius `r` about `c` from angle `a0` to `a1` (counter-clockwise).
    pub fn arc(&mut self, c: Point, r: f64, a0: f64, a1: f64, style: &str) {
        let (x0, y0) = self.px([c[0] + r * a0.cos(), c[1] + r * a0.sin()]);
        let (x1, y1) = self.px([c[0] + r * a1.cos(), c[1] + r * a1.sin()]);
        let rp = r * self.scale;
        // Pixel space is y-down, so counter-clockwise in the world is sweep-flag 0.
        let _ = writeln!(self.body, r#"<path d="M{x0:.2} {y0:.2}A{rp:.2} {rp:.2} 0 0 0 {x1:.2} {y1:.2}" fill="none" {style}/>"#);
    }

    pub fn text(&mut self, p: Point, s: &str, style: &str) {
        let (x, y) = self.px(p);
        let esc = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(self.body, r#"<text x="{x:.2}" y="{y:.2}" {style}>{esc}</text>"#);
    }

    pub fn finish(self, title: &str) -> String {
        let w = (self.hi[0] - self.lo[0]) * self.scale + 2.0 * MARGIN_PX;
        let h = (self.hi[1] - self.lo[1]) * self.scale + 2.0 * MARGIN_PX;
        let esc = title.replace('&', "&amp;").replace('<', "&lt;");
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">\n<title>{esc}</title>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

pub fn draw_environment(cv: &mut Canvas, env: &Environment) {
    let b = env.bounds;
    cv.rect(b.min, b.max, r#"fill="none" stroke="black" stroke-width="3""#);
    let fill = r##"fill="#555" stroke="black""##;
    for s in &env.obstacles {
        match *s {
            Shape::Circle { center, radius } => cv.circle(center, radius, fill),
            Shape::Rect { min, max } => cv.rect(min, max, fill),
            Shape::HalfPlane { normal, offset } => {
                // Only the boundary line of the wall is drawn.
                let d = [-normal[1], normal[0]];
                let n2 = normal[0] * normal[0] + normal[1] * normal[1];
                let p0 = [normal[0] * offset / n2, normal[1] * offset / n2];
                let big = 100.0;
                cv.polyline(
                    &[[p0[0] - big * d[0], p0[1] - big * d[1]], [p0[0] + big * d[0], p0[1] + big * d[1]]],
                    r#"stroke="black" stroke-width="2""#,
                );
            }
        }
    }
}

pub fn draw_scans(cv: &mut Canvas, scans: &[Measurement]) {
    for m in scans {
        let c = m.center_q();
        let n = m.ranges.len();
        let pts: Vec<Point> = (0..=n)
            .map(|j| {
                let a = std::f64::consts::TAU * (j % n.max(1)) as f64 / n.max(1) as f64;
                let r = m.ranges.get(j % n.max(1)).copied().unwrap_or(m.scan_radius);
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        cv.polyline(&pts, r##"stroke="#9bb" stroke-width="1" stroke-dasharray="4 3""##);
        cv.dot(c, 3.5, r##"fill="#088""##);
    }
}

pub fn draw_trajectory(cv: &mut Canvas, traj: &Trajectory, color: &str) {
    let pts: Vec<Point> = traj.states.iter().map(|x| [x[0], x[1]]).collect();
    cv.polyline(&pts, &format!(r#"stroke="{color}" stroke-width="2""#));
    if let Some(p) = pts.first() {
        cv.dot(*p, 4.0, &format!(r#"fill="{color}""#));
    }
}

/// Evaluation lattice over a window, `n` nodes per axis.
pub struct Lattice {
    pub lo: Point,
    pub hi: Point,
    pub n: usize,
}

impl Lattice {
    pub fn step(&self) -> (f64, f64) {
        ((self.hi[0] - self.lo[0]) / (self.n - 1) as f64, (self.hi[1] - self.lo[1]) / (self.n - 1) as f64)
    }

    pub fn sample<F: Fn(Point) -> f64 + Sync + Send>(&self, exec: Execution, f: F) -> Vec<f64> {
        let (hx, hy) = self.step();
        let n = self.n;
        par::map_range(exec, n * n, |k| f([self.lo[0] + (k % n) as f64 * hx, self.lo[1] + (k / n) as f64 * hy]))
    }

    pub fn contour(&self, values: &[f64], level: f64) -> Vec<Segment> {
        let (hx, hy) = self.step();
        marching_squares(values, self.n, self.n, self.lo[0], self.lo[1], hx, hy, level)
    }
}

fn state_at(q: Point, dim: usize, theta: f64) -> Vec<f64> {
    if dim == 3 {
        vec![q[0], q[1], theta]
    } else {
        vec![q[0], q[1]]
    }
}

pub const PART_COLORS: [&str; 8] = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"];

/// Zero contour of every part (thin) and of the composite (thick) at heading `theta`.
pub fn draw_levelsets(cv: &mut Canvas, cc: &CompositeCbf, dim: usize, theta: f64, grid: &Lattice, color: &str, exec: Execution) {
    for (i, p) in cc.parts.iter().enumerate() {
        let v = grid.sample(exec, |q| p.value(&state_at(q, dim, theta)));
        let style = format!(r#"stroke="{}" stroke-width="1" stroke-dasharray="5 2""#, PART_COLORS[i % PART_COLORS.len()]);
        cv.segments(&grid.contour(&v, 0.0), &style);
    }
    if !cc.is_empty() {
        let v = grid.sample(exec, |q| cc.eval_h(&state_at(q, dim, theta)).map(|r| r.0).unwrap_or(f64::NEG_INFINITY));
        cv.segments(&grid.contour(&v, 0.0), &format!(r#"stroke="{color}" stroke-width="2.5""#));
    }
}

/// Per-position heading arcs: red where `H(q, theta) < 0`, blue otherwise.
pub fn draw_angle_arcs(cv: &mut Canvas, cc: &CompositeCbf, dim: usize, positions: &[Point], radius: f64) {
    let n = if dim == 3 { 16 } else { 1 };
    for &q in positions {
        for k in 0..n {
            let th = -std::f64::consts::PI + std::f64::consts::TAU * k as f64 / n as f64;
            let h = cc.eval_h(&state_at(q, dim, th)).map(|r| r.0).unwrap_or(f64::NEG_INFINITY);
            let color = if h >= 0.0 { "#1f4fd8" } else { "#d62728" };
            if dim == 3 {
                let w = std::f64::consts::TAU / n as f64;
                cv.arc(q, radius, th - 0.45 * w, th + 0.45 * w, &format!(r#"stroke="{color}" stroke-width="2""#));
            } else {
                cv.dot(q, 2.5, &format!(r#"fill="{color}""#));
            }
        }
    }
}

/// Piecewise-linear ramp through five anchor colors, `t` in `[0, 1]`.
pub fn ramp(t: f64) -> String {
    const A: [[f64; 3]; 5] = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let s = t * 4.0;
    let i = (s.floor() as usize).min(3);
    let f = s - i as f64;
    let c: Vec<u8> = (0..3).map(|k| (A[i][k] + f * (A[i + 1][k] - A[i][k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Heatmap of `|grad h_argmax|` over `{H >= 0}` at heading `theta`; returns the maximum.
pub fn draw_gradnorm(cv: &mut Canvas, cc: &CompositeCbf, dim: usize, theta: f64, grid: &Lattice, exec: Execution) -> f64 {
    if cc.is_empty() {
        return 0.0;
    }
    let vals = grid.sample(exec, |q| {
        let x = state_at(q, dim, theta);
        match cc.eval_h(&x) {
            Ok((h, i)) if h >= 0.0 => {
                let g = cc.parts[i].value_and_gradient(&x).1;
                g[..dim].iter().map(|v| v * v).sum::<f64>().sqrt()
            }
            _ => f64::NAN,
        }
    });
    let max = vals.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let (hx, hy) = grid.step();
    for (k, v) in vals.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let q = [grid.lo[0] + (k % grid.n) as f64 * hx, grid.lo[1] + (k / grid.n) as f64 * hy];
        let color = ramp(if max > 0.0 { v / max } else { 0.0 });
        cv.rect(
            [q[0] - hx / 2.0, q[1] - hy / 2.0],
            [q[0] + hx / 2.0, q[1] + hy / 2.0],
            &format!(r#"fill="{color}" stroke="none" shape-rendering="crispEdges""#),
        );
    }
    max
}

/// Window covering the workspace.
pub fn env_lattice(env: &Environment, n: usize) -> Lattice {
    Lattice { lo: env.bounds.min, hi: env.bounds.max, n }
}

/// Positions for heading arcs: a lattice restricted to scanned disks.
pub fn arc_positions(env: &Environment, scans: &[Measurement], spacing: f64) -> Vec<Point> {
    let b = env.bounds;
    let nx = ((b.max[0] - b.min[0]) / spacing).floor() as usize;
    let ny = ((b.max[1] - b.min[1]) / spacing).floor() as usize;
    let mut out = Vec::new();
    for j in 1..ny {
        for i in 1..nx {
            let q = [b.min[0] + i as f64 * spacing, b.min[1] + j as f64 * spacing];
            let seen = scans.iter().any(|m| {
                let c = m.center_q();
                (q[0] - c[0]).hypot(q[1] - c[1]) < m.scan_radius
            });
            if seen && env.signed_distance(q) > 0.0 {
                out.push(q);
            }
        }
    }
    out
}
