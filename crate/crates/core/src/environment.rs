//! Planar obstacle environments, exact signed distances and an idealized LiDAR.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A position in the observable plane.
pub type Point = [f64; 2];

/// Numerical slack used when classifying points that sit exactly on an obstacle boundary.
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Circle {
        center: Point,
        radius: f64,
    },
    /// Axis-aligned box.
    Rect {
        min: Point,
        max: Point,
    },
    /// Wall occupying `{q : normal . q >= offset}`.
    HalfPlane {
        normal: Point,
        offset: f64,
    },
}

impl Shape {
    /// Signed distance, positive outside the shape.
    pub fn signed_distance(&self, q: Point) -> f64 {
        match *self {
            Shape::Circle { center, radius } => norm2(sub(q, center)) - radius,
            Shape::Rect { min, max } => {
                let c = [(min[0] + max[0]) * 0.5, (min[1] + max[1]) * 0.5];
                let h = [(max[0] - min[0]) * 0.5, (max[1] - min[1]) * 0.5];
                let d = [(q[0] - c[0]).abs() - h[0], (q[1] - c[1]).abs() - h[1]];
                let outside = norm2([d[0].max(0.0), d[1].max(0.0)]);
                let inside = d[0].max(d[1]).min(0.0);
                outside + inside
            }
            Shape::HalfPlane { normal, offset } => {
                let n = normalize(normal);
                let scale = norm2(normal);
                offset / scale - dot(n, q)
            }
        }
    }

    /// Smallest `t >= 0` with `origin + t * dir` on or inside the shape, if any.
    /// `dir` must be a unit vector.
    pub fn ray_hit(&self, origin: Point, dir: Point) -> Option<f64> {
        if self.signed_distance(origin) <= 0.0 {
            return Some(0.0);
        }
        match *self {
            Shape::Circle { center, radius } => {
                let oc = sub(origin, center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t >= 0.0).then_some(t)
            }
            Shape::Rect { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for k in 0..2 {
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[k] - origin[k]) / dir[k];
                    let t2 = (max[k] - origin[k]) / dir[k];
                    t_enter = t_enter.max(t1.min(t2));
                    t_exit = t_exit.min(t1.max(t2));
                }
                (t_enter <= t_exit && t_enter >= 0.0).then_some(t_enter)
            }
            Shape::HalfPlane { normal, offset } => {
                let along = dot(normal, dir);
                if along <= 0.0 {
                    return None;
                }
                Some((offset - dot(normal, origin)) / along)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Circle { center, radius } => radius > 0.0 && finite2(center) && radius.is_finite(),
            Shape::Rect { min, max } => max[0] > min[0] && max[1] > min[1] && finite2(min) && finite2(max),
            Shape::HalfPlane { normal, offset } => norm2(normal) > 0.0 && offset.is_finite() && finite2(normal),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidEnvironment(format!("degenerate shape {self:?}")))
        }
    }
}

/// Axis-aligned workspace bounds; everything outside is treated as occupied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    /// Distance to the nearest edge, positive inside.
    pub fn interior_distance(&self, q: Point) -> f64 {
        let inside = (q[0] - self.min[0]).min(self.max[0] - q[0]).min(q[1] - self.min[1]).min(self.max[1] - q[1]);
        if inside >= 0.0 {
            inside
        } else {
            let dx = (self.min[0] - q[0]).max(q[0] - self.max[0]).max(0.0);
            let dy = (self.min[1] - q[1]).max(q[1] - self.max[1]).max(0.0);
            -norm2([dx, dy])
        }
    }

    fn exit_range(&self, origin: Point, dir: Point) -> f64 {
        let mut t = f64::INFINITY;
        for k in 0..2 {
            if dir[k] > 0.0 {
                t = t.min((self.max[k] - origin[k]) / dir[k]);
            } else if dir[k] < 0.0 {
                t = t.min((self.min[k] - origin[k]) / dir[k]);
            }
        }
        t.max(0.0)
    }
}

/// The (to the agent unknown) geometric safe region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub bounds: Bounds,
    #[serde(default)]
    pub obstacles: Vec<Shape>,
}

impl Environment {
    pub fn new(bounds: Bounds, obstacles: Vec<Shape>) -> Result<Self> {
        let env = Environment { bounds, obstacles };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bounds;
        if !(b.max[0] > b.min[0] && b.max[1] > b.min[1]) {
            return Err(Error::InvalidEnvironment("workspace bounds have non-positive extent".into()));
        }
        for s in &self.obstacles {
            s.validate()?;
        }
        // Free space must be non-empty; probe a lattice over the workspace.
        let n = 64;
        let free = (0..=n).any(|i| {
            (0..=n).any(|j| {
                let q = [b.min[0] + (b.max[0] - b.min[0]) * i as f64 / n as f64, b.min[1] + (b.max[1] - b.min[1]) * j as f64 / n as f64];
                self.signed_distance(q) > 0.0
            })
        });
        if !free {
            return Err(Error::InvalidEnvironment("no obstacle-free space inside the workspace".into()));
        }
        Ok(())
    }

    /// Signed distance to the occupied set (obstacles and everything outside the workspace),
    /// positive in free space.
    pub fn signed_distance(&self, q: Point) -> f64 {
        self.obstacles.iter().map(|s| s.signed_distance(q)).fold(self.bounds.interior_distance(q), f64::min)
    }

    /// Range to the first occupied point along a unit ray.
    pub fn first_hit(&self, origin: Point, dir: Point) -> f64 {
        self.obstacles.iter().filter_map(|s| s.ray_hit(origin, dir)).fold(self.bounds.exit_range(origin, dir), f64::min)
    }

    /// Idealized LiDAR measurement around `proj_q(state)`.
    pub fn lidar_scan(&self, state: &[f64], cfg: &LidarConfig) -> Result<Measurement> {
        let c = [state[0], state[1]];
        let d0 = self.signed_distance(c);
        if d0 <= 0.0 {
            return Err(Error::ScanFromUnsafeState { distance: d0 });
        }
        let r = cfg.radius;
        let n = cfg.n_rays;
        let step = cfg.sample_step;
        let mut m = Measurement {
            scan_center: state.to_vec(),
            scan_radius: r,
            ranges: Vec::with_capacity(n),
            safe_points: Vec::new(),
            unsafe_points: Vec::new(),
            occluded_points: Vec::new(),
            boundary_points: Vec::with_capacity(n),
        };
        m.safe_points.push(c);
        let n_samples = (r / step + 1e-9).floor() as usize;
        for j in 0..n {
            let dir = ray_direction(j, n);
            let hit = self.first_hit(c, dir).min(r);
            m.ranges.push(hit);
            if hit < r {
                m.unsafe_points.push(add(c, scale(dir, hit)));
            }
            for k in 1..=n_samples {
                let t = k as f64 * step;
                let p = add(c, scale(dir, t));
                if t < hit || hit >= r {
                    m.safe_points.push(p);
                } else if self.signed_distance(p) <= BOUNDARY_TOL {
                    m.unsafe_points.push(p);
                } else {
                    m.occluded_points.push(p);
                }
            }
            m.boundary_points.push(add(c, scale(dir, r)));
        }
        Ok(m)
    }

    /// Ground-truth check that every logged position is obstacle-free.
    /// Returns the index of the first violating state when unsafe.
    pub fn is_trajectory_safe<S: AsRef<[f64]>>(&self, states: &[S]) -> (bool, Option<usize>) {
        match states.iter().position(|x| self.signed_distance([x.as_ref()[0], x.as_ref()[1]]) <= 0.0) {
            Some(i) => (false, Some(i)),
            None => (true, None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub radius: f64,
    #[serde(default = "default_n_rays")]
    pub n_rays: usize,
    #[serde(default = "default_sample_step")]
    pub sample_step: f64,
}

fn default_n_rays() -> usize {
    180
}
fn default_sample_step() -> f64 {
    0.05
}

impl LidarConfig {
    pub fn new(radius: f64) -> Self {
        LidarConfig { radius, n_rays: default_n_rays(), sample_step: default_sample_step() }
    }
}

/// One scan: what the agent knows about its surroundings.
///
/// `unsafe_points` are samples inside obstacles or outside the workspace. Samples behind the
/// first hit that happen to be free are kept apart as `occluded_points`; together with the
/// `boundary_points` on the scan circle they are treated as unsafe by the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub scan_center: Vec<f64>,
    pub scan_radius: f64,
    /// First-hit range per ray (capped at `scan_radius`); ray `j` points at angle `2 pi j / n`.
    pub ranges: Vec<f64>,
    pub safe_points: Vec<Point>,
    pub unsafe_points: Vec<Point>,
    pub occluded_points: Vec<Point>,
    pub boundary_points: Vec<Point>,
}

impl Measurement {
    pub fn center_q(&self) -> Point {
        [self.scan_center[0], self.scan_center[1]]
    }

    /// Every point the learner must treat as unsafe.
    pub fn all_unsafe(&self) -> impl Iterator<Item = &Point> {
        self.unsafe_points.iter().chain(self.occluded_points.iter()).chain(self.boundary_points.iter())
    }

    /// Whether `q` lies in the observed free region (star-shaped about the scan center).
    /// Between two rays the smaller of the two ranges is used.
    pub fn contains_safe(&self, q: Point) -> bool {
        self.safe_depth(q) > 0.0
    }

    /// Positive when `q` is inside the observed free region: the radial slack to the
    /// conservative range limit along the bearing of `q`.
    pub fn safe_depth(&self, q: Point) -> f64 {
        let c = self.center_q();
        let v = sub(q, c);
        let rho = norm2(v);
        let n = self.ranges.len();
        if n == 0 {
            return self.scan_radius - rho;
        }
        let mut phi = v[1].atan2(v[0]);
        if phi < 0.0 {
            phi += std::f64::consts::TAU;
        }
        let width = std::f64::consts::TAU / n as f64;
        let i = ((phi / width).floor() as usize) % n;
        let j = (i + 1) % n;
        self.ranges[i].min(self.ranges[j]) - rho
    }

    /// Blocked segments of each ray, from the first hit out to the scan radius.
    pub fn blocked_segments(&self) -> Vec<(Point, Point)> {
        let c = self.center_q();
        let n = self.ranges.len();
        self.ranges
            .iter()
            .enumerate()
            .map(|(j, &hit)| {
                let dir = ray_direction(j, n);
                (add(c, scale(dir, hit)), add(c, scale(dir, self.scan_radius)))
            })
            .collect()
    }

    /// Stable content hash, used to key oracle caches and artifacts.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in self.scan_center.iter().chain(std::iter::once(&self.scan_radius)).chain(self.ranges.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update((self.safe_points.len() as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn ray_direction(j: usize, n: usize) -> Point {
    let a = std::f64::consts::TAU * j as f64 / n as f64;
    [a.cos(), a.sin()]
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}
pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}
pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
pub(crate) fn norm2(a: Point) -> f64 {
    a[0].hypot(a[1])
}
fn normalize(a: Point) -> Point {
    scale(a, 1.0 / norm2(a))
}
fn finite2(a: Point) -> bool {
    a[0].is_finite() && a[1].is_finite()
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm2(sub(p, add(a, scale(ab, t))))
}
