//! Wendland compactly-supported radial basis functions.
//!
//! Each feature is `phi(x, z) = w(||x - z|| / s)` with
//! `w(t) = max(0, 1 - t)^4 (1 + 4t) / 20`, which is C^2, non-negative and vanishes for `t >= 1`.
//! Angular coordinates use the wrapped difference, so features respect the circle topology as
//! long as the support radius stays below pi.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, MAX_STATE};
use crate::error::{Error, Result};

/// `max(0, 1 - r/s)^4 (1 + 4 r/s) / 20`.
pub fn wendland_eval(r: f64, s: f64) -> f64 {
    let t = r / s;
    if t >= 1.0 {
        return 0.0;
    }
    let a = 1.0 - t;
    let a2 = a * a;
    a2 * a2 * (1.0 + 4.0 * t) / 20.0
}

/// Derivative of [`wendland_eval`] with respect to `r`: `-(r/s) (1 - r/s)^3 / s`.
pub fn wendland_deriv(r: f64, s: f64) -> f64 {
    let t = r / s;
    if t >= 1.0 {
        return 0.0;
    }
    let a = 1.0 - t;
    -t * a * a * a / s
}

/// One non-zero entry of a sparse feature evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEval {
    pub index: usize,
    pub value: f64,
    pub grad: [f64; MAX_STATE],
}

/// A finite family of scalar features with analytic gradients.
pub trait FeatureMap: Sync {
    fn num_features(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Appends every feature that is non-zero (or has a non-zero gradient) at `x`.
    fn eval_into(&self, x: &[f64], out: &mut Vec<FeatureEval>);

    fn eval_sparse(&self, x: &[f64]) -> Vec<FeatureEval> {
        let mut out = Vec::new();
        self.eval_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsRbfBasis {
    /// Row-major `J x d_x` center coordinates.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub support: f64,
    pub angular: Vec<bool>,
    #[serde(skip)]
    index: IndexCache,
}

/// Bucket grid over the centers with cells of at least half the support radius, so every
/// center within the support of a query lies in the 5^d block of cells around it.
#[derive(Debug, Clone)]
struct CellIndex {
    origin: [f64; MAX_STATE],
    size: [f64; MAX_STATE],
    counts: [usize; MAX_STATE],
    cells: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Default)]
struct IndexCache(OnceLock<CellIndex>);

impl PartialEq for IndexCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl CellIndex {
    fn build(basis: &CsRbfBasis) -> Self {
        use std::f64::consts::{PI, TAU};
        let dim = basis.dim;
        let half = basis.support / 2.0;
        let mut origin = [0.0; MAX_STATE];
        let mut size = [1.0; MAX_STATE];
        let mut counts = [1usize; MAX_STATE];
        for k in 0..dim {
            if basis.angular[k] {
                let n = (TAU / half).floor() as usize;
                // With fewer than five cells the 5-cell window already wraps the whole circle.
                let n = if n >= 5 { n } else { 1 };
                origin[k] = -PI;
                size[k] = TAU / n as f64;
                counts[k] = n;
            } else {
                let lo = (0..basis.len()).map(|j| basis.center(j)[k]).fold(f64::INFINITY, f64::min);
                let hi = (0..basis.len()).map(|j| basis.center(j)[k]).fold(f64::NEG_INFINITY, f64::max);
                origin[k] = lo;
                size[k] = half;
                counts[k] = ((hi - lo) / half).floor() as usize + 1;
            }
        }
        let total: usize = counts[..dim].iter().product();
        let mut cells = vec![Vec::new(); total];
        let mut idx = Self { origin, size, counts, cells: Vec::new() };
        for j in 0..basis.len() {
            let z = basis.center(j);
            let mut flat = 0;
            for k in 0..dim {
                flat = flat * counts[k] + idx.coord(z[k], k, basis.angular[k]).clamp(0, counts[k] as i64 - 1) as usize;
            }
            cells[flat].push(j as u32);
        }
        idx.cells = cells;
        idx
    }

    fn coord(&self, v: f64, k: usize, angular: bool) -> i64 {
        let v = if angular { wrap_angle(v) } else { v };
        ((v - self.origin[k]) / self.size[k]).floor() as i64
    }

    /// Appends every center index in the window around `x`, in increasing order.
    fn candidates(&self, x: &[f64], angular: &[bool], out: &mut Vec<u32>) {
        let dim = x.len();
        let mut ranges: [Vec<usize>; MAX_STATE] = Default::default();
        for k in 0..dim {
            let n = self.counts[k] as i64;
            let c = self.coord(x[k], k, angular[k]);
            ranges[k] = if angular[k] {
                if n == 1 {
                    vec![0]
                } else {
                    (c - 2..=c + 2).map(|i| i.rem_euclid(n) as usize).collect()
                }
            } else {
                (c - 2..=c + 2).filter(|&i| i >= 0 && i < n).map(|i| i as usize).collect()
            };
            if ranges[k].is_empty() {
                return;
            }
        }
        let mut pos = [0usize; MAX_STATE];
        loop {
            let mut flat = 0;
            for k in 0..dim {
                flat = flat * self.counts[k] + ranges[k][pos[k]];
            }
            out.extend_from_slice(&self.cells[flat]);
            let mut k = dim;
            loop {
                if k == 0 {
                    out.sort_unstable();
                    return;
                }
                k -= 1;
                pos[k] += 1;
                if pos[k] < ranges[k].len() {
                    break;
                }
                pos[k] = 0;
            }
        }
    }
}

impl CsRbfBasis {
    pub fn new(centers: Vec<Vec<f64>>, support: f64, angular: Vec<bool>) -> Result<Self> {
        let dim = angular.len();
        if centers.is_empty() {
            return Err(Error::EmptyCenterSet);
        }
        if !(support > 0.0 && support.is_finite()) {
            return Err(Error::DimensionMismatch(format!("support radius must be positive, got {support}")));
        }
        let mut flat = Vec::with_capacity(centers.len() * dim);
        for c in &centers {
            if c.len() != dim || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::DimensionMismatch(format!("bad center {c:?} for dimension {dim}")));
            }
            flat.extend_from_slice(c);
        }
        Ok(CsRbfBasis { centers: flat, dim, support, angular, index: IndexCache::default() })
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    /// Coordinate difference `x - z`, wrapped on angular axes.
    pub fn diff(&self, x: &[f64], z: &[f64]) -> [f64; MAX_STATE] {
        let mut d = [0.0; MAX_STATE];
        for k in 0..self.dim {
            let v = x[k] - z[k];
            d[k] = if self.angular[k] { wrap_angle(v) } else { v };
        }
        d
    }

    pub fn distance(&self, x: &[f64], z: &[f64]) -> f64 {
        self.diff(x, z).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dense feature vector `phi(x, Z)`.
    pub fn phi_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|j| wendland_eval(self.distance(x, self.center(j)), self.support)).collect()
    }

    /// Dense `J x d_x` Jacobian of `phi(x, Z)`, row-major.
    pub fn phi_jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|j| {
                let g = self.grad_one(x, j);
                g[..self.dim].to_vec()
            })
            .collect()
    }

    fn grad_one(&self, x: &[f64], j: usize) -> [f64; MAX_STATE] {
        let d = self.diff(x, self.center(j));
        let s = self.support;
        let t = d.iter().map(|v| v * v).sum::<f64>().sqrt() / s;
        let mut g = [0.0; MAX_STATE];
        if t < 1.0 {
            // d/dx w(|x - z| / s) = -(1 - t)^3 (x - z) / s^2, smooth through the center.
            let a = 1.0 - t;
            let c = -a * a * a / (s * s);
            for k in 0..self.dim {
                g[k] = c * d[k];
            }
        }
        g
    }
}

impl FeatureMap for CsRbfBasis {
    fn num_features(&self) -> usize {
        self.len()
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut Vec<FeatureEval>) {
        let s = self.support;
        let s2 = s * s;
        let index = self.index.0.get_or_init(|| CellIndex::build(self));
        let mut cand = Vec::with_capacity(64);
        index.candidates(&x[..self.dim], &self.angular, &mut cand);
        for j in cand {
            let j = j as usize;
            let d = self.diff(x, self.center(j));
            let r2: f64 = d.iter().map(|v| v * v).sum();
            if r2 >= s2 {
                continue;
            }
            let t = r2.sqrt() / s;
            let a = 1.0 - t;
            let a3 = a * a * a;
            let c = -a3 / s2;
            let mut grad = [0.0; MAX_STATE];
            for k in 0..self.dim {
                grad[k] = c * d[k];
            }
            out.push(FeatureEval { index: j, value: a3 * a * (1.0 + 4.0 * t) / 20.0, grad });
        }
    }
}

/// Region over the non-angular coordinates in which centers are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum CenterDomain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

/// Regular lattice of centers clipped to `domain`.
///
/// `spacing[k]` is the step along axis `k`. Angular axes are sampled with
/// `round(2 pi / spacing)` evenly spaced slices starting at `-pi` (no duplicate at `+pi`);
/// the domain only constrains the linear axes, listed in order.
/// Errors with [`Error::EmptyCenterSet`] when a box extent (or the ball diameter) is smaller
/// than the spacing.
pub fn grid_centers(domain: &CenterDomain, spacing: &[f64], angular: &[bool]) -> Result<Vec<Vec<f64>>> {
    use std::f64::consts::{PI, TAU};
    let dim = angular.len();
    if spacing.len() != dim || spacing.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::DimensionMismatch("spacing must be positive per dimension".into()));
    }
    let linear: Vec<usize> = (0..dim).filter(|&k| !angular[k]).collect();
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); dim];
    for k in 0..dim {
        if angular[k] {
            let n = ((TAU / spacing[k]).round() as usize).max(1);
            axes[k] = (0..n).map(|i| -PI + TAU * i as f64 / n as f64).collect();
        }
    }
    let eps = 1e-9;
    match domain {
        CenterDomain::Box { lo, hi } => {
            if lo.len() != linear.len() || hi.len() != linear.len() {
                return Err(Error::DimensionMismatch("box bounds vs linear dimensions".into()));
            }
            for (li, &k) in linear.iter().enumerate() {
                let ext = hi[li] - lo[li];
                if ext + eps < spacing[k] {
                    return Err(Error::EmptyCenterSet);
                }
                let n = (ext / spacing[k] + eps).floor() as usize;
                axes[k] = (0..=n).map(|i| lo[li] + i as f64 * spacing[k]).collect();
            }
        }
        CenterDomain::Ball { center, radius } => {
            if center.len() != linear.len() {
                return Err(Error::DimensionMismatch("ball center vs linear dimensions".into()));
            }
            for (li, &k) in linear.iter().enumerate() {
                if 2.0 * radius + eps < spacing[k] {
                    return Err(Error::EmptyCenterSet);
                }
                let n = (radius / spacing[k] + eps).floor() as i64;
                axes[k] = (-n..=n).map(|i| center[li] + i as f64 * spacing[k]).collect();
            }
        }
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; dim];
    'outer: loop {
        let z: Vec<f64> = (0..dim).map(|k| axes[k][idx[k]]).collect();
        let keep = match domain {
            CenterDomain::Box { .. } => true,
            CenterDomain::Ball { center, radius } => {
                let r2: f64 = linear.iter().enumerate().map(|(li, &k)| (z[k] - center[li]).powi(2)).sum();
                r2 <= radius * radius + eps
            }
        };
        if keep {
            out.push(z);
        }
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    if out.is_empty() {
        return Err(Error::EmptyCenterSet);
    }
    Ok(out)
}

/// Random Fourier features `sqrt(2/n) cos(w_j . x + b_j)` approximating a Gaussian kernel.
///
/// Kept only to contrast with the compact basis: these features do not vanish away from the
/// data, so a fitted barrier can turn positive far outside its training domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineFeatures {
    pub dim: usize,
    /// Row-major `n x dim` frequencies.
    pub omegas: Vec<f64>,
    pub phases: Vec<f64>,
}

impl CosineFeatures {
    pub fn new(dim: usize, count: usize, lengthscale: f64, seed: u64) -> Result<Self> {
        if count == 0 || !(lengthscale > 0.0) || dim == 0 || dim > MAX_STATE {
            return Err(Error::DimensionMismatch(format!("cosine features: dim {dim}, count {count}, lengthscale {lengthscale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / lengthscale).expect("positive scale");
        let omegas = (0..count * dim).map(|_| normal.sample(&mut rng)).collect();
        let phases = (0..count).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        Ok(CosineFeatures { dim, omegas, phases })
    }
}

impl FeatureMap for CosineFeatures {
    fn num_features(&self) -> usize {
        self.phases.len()
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut Vec<FeatureEval>) {
        let amp = (2.0 / self.phases.len() as f64).sqrt();
        for (j, b) in self.phases.iter().enumerate() {
            let w = &self.omegas[j * self.dim..(j + 1) * self.dim];
            let arg: f64 = w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b;
            let (sn, cs) = arg.sin_cos();
            let mut grad = [0.0; MAX_STATE];
            for k in 0..self.dim {
                grad[k] = -amp * sn * w[k];
            }
            out.push(FeatureEval { index: j, value: amp * cs, grad });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn wendland_values() {
        assert!((wendland_eval(0.0, 1.0) - 0.05).abs() < 1e-17);
        assert!((wendland_eval(0.5, 1.0) - 0.009375).abs() < 1e-17);
        assert_eq!(wendland_eval(1.0, 1.0), 0.0);
        assert_eq!(wendland_eval(3.0, 1.0), 0.0);
        assert!((wendland_eval(1.0, 2.0) - 0.009375).abs() < 1e-17);
    }

    #[test]
    fn slope_vanishes_at_support_edge() {
        let mut prev = f64::INFINITY;
        for k in 2..8 {
            let h = 10f64.powi(-k);
            let slope = (wendland_eval(1.0, 1.0) - wendland_eval(1.0 - h, 1.0)) / h;
            assert!(slope.abs() < prev);
            prev = slope.abs();
        }
        assert!(prev < 1e-20);
    }

    fn basis3() -> CsRbfBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = (0..5).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-PI..PI)]).collect();
        CsRbfBasis::new(centers, 1.0, vec![false, false, true]).unwrap()
    }

    #[test]
    fn phi_vec_matches_scalar_loop() {
        let b = basis3();
        let x = [0.1, -0.2, 3.0];
        let v = b.phi_vec(&x);
        for j in 0..5 {
            let z = b.center(j);
            let dth = {
                let mut d = x[2] - z[2];
                while d >= PI {
                    d -= 2.0 * PI;
                }
                while d < -PI {
                    d += 2.0 * PI;
                }
                d
            };
            let r = ((x[0] - z[0]).powi(2) + (x[1] - z[1]).powi(2) + dth * dth).sqrt();
            let t: f64 = r;
            let naive = if t < 1.0 { (1.0 - t).powi(4) * (1.0 + 4.0 * t) / 20.0 } else { 0.0 };
            assert!((v[j] - naive).abs() < 1e-15);
        }
        let sparse = b.eval_sparse(&x);
        for e in sparse {
            assert!((e.value - v[e.index]).abs() < 1e-16);
        }
    }

    #[test]
    fn cell_index_matches_full_scan() {
        let centers =
            grid_centers(&CenterDomain::Ball { center: vec![0.3, -0.2], radius: 1.1 }, &[0.25, 0.25, 0.4], &[false, false, true]).unwrap();
        let b = CsRbfBasis::new(centers, 0.9, vec![false, false, true]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let x = [rng.gen_range(-2.5..3.0), rng.gen_range(-2.5..2.5), rng.gen_range(-PI..PI)];
            let dense = b.phi_vec(&x);
            let sparse = b.eval_sparse(&x);
            let nz = dense.iter().filter(|v| **v != 0.0).count();
            assert_eq!(sparse.len(), nz);
            for e in sparse {
                assert!((e.value - dense[e.index]).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn center_and_far_points() {
        let b = CsRbfBasis::new(vec![vec![0.0, 0.0], vec![5.0, 0.0]], 1.0, vec![false, false]).unwrap();
        assert_eq!(b.phi_vec(&[0.0, 0.0]), vec![0.05, 0.0]);
        assert_eq!(b.phi_vec(&[2.5, 2.0]), vec![0.0, 0.0]);
        let jac = b.phi_jacobian(&[0.0, 0.0]);
        assert_eq!(jac[0], vec![0.0, 0.0]);
        assert_eq!(jac[1], vec![0.0, 0.0]);
    }

    /// Central finite differences, step 1e-6, compared with the analytic Jacobian.
    fn fd_check(b: &CsRbfBasis, x: &[f64]) -> f64 {
        let jac = b.phi_jacobian(x);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..b.dim {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let (fp, fm) = (b.phi_vec(&xp), b.phi_vec(&xm));
            for j in 0..b.len() {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                let an = jac[j][k];
                let scale = an.abs().max(1e-3);
                worst = worst.max((fd - an).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let b = basis3();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-PI..PI)];
            assert!(fd_check(&b, &x) < 1e-5);
        }
    }

    #[test]
    fn grid_examples() {
        let box_c = grid_centers(&CenterDomain::Box { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }, &[0.5, 0.5], &[false, false]).unwrap();
        assert_eq!(box_c.len(), 9);
        let ball = grid_centers(&CenterDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 }, &[0.5, 0.5], &[false, false]).unwrap();
        assert_eq!(ball.len(), 13);
        assert!(ball.iter().all(|z| z[0].hypot(z[1]) <= 1.0 + 1e-12));
        let ang = grid_centers(
            &CenterDomain::Box { lo: vec![0.0, 0.0], hi: vec![0.0 + 0.5, 0.5] },
            &[0.5, 0.5, FRAC_PI_2],
            &[false, false, true],
        )
        .unwrap();
        let mut thetas: Vec<f64> = ang.iter().map(|z| z[2]).collect();
        thetas.sort_by(f64::total_cmp);
        thetas.dedup();
        assert_eq!(thetas.len(), 4);
        assert!((thetas[0] + PI).abs() < 1e-15);
        assert!(thetas.iter().all(|&t| t < PI));
        assert!(grid_centers(&CenterDomain::Box { lo: vec![0.0, 0.0], hi: vec![0.2, 1.0] }, &[0.5, 0.5], &[false, false]).is_err());
    }

    proptest! {
        #[test]
        fn compact_support_and_nonnegativity(x in prop::array::uniform3(-3.0f64..3.0), z in prop::array::uniform3(-3.0f64..3.0), s in 0.1f64..2.0) {
            let b = CsRbfBasis::new(vec![z.to_vec()], s, vec![false; 3]).unwrap();
            let v = b.phi_vec(&x)[0];
            prop_assert!((0.0..=0.05).contains(&v));
            if b.distance(&x, &z) >= s {
                prop_assert_eq!(v, 0.0);
                prop_assert_eq!(b.phi_jacobian(&x)[0].clone(), vec![0.0; 3]);
            }
        }
    }
}
