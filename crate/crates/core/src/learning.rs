//! Local barrier learning: dataset construction, the learning QP, and post-solve checks.
//!
//! A local barrier is `h(x) = theta^T phi_s(x, Z) - b`. The weights are the minimum-norm
//! solution of a QP with three row families:
//!
//! * safe rows `theta^T phi(x) >= gamma_safe + b` on the safe set,
//! * unsafe rows `theta^T phi(x) <= b - gamma_unsafe` on unsafe samples,
//! * derivative rows `(D phi(x) (f + g u) + kappa phi(x))^T theta >= gamma_dyn + kappa b` on
//!   every oracle pair.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{grid_centers, CenterDomain, CsRbfBasis, FeatureEval, FeatureMap};
use crate::dynamics::{ControlAffineSystem, MAX_STATE};
use crate::environment::{Measurement, Point};
use crate::error::{Error, Result};
use crate::oracle::OracleOutput;
use crate::par::{self, Execution};
use crate::qp::{DualActiveSet, QpOptions, SparseRows};

pub const TAG_SAFE: u32 = 0;
pub const TAG_UNSAFE: u32 = 1;
pub const TAG_DYN: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnHyperParams {
    #[serde(default = "d_gamma_safe")]
    pub gamma_safe: f64,
    #[serde(default = "d_gamma_safe")]
    pub gamma_unsafe: f64,
    #[serde(default = "d_gamma_dyn")]
    pub gamma_dyn: f64,
    #[serde(default = "d_b")]
    pub b: f64,
    /// Linear class-K gain, `alpha(h) = kappa h`.
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    /// Width of the negativity shell beyond the outermost centers; `0.1 s` when unset.
    #[serde(default)]
    pub shell_width: Option<f64>,
    /// Voxel size for thinning scan unsafe points.
    #[serde(default = "d_unsafe_spacing")]
    pub unsafe_spacing: f64,
    /// Lattice step of the exterior negativity samples.
    #[serde(default = "d_exterior_spacing")]
    pub exterior_spacing: f64,
    /// Heading samples used to lift planar unsafe points.
    #[serde(default = "d_theta_samples")]
    pub theta_samples: usize,
    /// Superlevel-set samples drawn per containment round.
    #[serde(default = "d_containment_samples")]
    pub containment_samples: usize,
    /// Radial slack required of superlevel samples during refinement.
    #[serde(default = "d_containment_margin")]
    pub containment_margin: f64,
    #[serde(default = "d_refine_rounds")]
    pub refine_rounds: usize,
    #[serde(default = "d_qp_max_iter")]
    pub qp_max_iter: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_gamma_safe() -> f64 {
    5e-4
}
fn d_gamma_dyn() -> f64 {
    1e-3
}
fn d_b() -> f64 {
    0.01
}
fn d_kappa() -> f64 {
    1.0
}
fn d_unsafe_spacing() -> f64 {
    0.05
}
fn d_exterior_spacing() -> f64 {
    0.1
}
fn d_theta_samples() -> usize {
    16
}
fn d_containment_samples() -> usize {
    20_000
}
fn d_containment_margin() -> f64 {
    0.01
}
fn d_refine_rounds() -> usize {
    12
}
fn d_qp_max_iter() -> usize {
    50_000
}

impl Default for LearnHyperParams {
    fn default() -> Self {
        LearnHyperParams {
            gamma_safe: d_gamma_safe(),
            gamma_unsafe: d_gamma_safe(),
            gamma_dyn: d_gamma_dyn(),
            b: d_b(),
            kappa: d_kappa(),
            shell_width: None,
            unsafe_spacing: d_unsafe_spacing(),
            exterior_spacing: d_exterior_spacing(),
            theta_samples: d_theta_samples(),
            containment_samples: d_containment_samples(),
            containment_margin: d_containment_margin(),
            refine_rounds: d_refine_rounds(),
            qp_max_iter: d_qp_max_iter(),
            seed: 0,
        }
    }
}

impl LearnHyperParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("gamma_safe", self.gamma_safe),
            ("gamma_unsafe", self.gamma_unsafe),
            ("gamma_dyn", self.gamma_dyn),
            ("b", self.b),
            ("kappa", self.kappa),
            ("unsafe_spacing", self.unsafe_spacing),
            ("exterior_spacing", self.exterior_spacing),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("learning.{name} must be positive, got {v}")));
            }
        }
        if let Some(w) = self.shell_width {
            if !(w > 0.0) {
                return Err(Error::Config(format!("learning.shell_width must be positive, got {w}")));
            }
        }
        if self.theta_samples == 0 {
            return Err(Error::Config("learning.theta_samples must be at least 1".into()));
        }
        if self.containment_margin < 0.0 {
            return Err(Error::Config("learning.containment_margin must be non-negative".into()));
        }
        Ok(())
    }

    /// Margins shrunk tenfold, used for a single retry after an infeasible solve.
    pub fn relaxed(&self) -> Self {
        LearnHyperParams {
            gamma_safe: self.gamma_safe * 0.1,
            gamma_unsafe: self.gamma_unsafe * 0.1,
            gamma_dyn: self.gamma_dyn * 0.1,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "d_support")]
    pub support: f64,
    /// Center lattice step per state dimension; empty means the per-system default.
    #[serde(default)]
    pub spacing: Vec<f64>,
    /// Centers fill the scan disk grown by this much.
    #[serde(default)]
    pub center_padding: f64,
}

fn d_support() -> f64 {
    1.0
}

impl BasisConfig {
    pub fn resolved(mut self, sys: &ControlAffineSystem) -> Self {
        if self.spacing.is_empty() {
            self.spacing = Self::for_system(sys).spacing;
        }
        self
    }

    pub fn for_system(sys: &ControlAffineSystem) -> Self {
        let spacing = if sys.state_dim() == 3 { vec![0.25, 0.25, TAU / 16.0] } else { vec![0.1, 0.1] };
        BasisConfig { support: 1.0, spacing, center_padding: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningDatasets {
    pub safe: Vec<Sample>,
    pub buffer: Vec<Sample>,
    pub unsafe_states: Vec<Vec<f64>>,
}

impl LearningDatasets {
    /// Concatenates datasets, dropping unsafe states that some region claims as free.
    pub fn union<'a, I: IntoIterator<Item = &'a LearningDatasets>>(parts: I, region: &dyn SafeRegion) -> Self {
        let mut out = LearningDatasets::default();
        for p in parts {
            out.safe.extend(p.safe.iter().cloned());
            out.buffer.extend(p.buffer.iter().cloned());
            out.unsafe_states.extend(p.unsafe_states.iter().filter(|x| region.depth([x[0], x[1]]) <= 0.0).cloned());
        }
        out
    }
}

/// Observed free space in `q`: positive depth inside, non-positive outside.
pub trait SafeRegion: Sync {
    fn depth(&self, q: Point) -> f64;
}

impl SafeRegion for Measurement {
    fn depth(&self, q: Point) -> f64 {
        self.safe_depth(q)
    }
}

impl SafeRegion for [Measurement] {
    fn depth(&self, q: Point) -> f64 {
        self.iter().map(|m| m.safe_depth(q)).fold(f64::NEG_INFINITY, f64::max)
    }
}

impl SafeRegion for Vec<Measurement> {
    fn depth(&self, q: Point) -> f64 {
        self.as_slice().depth(q)
    }
}

fn headings(n: usize) -> Vec<f64> {
    (0..n).map(|k| -PI + TAU * k as f64 / n as f64).collect()
}

fn lift(q: Point, dim: usize, thetas: &[f64], out: &mut Vec<Vec<f64>>) {
    if dim == 2 {
        out.push(vec![q[0], q[1]]);
    } else {
        for &th in thetas {
            out.push(vec![q[0], q[1], th]);
        }
    }
}

fn voxel_thin<'a, I: IntoIterator<Item = &'a Point>>(pts: I, h: f64) -> Vec<Point> {
    let mut seen = BTreeSet::new();
    pts.into_iter().filter(|p| seen.insert(((p[0] / h).floor() as i64, (p[1] / h).floor() as i64))).copied().collect()
}

/// Largest `q`-distance from the scan center to any center.
fn outer_center_radius(basis: &CsRbfBasis, c: Point) -> f64 {
    (0..basis.len())
        .map(|j| {
            let z = basis.center(j);
            (z[0] - c[0]).hypot(z[1] - c[1])
        })
        .fold(0.0, f64::max)
}

/// Splits oracle pairs into safe and buffer sets and collects unsafe samples: scan unsafe,
/// occluded and boundary points, negativity-shell points, and an exterior ring out to one
/// support radius past the outermost center, lifted over headings when needed.
pub fn build_datasets(oracle: &OracleOutput, meas: &Measurement, basis: &CsRbfBasis, hp: &LearnHyperParams) -> Result<LearningDatasets> {
    if oracle.is_empty() {
        return Err(Error::EmptyOracleOutput { margin: oracle.margin });
    }
    let mut ds = LearningDatasets::default();
    for p in &oracle.pairs {
        let s = Sample { x: p.x.clone(), u: p.u.clone() };
        if p.value > 2.0 * oracle.margin {
            ds.safe.push(s);
        } else {
            ds.buffer.push(s);
        }
    }
    if ds.safe.is_empty() {
        return Err(Error::EmptySafeSet);
    }
    let dim = basis.dim;
    let thetas = headings(hp.theta_samples);
    let c = meas.center_q();
    let s = basis.support;
    let rc = outer_center_radius(basis, c);
    let mut qs: Vec<Point> = voxel_thin(meas.all_unsafe(), hp.unsafe_spacing);
    // Shell rings just past the outermost centers, at center-like angular density.
    let shell = hp.shell_width.unwrap_or(0.1 * s);
    let step = hp.exterior_spacing;
    for k in 0..=2 {
        let rho = rc + shell * k as f64 / 2.0;
        let n = ((TAU * rho / step).ceil() as usize).max(8);
        for a in 0..n {
            let ang = TAU * a as f64 / n as f64;
            qs.push([c[0] + rho * ang.cos(), c[1] + rho * ang.sin()]);
        }
    }
    let k = ((rc + s) / step).ceil() as i64;
    for i in -k..=k {
        for j in -k..=k {
            let q = [c[0] + i as f64 * step, c[1] + j as f64 * step];
            let rho = (i as f64 * step).hypot(j as f64 * step);
            if rho > meas.scan_radius && rho <= rc + s {
                qs.push(q);
            }
        }
    }
    for q in qs {
        if meas.safe_depth(q) <= 0.0 {
            lift(q, dim, &thetas, &mut ds.unsafe_states);
        }
    }
    ds.unsafe_states.extend(oracle.doomed.iter().cloned());
    Ok(ds)
}

/// Assembled learning QP: `min 1/2 ||theta||^2` subject to `rows`.
#[derive(Debug, Clone)]
pub struct LearningQp {
    pub n: usize,
    pub rows: SparseRows,
}

fn unsafe_rows(features: &dyn FeatureMap, xs: &[Vec<f64>], hp: &LearnHyperParams, exec: Execution) -> SparseRows {
    let evals = par::map_slice(exec, xs, |x| features.eval_sparse(x));
    let mut rows = SparseRows::new();
    for f in evals {
        rows.push(f.iter().map(|e| (e.index, -e.value)), hp.gamma_unsafe - hp.b, TAG_UNSAFE);
    }
    rows
}

fn dyn_entries(features: &dyn FeatureMap, sys: &ControlAffineSystem, s: &Sample, kappa: f64) -> Vec<(usize, f64)> {
    let xdot = sys.vector_field(&s.x, &s.u);
    let dim = features.state_dim();
    features
        .eval_sparse(&s.x)
        .into_iter()
        .map(|e| {
            let lie: f64 = (0..dim).map(|k| e.grad[k] * xdot[k]).sum();
            (e.index, lie + kappa * e.value)
        })
        .collect()
}

/// Learning rows for any feature family; the compactly-supported basis is the intended one.
pub fn assemble_qp(
    ds: &LearningDatasets,
    features: &dyn FeatureMap,
    sys: &ControlAffineSystem,
    hp: &LearnHyperParams,
    exec: Execution,
) -> Result<LearningQp> {
    let dim = features.state_dim();
    let bad = ds.safe.iter().chain(&ds.buffer).any(|s| s.x.len() != dim || s.u.len() != sys.input_dim())
        || ds.unsafe_states.iter().any(|x| x.len() != dim)
        || dim != sys.state_dim();
    if bad {
        return Err(Error::DimensionMismatch("dataset, basis and system dimensions disagree".into()));
    }
    let mut rows = SparseRows::new();
    let safe: Vec<Vec<FeatureEval>> = par::map_slice(exec, &ds.safe, |s| features.eval_sparse(&s.x));
    for f in safe {
        rows.push(f.iter().map(|e| (e.index, e.value)), hp.gamma_safe + hp.b, TAG_SAFE);
    }
    rows.append(&unsafe_rows(features, &ds.unsafe_states, hp, exec));
    let pairs: Vec<&Sample> = ds.safe.iter().chain(&ds.buffer).collect();
    let dyn_rows = par::map_slice(exec, &pairs, |s| dyn_entries(features, sys, s, hp.kappa));
    for e in dyn_rows {
        rows.push(e, hp.gamma_dyn + hp.kappa * hp.b, TAG_DYN);
    }
    Ok(LearningQp { n: features.num_features(), rows })
}

/// Axis-aligned validity domain over the linear coordinates; angular coordinates are
/// unrestricted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub angular: Vec<bool>,
}

impl ValidityDomain {
    /// Box hull of the centers grown by `pad` on every linear axis.
    pub fn hull(basis: &CsRbfBasis, pad: f64) -> Self {
        let dim = basis.dim;
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        for k in 0..dim {
            if basis.angular[k] {
                lo[k] = -PI;
                hi[k] = PI;
                continue;
            }
            lo[k] = (0..basis.len()).map(|j| basis.center(j)[k]).fold(f64::INFINITY, f64::min) - pad;
            hi[k] = (0..basis.len()).map(|j| basis.center(j)[k]).fold(f64::NEG_INFINITY, f64::max) + pad;
        }
        ValidityDomain { lo, hi, angular: basis.angular.clone() }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.lo.len()).all(|k| self.angular[k] || (x[k] >= self.lo[k] && x[k] <= self.hi[k]))
    }

    /// Euclidean distance from an interior point to the domain boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        (0..self.lo.len()).filter(|&k| !self.angular[k]).map(|k| (x[k] - self.lo[k]).min(self.hi[k] - x[k])).fold(f64::INFINITY, f64::min)
    }

    /// Draws a uniform point of the domain box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.lo.len()).map(|k| rng.gen_range(self.lo[k]..self.hi[k])).collect()
    }
}

/// A learned local barrier `h(x) = theta^T phi(x) - b`, valid on `domain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCbf {
    pub basis: CsRbfBasis,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub domain: ValidityDomain,
    pub scan_index: usize,
    /// Footprint of the scan that produced this barrier (ranges only, no point sets).
    pub scan: Measurement,
    pub scan_hash: String,
    pub stats: FitStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub safe_rows: usize,
    pub unsafe_rows: usize,
    pub dyn_rows: usize,
    pub refinement_rows: usize,
    pub qp_iterations: usize,
    pub active_rows: usize,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_safe_residual: f64,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_unsafe_residual: f64,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_dyn_residual: f64,
    pub refinement_rounds: usize,
    /// Superlevel samples outside the scan in the last refinement round.
    pub containment_misses: usize,
}

impl LocalCbf {
    pub fn value(&self, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return -self.bias;
        }
        let mut acc = -self.bias;
        for e in self.basis.eval_sparse(x) {
            acc += self.weights[e.index] * e.value;
        }
        acc
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, [f64; MAX_STATE]) {
        let mut g = [0.0; MAX_STATE];
        if !self.domain.contains(x) {
            return (-self.bias, g);
        }
        let mut acc = -self.bias;
        for e in self.basis.eval_sparse(x) {
            let w = self.weights[e.index];
            acc += w * e.value;
            for k in 0..self.basis.dim {
                g[k] += w * e.grad[k];
            }
        }
        (acc, g)
    }

    /// Positive-weight centers closer than `s` to the domain boundary.
    pub fn decay_buffer_violations(&self) -> Vec<usize> {
        decay_violations(&self.basis, &self.weights, &self.domain)
    }
}

fn decay_violations(basis: &CsRbfBasis, w: &[f64], dom: &ValidityDomain) -> Vec<usize> {
    (0..basis.len()).filter(|&j| w[j] > 0.0 && dom.boundary_distance(basis.center(j)) < basis.support - 1e-12).collect()
}

/// Timing and outcome of a single learn call (kept apart from the deterministic artifact).
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub cbf: LocalCbf,
    pub datasets: LearningDatasets,
    pub seconds: f64,
    /// Part of `seconds` spent inside the QP solver.
    pub qp_seconds: f64,
}

/// Result of [`fit_weights`]. The clock readings are kept out of `stats` so that artifacts
/// stay deterministic.
#[derive(Debug, Clone)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub stats: FitStats,
    pub qp_seconds: f64,
}

pub fn centers_for_scan(meas: &Measurement, sys: &ControlAffineSystem, cfg: &BasisConfig) -> Result<CsRbfBasis> {
    let domain = CenterDomain::Ball { center: meas.center_q().to_vec(), radius: meas.scan_radius + cfg.center_padding };
    let angular = sys.angular_dims();
    let centers = grid_centers(&domain, &cfg.spacing, &angular)?;
    CsRbfBasis::new(centers, cfg.support, angular)
}

/// Centers on one global lattice spanning several scans, kept where they fall in some scan disk.
pub fn centers_for_scans(scans: &[Measurement], sys: &ControlAffineSystem, cfg: &BasisConfig) -> Result<CsRbfBasis> {
    if scans.is_empty() {
        return Err(Error::EmptyCenterSet);
    }
    let angular = sys.angular_dims();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for m in scans {
        let c = m.center_q();
        let r = m.scan_radius + cfg.center_padding;
        for k in 0..2 {
            lo[k] = lo[k].min(c[k] - r);
            hi[k] = hi[k].max(c[k] + r);
        }
    }
    for k in 0..2 {
        lo[k] = (lo[k] / cfg.spacing[k]).floor() * cfg.spacing[k];
    }
    let domain = CenterDomain::Box { lo: lo.to_vec(), hi: hi.to_vec() };
    let centers: Vec<Vec<f64>> = grid_centers(&domain, &cfg.spacing, &angular)?
        .into_iter()
        .filter(|z| {
            scans.iter().any(|m| {
                let c = m.center_q();
                (z[0] - c[0]).hypot(z[1] - c[1]) <= m.scan_radius + cfg.center_padding + 1e-9
            })
        })
        .collect();
    CsRbfBasis::new(centers, cfg.support, angular)
}

/// Solves the learning QP, then tightens it until sampled superlevel points stay inside
/// `region` (each miss becomes an extra unsafe row and the dual solve resumes).
#[allow(clippy::too_many_arguments)]
pub fn fit_weights(
    ds: &LearningDatasets,
    basis: &CsRbfBasis,
    domain: &ValidityDomain,
    sys: &ControlAffineSystem,
    hp: &LearnHyperParams,
    region: &dyn SafeRegion,
    seed: u64,
    exec: Execution,
) -> Result<Fit> {
    let qp = assemble_qp(ds, basis, sys, hp, exec)?;
    let mut stats = FitStats {
        safe_rows: ds.safe.len(),
        unsafe_rows: ds.unsafe_states.len(),
        dyn_rows: ds.safe.len() + ds.buffer.len(),
        ..FitStats::default()
    };
    let opts = QpOptions { max_iter: hp.qp_max_iter, ..QpOptions::default() };
    let mut solver = DualActiveSet::new(qp.n, vec![0.0; qp.n], qp.rows, opts);
    let clock = Instant::now();
    let mut sol = solver.solve()?;
    let mut qp_seconds = clock.elapsed().as_secs_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas = headings(hp.theta_samples);
    let mut clean = 0;
    for round in 0..hp.refine_rounds {
        stats.refinement_rounds = round + 1;
        let probe = LocalCbfView { basis, weights: &sol.x, bias: hp.b, domain };
        let pts = sample_superlevel(&probe, hp.containment_samples, 40 * hp.containment_samples, &mut rng, exec);
        let misses: Vec<Vec<f64>> = pts.into_iter().filter(|x| region.depth([x[0], x[1]]) <= hp.containment_margin).collect();
        stats.containment_misses = misses.len();
        if misses.is_empty() {
            clean += 1;
            if clean >= 2 {
                break;
            }
            continue;
        }
        clean = 0;
        let mut extra = Vec::with_capacity(misses.len() * (thetas.len() + 1));
        for x in &misses {
            extra.push(x.clone());
            if basis.dim > 2 {
                lift([x[0], x[1]], basis.dim, &thetas, &mut extra);
            }
        }
        log::debug!("containment round {round}: {} misses, adding {} rows", misses.len(), extra.len());
        stats.refinement_rows += extra.len();
        solver.add_rows(&unsafe_rows(basis, &extra, hp, exec));
        let clock = Instant::now();
        sol = solver.solve()?;
        qp_seconds += clock.elapsed().as_secs_f64();
    }
    if stats.containment_misses > 0 {
        log::warn!("{} superlevel samples still leave the scanned region", stats.containment_misses);
    }
    let rows = solver.rows();
    let mut mins = [f64::INFINITY; 3];
    for i in 0..rows.len() {
        let r = rows.dot(i, &sol.x) - rows.rhs[i];
        let t = rows.tags[i] as usize;
        mins[t] = mins[t].min(r);
    }
    stats.min_safe_residual = mins[0];
    stats.min_unsafe_residual = mins[1];
    stats.min_dyn_residual = mins[2];
    stats.qp_iterations = sol.iterations;
    stats.active_rows = sol.active.len();
    Ok(Fit { weights: sol.x, stats, qp_seconds })
}

/// Borrowed barrier used while weights are still being refined.
struct LocalCbfView<'a> {
    basis: &'a CsRbfBasis,
    weights: &'a [f64],
    bias: f64,
    domain: &'a ValidityDomain,
}

trait Barrier: Sync {
    fn h(&self, x: &[f64]) -> f64;
    fn dom(&self) -> &ValidityDomain;
}

impl Barrier for LocalCbfView<'_> {
    fn h(&self, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return -self.bias;
        }
        self.basis.eval_sparse(x).iter().map(|e| self.weights[e.index] * e.value).sum::<f64>() - self.bias
    }
    fn dom(&self) -> &ValidityDomain {
        self.domain
    }
}

impl Barrier for LocalCbf {
    fn h(&self, x: &[f64]) -> f64 {
        self.value(x)
    }
    fn dom(&self) -> &ValidityDomain {
        &self.domain
    }
}

/// Rejection-samples up to `target` points of `{h >= 0}` from the domain box.
fn sample_superlevel<B: Barrier, R: Rng>(cbf: &B, target: usize, max_draws: usize, rng: &mut R, exec: Execution) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut drawn = 0;
    let batch = 8192;
    while out.len() < target && drawn < max_draws {
        let xs: Vec<Vec<f64>> = (0..batch).map(|_| cbf.dom().sample(rng)).collect();
        drawn += batch;
        let keep = par::map_slice(exec, &xs, |x| cbf.h(x) >= 0.0);
        out.extend(xs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(x, _)| x));
    }
    out.truncate(target);
    out
}

pub fn sample_superlevel_set(cbf: &LocalCbf, target: usize, seed: u64, exec: Execution) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_superlevel(cbf, target, 100 * target.max(1), &mut rng, exec)
}

/// Full learn step for one scan: centers, datasets, QP solve with containment refinement,
/// and the decay-buffer check (one retry with a grown domain).
#[allow(clippy::too_many_arguments)]
pub fn learn_local_cbf(
    meas: &Measurement,
    oracle: &OracleOutput,
    sys: &ControlAffineSystem,
    hp: &LearnHyperParams,
    basis_cfg: &BasisConfig,
    scan_index: usize,
    exec: Execution,
) -> Result<LearnOutcome> {
    hp.validate()?;
    let start = Instant::now();
    let basis = centers_for_scan(meas, sys, basis_cfg)?;
    let ds = build_datasets(oracle, meas, &basis, hp)?;
    let mut domain = ValidityDomain::hull(&basis, basis.support);
    let seed = hp.seed ^ (scan_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let Fit { weights, stats, qp_seconds } = fit_weights(&ds, &basis, &domain, sys, hp, meas, seed, exec)?;
    let mut viol = decay_violations(&basis, &weights, &domain);
    if !viol.is_empty() {
        let deficit = viol.iter().map(|&j| basis.support - domain.boundary_distance(basis.center(j))).fold(0.0, f64::max);
        log::warn!("decay buffer violated by {} centers; growing the domain by {deficit:.3}", viol.len());
        domain = ValidityDomain::hull(&basis, basis.support + deficit);
        viol = decay_violations(&basis, &weights, &domain);
        if !viol.is_empty() {
            return Err(Error::DecayBufferViolation { violations: viol.len() });
        }
    }
    let scan = footprint(meas);
    let cbf = LocalCbf { basis, weights, bias: hp.b, domain, scan_index, scan_hash: meas.hash_hex(), scan, stats };
    Ok(LearnOutcome { cbf, datasets: ds, seconds: start.elapsed().as_secs_f64(), qp_seconds })
}

/// The measurement with its point sets dropped; enough for region queries.
pub fn footprint(meas: &Measurement) -> Measurement {
    Measurement {
        scan_center: meas.scan_center.clone(),
        scan_radius: meas.scan_radius,
        ranges: meas.ranges.clone(),
        safe_points: Vec::new(),
        unsafe_points: Vec::new(),
        occluded_points: Vec::new(),
        boundary_points: Vec::new(),
    }
}

/// `<grad h, f> + u_max ||g^T grad h||_* + kappa h`: the best achievable derivative margin.
pub fn dual_norm_residual(cbf: &LocalCbf, sys: &ControlAffineSystem, x: &[f64], kappa: f64) -> f64 {
    let (h, g) = cbf.value_and_gradient(x);
    let dim = sys.state_dim();
    let f = sys.drift(x);
    let drift: f64 = (0..dim).map(|k| g[k] * f[k]).sum();
    let gp = sys.input_gain(x, &g[..dim]);
    drift + sys.input_set.u_max * sys.input_set.dual_norm(&gp[..sys.input_dim()]) + kappa * h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub decay_buffer_violations: usize,
    pub outside_samples: usize,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub outside_max_h: f64,
    pub negativity_outside: bool,
    /// Zero when `{h >= 0}` was never hit; such a barrier certifies nothing and fails.
    pub superlevel_samples: usize,
    pub residual_nonneg_fraction: f64,
    #[serde(with = "crate::artifacts::lenient_f64")]
    pub min_residual: f64,
    pub containment_misses: usize,
    pub containment: bool,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.decay_buffer_violations == 0 && self.negativity_outside && self.containment && self.superlevel_samples > 0
    }
}

/// Sampling audit of one barrier: decay buffer, negativity outside the domain, containment of
/// the superlevel set in the scan footprint, and the dual-norm derivative margin on it.
pub fn verify_local_cbf(
    cbf: &LocalCbf,
    sys: &ControlAffineSystem,
    kappa: f64,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> VerificationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outside = sample_outside(&cbf.domain, cbf.basis.support, n_samples, &mut rng);
    let hs = par::map_slice(exec, &outside, |x| cbf.value(x));
    let outside_max_h = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sup = sample_superlevel(cbf, n_samples, 100 * n_samples.max(1), &mut rng, exec);
    let res = par::map_slice(exec, &sup, |x| dual_norm_residual(cbf, sys, x, kappa));
    let nonneg = res.iter().filter(|&&r| r >= 0.0).count();
    let misses = sup.iter().filter(|x| !cbf.scan.contains_safe([x[0], x[1]])).count();
    VerificationReport {
        decay_buffer_violations: cbf.decay_buffer_violations().len(),
        outside_samples: outside.len(),
        outside_max_h,
        negativity_outside: outside_max_h <= -cbf.bias + 1e-9,
        superlevel_samples: sup.len(),
        residual_nonneg_fraction: if sup.is_empty() { 1.0 } else { nonneg as f64 / sup.len() as f64 },
        min_residual: res.iter().copied().fold(f64::INFINITY, f64::min),
        containment_misses: misses,
        containment: misses == 0,
    }
}

/// Uniform samples from a box one support radius larger than `dom`, outside `dom`.
pub fn sample_outside<R: Rng>(dom: &ValidityDomain, pad: f64, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let grown = ValidityDomain {
        lo: dom.lo.iter().zip(&dom.angular).map(|(v, &a)| if a { *v } else { v - pad }).collect(),
        hi: dom.hi.iter().zip(&dom.angular).map(|(v, &a)| if a { *v } else { v + pad }).collect(),
        angular: dom.angular.clone(),
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = grown.sample(rng);
        if !dom.contains(&x) {
            out.push(x);
        }
    }
    out
}
