//! Growth exponents, subordinate solutions, the truncated Weyl function and
//! the local dimension of the spectral measure.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::comb::{CombSpec, Realization};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::linalg::{harmonic_numbers, ls_slope, median, quantile, Mat2};
use crate::path::{Propagator, SolutionPath};
use crate::prufer::{boundary_data, companion_data, trace_from, PruferTrace};
use crate::transfer::{
    free_gram, free_mat, partial_block_value, unperturbed_block_value, PropagationState,
    ScaledTransfer, ELLIPTIC_MAX,
};

/// Radius around excluded energies and window endpoints inside which no
/// estimate is produced.
pub const GUARD_RADIUS: f64 = 1e-6;

/// Blocks discarded before exponent fits.
pub const FIT_BURN_IN: usize = 100;

/// Sample points per decade in log-spaced fits.
pub const FIT_POINTS_PER_DECADE: usize = 40;

/// Energies where `φ ∈ {π/4, π/2, 3π/4}`.
pub fn excluded_energies() -> [f64; 3] {
    let r2 = 2f64.sqrt();
    [3.0 * (2.0 - r2) / 5.0, 6.0 / 5.0, 3.0 * (2.0 + r2) / 5.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowJ {
    pub lambda: f64,
    pub lower: f64,
    pub upper: f64,
    pub excluded: [f64; 3],
}

pub fn spectral_window(lambda: f64) -> Result<WindowJ> {
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::Domain(format!(
            "lambda = {lambda} outside (0, 2); the window J(lambda) is empty"
        )));
    }
    let w = 3.0 * (4.0 - lambda * lambda).sqrt();
    Ok(WindowJ {
        lambda,
        lower: (6.0 - w) / 5.0,
        upper: (6.0 + w) / 5.0,
        excluded: excluded_energies(),
    })
}

impl WindowJ {
    pub fn contains(&self, e: f64) -> bool {
        e > self.lower && e < self.upper
    }

    /// The excluded point or endpoint within [`GUARD_RADIUS`] of `e`, if any.
    pub fn guard_hit(&self, e: f64) -> Option<f64> {
        self.excluded
            .iter()
            .chain([self.lower, self.upper].iter())
            .copied()
            .find(|x| (e - x).abs() < GUARD_RADIUS)
    }
}

/// Excluded point within [`GUARD_RADIUS`] of `e`, if any.
pub fn excluded_hit(e: f64) -> Option<f64> {
    excluded_energies()
        .into_iter()
        .find(|x| (e - x).abs() < GUARD_RADIUS)
}

/// `β = 9λ²/(120E − 50E²)`, equal to `λ²/(8 sin²φ)`.
pub fn beta_theory(e: f64, lambda: f64) -> f64 {
    9.0 * lambda * lambda / (120.0 * e - 50.0 * e * e)
}

fn alpha_formula(e: f64, lambda: f64) -> f64 {
    1.0 - 9.0 * lambda * lambda / (60.0 * e - 25.0 * e * e)
}

/// `α(E, λ) = 1 − 9λ²/(60E − 25E²)` for `E ∈ J(λ)`.
pub fn alpha_theory(e: f64, lambda: f64) -> Result<f64> {
    let w = spectral_window(lambda)?;
    if !w.contains(e) {
        return Err(Error::Domain(format!(
            "E = {e} outside J({lambda}) = ({}, {})",
            w.lower, w.upper
        )));
    }
    Ok(alpha_formula(e, lambda))
}

/// `α/(2 − α)`.
pub fn alpha_tilde(alpha: f64) -> f64 {
    alpha / (2.0 - alpha)
}

/// The two energies in `J(λ)` with `α(E, λ) = alpha`.
pub fn invert_alpha(alpha: f64, lambda: f64) -> Result<(f64, f64)> {
    spectral_window(lambda)?;
    let top = 1.0 - lambda * lambda / 4.0;
    if !(alpha > 0.0 && alpha < top) {
        return Err(Error::Domain(format!(
            "alpha = {alpha} outside (0, 1 - lambda^2/4) = (0, {top})"
        )));
    }
    let d = 3.0 * (4.0 - lambda * lambda / (1.0 - alpha)).sqrt();
    Ok(((6.0 - d) / 5.0, (6.0 + d) / 5.0))
}

/// Log-spaced distinct indices in `[lo, hi]`, both ends included.
pub fn log_grid(lo: usize, hi: usize, per_decade: usize) -> Vec<usize> {
    assert!(lo >= 1 && hi >= lo);
    let decades = (hi as f64 / lo as f64).log10();
    let k = ((decades * per_decade as f64).ceil() as usize).max(1);
    let mut out: Vec<usize> = (0..=k)
        .map(|j| (lo as f64 * (hi as f64 / lo as f64).powf(j as f64 / k as f64)).round() as usize)
        .map(|n| n.clamp(lo, hi))
        .collect();
    out.dedup();
    out
}

fn fit_range(n: usize) -> Result<Vec<usize>> {
    if n < 10 * FIT_BURN_IN {
        return Err(Error::Input(format!(
            "trace of {n} blocks is too short for a fit past burn-in {FIT_BURN_IN}"
        )));
    }
    Ok(log_grid(FIT_BURN_IN, n, FIT_POINTS_PER_DECADE))
}

/// Least-squares slope of `ln R_n` against `x(n)` on the log grid.
fn trace_slope(trace: &PruferTrace, x: impl Fn(usize) -> f64) -> Result<f64> {
    let grid = fit_range(trace.len())?;
    let xs: Vec<f64> = grid.iter().map(|&n| x(n)).collect();
    let ys: Vec<f64> = grid.iter().map(|&n| trace.points[n].log_r).collect();
    Ok(ls_slope(&xs, &ys))
}

/// Slope of `ln R_n` against the harmonic sum `H_n`.
pub fn harmonic_slope(trace: &PruferTrace, h: &[f64]) -> Result<f64> {
    trace_slope(trace, |n| h[n])
}

/// Slope of `ln R_n` against `ln n`.
pub fn log_slope(trace: &PruferTrace) -> Result<f64> {
    trace_slope(trace, |n| (n as f64).ln())
}

/// Slope of `ln ||u||^2_{b_n}` against `ln n` over `[max(burn-in, N/10), N]`.
/// The norm is cumulative and remembers the early blocks, so the log-grid
/// from the exponent fits would flatten it.
pub fn norm_sq_slope(trace: &PruferTrace) -> Result<f64> {
    let n = trace.len();
    fit_range(n)?;
    let grid = log_grid(FIT_BURN_IN.max(n / 10), n, FIT_POINTS_PER_DECADE);
    let xs: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = grid.iter().map(|&n| trace.path.norms[n].ln()).collect();
    Ok(ls_slope(&xs, &ys))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExponentEstimate {
    pub energy: f64,
    pub lambda: f64,
    pub beta_hat: f64,
    pub beta_theory: f64,
    pub alpha_hat: f64,
    pub alpha_theory: f64,
    pub n_used: usize,
    pub realizations_used: usize,
    /// Interquartile range of the per-trace slopes.
    pub dispersion: f64,
    pub slopes: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Median over traces of the `ln R_n` vs `H_n` regression slope.
pub fn estimate_beta(traces: &[PruferTrace]) -> Result<ExponentEstimate> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("no traces to estimate from".into()))?;
    let (e, lambda, n) = (first.energy, first.lambda, first.len());
    if traces
        .iter()
        .any(|t| t.energy != e || t.lambda != lambda || t.len() != n)
    {
        return Err(Error::Input("traces must share energy, lambda and length".into()));
    }
    if n < 10_000 {
        return Err(Error::Input(format!("traces of {n} blocks; need at least 10^4")));
    }
    let h = harmonic_numbers(n);
    let slopes = traces
        .iter()
        .map(|t| harmonic_slope(t, &h))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExponentEstimate::from_slopes(e, lambda, n, slopes))
}

impl ExponentEstimate {
    /// Aggregates per-trace `H_n` slopes (traces of `n` blocks at `(e, lambda)`).
    pub fn from_slopes(e: f64, lambda: f64, n: usize, slopes: Vec<f64>) -> Self {
        let mut warnings = Vec::new();
        if slopes.len() < 10 {
            warnings.push(format!(
                "low confidence: {} traces (fewer than 10)",
                slopes.len()
            ));
        }
        let beta_hat = median(&slopes);
        ExponentEstimate {
            energy: e,
            lambda,
            beta_hat,
            beta_theory: beta_theory(e, lambda),
            alpha_hat: 1.0 - 2.0 * beta_hat,
            alpha_theory: alpha_formula(e, lambda),
            n_used: n,
            realizations_used: slopes.len(),
            dispersion: quantile(&slopes, 0.75) - quantile(&slopes, 0.25),
            slopes,
            warnings,
        }
    }
}

/// Singular structure of a log-scaled 2×2 transfer matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SingularSplit {
    /// Angle in `[0, π)` of the right singular vector of the smaller
    /// singular value.
    pub minor_angle: f64,
    pub log_sigma_max: f64,
    pub log_sigma_min: f64,
}

pub fn singular_split(t: &ScaledTransfer<f64>) -> Result<SingularSplit> {
    let m = &t.mat.m.a;
    let p = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let q = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let r = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let disc = ((p - q) * (p - q) + 4.0 * r * r).sqrt();
    let big = 0.5 * (p + q + disc);
    let det = t.mat.m.det();
    let small = det * det / big;
    let (s_max, s_min) = (big.sqrt(), small.sqrt());
    let rel = (s_max - s_min) / s_max;
    if rel < 1e-6 {
        return Err(Error::IndeterminateDirection { rel });
    }
    let major = 0.5 * (2.0 * r).atan2(p - q);
    Ok(SingularSplit {
        minor_angle: (major + FRAC_PI_2).rem_euclid(PI),
        log_sigma_max: s_max.ln() + t.log_scale,
        log_sigma_min: s_min.ln() + t.log_scale,
    })
}

/// Distance between two angles modulo `π`.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubordinateDirection {
    /// Angle of `(u(0), u'(0))` in `[0, π)`.
    pub angle: f64,
    pub n_probe: usize,
    pub converged: bool,
    /// `(depth, angle, log σ_max, log σ_min)` at every probe.
    pub history: Vec<(usize, f64, f64, f64)>,
}

/// Minimal-growth initial direction, refined by doubling the probe depth
/// until the angle moves by less than 0.05 rad or the blocks run out.
pub fn subordinate_direction_with(
    prop: &Propagator,
    real: &Realization,
    n_probe: usize,
) -> Result<SubordinateDirection> {
    let max = prop.len().min(real.len());
    if n_probe == 0 || n_probe > max {
        return Err(Error::Range {
            index: n_probe,
            max,
        });
    }
    let mut acc = ScaledTransfer::identity();
    let mut history = Vec::new();
    let mut depth = n_probe;
    let mut done = 0;
    loop {
        for j in done + 1..=depth {
            acc.push(&prop.blocks.perturbed(j, real.g(j)));
        }
        done = depth;
        let s = singular_split(&acc)?;
        history.push((depth, s.minor_angle, s.log_sigma_max, s.log_sigma_min));
        let k = history.len();
        if k >= 2 && angle_gap(history[k - 1].1, history[k - 2].1) < 0.05 {
            return Ok(SubordinateDirection {
                angle: s.minor_angle,
                n_probe: depth,
                converged: true,
                history,
            });
        }
        if 2 * depth > max {
            return Ok(SubordinateDirection {
                angle: s.minor_angle,
                n_probe: depth,
                converged: false,
                history,
            });
        }
        depth *= 2;
    }
}

pub fn subordinate_direction(
    spec: &CombSpec,
    real: &Realization,
    e: f64,
    n_probe: usize,
) -> Result<SubordinateDirection> {
    let n = spec.n_blocks.min(real.len());
    let prop = Propagator::new(spec, e, n)?;
    subordinate_direction_with(&prop, real, n_probe)
}

fn angle_vector(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

/// The subordinate trace and its orthogonal companion.
#[derive(Clone, Debug)]
pub struct SubordinatePair {
    pub direction: SubordinateDirection,
    pub subordinate: PruferTrace,
    pub companion: PruferTrace,
}

impl SubordinatePair {
    /// Slope of `ln R^S_n` vs `ln n`.
    pub fn decay_slope(&self) -> Result<f64> {
        log_slope(&self.subordinate)
    }

    /// Slope of `ln R_n` vs `ln n` for the companion.
    pub fn growth_slope(&self) -> Result<f64> {
        log_slope(&self.companion)
    }

    /// Slope of `ln ||u^S||^2_{b_n}` vs `ln n`.
    pub fn norm_sq_slope(&self) -> Result<f64> {
        norm_sq_slope(&self.subordinate)
    }
}

pub fn subordinate_pair(
    prop: &Propagator,
    real: &Realization,
    n_probe: usize,
    n: usize,
) -> Result<SubordinatePair> {
    let direction = subordinate_direction_with(prop, real, n_probe)?;
    let theta = direction.angle;
    let subordinate = trace_from(prop, real, angle_vector(theta), theta, n)?;
    let companion = trace_from(prop, real, angle_vector(theta + FRAC_PI_2), theta + FRAC_PI_2, n)?;
    Ok(SubordinatePair {
        direction,
        subordinate,
        companion,
    })
}

/// Slope of `ln R_n` vs `ln n` for the solution starting at angle `theta_star`.
pub fn subordinate_decay(
    spec: &CombSpec,
    real: &Realization,
    e: f64,
    theta_star: f64,
    n: usize,
) -> Result<f64> {
    let prop = Propagator::new(spec, e, n)?;
    let trace = trace_from(&prop, real, angle_vector(theta_star), theta_star, n)?;
    let slope = log_slope(&trace)?;
    if slope > 0.05 {
        return Err(Error::SubordinateSearch { slope });
    }
    Ok(slope)
}

fn check_increasing(l_grid: &[f64]) -> Result<()> {
    if l_grid.is_empty() || l_grid.windows(2).any(|w| !(w[1] > w[0])) || !(l_grid[0] > 0.0) {
        return Err(Error::Input("L grid must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// `||u^S||_L / ||u||_L^{α/(2−α)}` along `l_grid`.
pub fn subordinacy_ratio_with(
    spec: &CombSpec,
    pair: &SubordinatePair,
    alpha: f64,
    l_grid: &[f64],
) -> Result<Vec<f64>> {
    check_increasing(l_grid)?;
    let k = alpha_tilde(alpha);
    l_grid
        .iter()
        .map(|&l| {
            let s = pair.subordinate.path.norm_sq_at(spec, l)?;
            let u = pair.companion.path.norm_sq_at(spec, l)?;
            Ok(s.sqrt() / u.sqrt().powf(k))
        })
        .collect()
}

pub fn subordinacy_ratio(
    spec: &CombSpec,
    real: &Realization,
    e: f64,
    alpha: f64,
    l_grid: &[f64],
) -> Result<Vec<f64>> {
    check_increasing(l_grid)?;
    let n = spec.n_blocks.min(real.len());
    let prop = Propagator::new(spec, e, n)?;
    let pair = subordinate_pair(&prop, real, (n / 2).max(1), n)?;
    subordinacy_ratio_with(spec, &pair, alpha, l_grid)
}

/// Breakpoints `b_n` for `n` log-spaced over the last decade `[N/10, N]`.
pub fn last_decade_grid(spec: &CombSpec, n: usize, points: usize) -> Vec<f64> {
    let lo = (n / 10).max(1);
    let k = points.max(2) - 1;
    let mut idx: Vec<usize> = (0..=k)
        .map(|j| (lo as f64 * 10f64.powf(j as f64 / k as f64)).round() as usize)
        .map(|m| m.clamp(lo, n))
        .collect();
    idx.dedup();
    idx.into_iter().map(|m| spec.b(m)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MPoint {
    pub z: Complex64,
    pub m: Complex64,
    pub truncation_l: f64,
    pub boundary_angle: f64,
}

/// Unperturbed blocks at one complex energy, shared across realizations.
#[derive(Clone, Debug)]
pub struct ComplexPropagator<'a> {
    pub spec: &'a CombSpec,
    pub z: Complex64,
    blocks: Vec<Mat2<Complex64>>,
}

impl<'a> ComplexPropagator<'a> {
    pub fn new(spec: &'a CombSpec, z: Complex64, n: usize) -> Result<Self> {
        if n > spec.n_blocks {
            return Err(Error::Range {
                index: n,
                max: spec.n_blocks,
            });
        }
        let blocks = (1..=n)
            .map(|j| unperturbed_block_value(spec.a(j), z))
            .collect::<Result<Vec<_>>>()?;
        Ok(ComplexPropagator { spec, z, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `(u, u')` at `L`, log-scaled, for data `init` at `0`.
    pub fn state_at(
        &self,
        real: &Realization,
        init: [f64; 2],
        l: f64,
    ) -> Result<PropagationState<Complex64>> {
        let max = self.len().min(real.len());
        let n = self
            .spec
            .block_containing(l)
            .filter(|&n| n <= max)
            .ok_or_else(|| Error::Input(format!("L = {l} beyond the propagated range")))?;
        let mut s = PropagationState::new([
            Complex64::new(init[0], 0.0),
            Complex64::new(init[1], 0.0),
        ])?;
        for j in 1..n {
            s.propagate_value(&self.blocks[j - 1].kicked(Complex64::new(real.g(j), 0.0)))?;
        }
        let off = l - self.spec.b(n - 1);
        if off >= 8.0 * self.spec.a(n) {
            s.propagate_value(&self.blocks[n - 1])?;
        } else {
            s.propagate_value(&partial_block_value(self.spec.a(n), self.z, off)?)?;
        }
        Ok(s)
    }

    /// `m_L(z) = −u_2(L, z)/u_1(L, z)`.
    pub fn m_at(&self, real: &Realization, phi_bc: f64, l: f64) -> Result<MPoint> {
        let s1 = self.state_at(real, boundary_data(phi_bc), l)?;
        let s2 = self.state_at(real, companion_data(phi_bc), l)?;
        Ok(MPoint {
            z: self.z,
            m: m_ratio(&s1, &s2, l)?,
            truncation_l: l,
            boundary_angle: phi_bc,
        })
    }
}

fn m_ratio(
    s1: &PropagationState<Complex64>,
    s2: &PropagationState<Complex64>,
    l: f64,
) -> Result<Complex64> {
    if s1.v[0].norm() < 1e-13 {
        return Err(Error::TruncationPole(l));
    }
    Ok(-(s2.v[0] / s1.v[0]) * (s2.log_scale - s1.log_scale).exp())
}

/// Truncated Weyl function with a Dirichlet condition at `L`.
pub fn m_function(
    spec: &CombSpec,
    real: &Realization,
    z: Complex64,
    phi_bc: f64,
    l: f64,
) -> Result<MPoint> {
    if !(z.im > 0.0) {
        return Err(Error::Domain(format!("Im z = {} must be positive", z.im)));
    }
    let n = spec
        .block_containing(l)
        .ok_or_else(|| Error::Input(format!("L = {l} outside (0, b_N]")))?;
    ComplexPropagator::new(spec, z, n)?.m_at(real, phi_bc, l)
}

/// A half-line problem with the `u_1`, `u_2` pair fixed by a boundary angle:
/// what `L(ε)` and the Jitomirskaya–Last check need.
pub trait Medium {
    fn boundary_angle(&self) -> f64;
    /// `(||u_1||^2_L, ||u_2||^2_L)` at the real energy.
    fn norms_sq(&self, l: f64) -> Result<(f64, f64)>;
    /// Largest admissible `L` (may be infinite).
    fn max_length(&self) -> f64;
    fn m(&self, z: Complex64, l: f64) -> Result<Complex64>;
    /// Truncation used for `m` once `L(ε)` is known: at least `4 L(ε)`.
    fn m_truncation(&self, l_eps: f64) -> Result<f64>;
}

/// The comb with one realization, solutions propagated at energy `E`.
pub struct CombMedium<'a> {
    pub spec: &'a CombSpec,
    pub real: &'a Realization,
    pub energy: f64,
    pub phi_bc: f64,
    pub n: usize,
    u1: SolutionPath,
    u2: SolutionPath,
}

impl<'a> CombMedium<'a> {
    pub fn new(
        spec: &'a CombSpec,
        real: &'a Realization,
        e: f64,
        phi_bc: f64,
        n: usize,
    ) -> Result<Self> {
        let prop = Propagator::new(spec, e, n)?;
        Self::with(&prop, real, phi_bc, n)
    }

    pub fn with(prop: &Propagator<'a>, real: &'a Realization, phi_bc: f64, n: usize) -> Result<Self> {
        Ok(CombMedium {
            spec: prop.spec,
            real,
            energy: prop.energy,
            phi_bc,
            n,
            u1: prop.solve(real, boundary_data(phi_bc), n)?,
            u2: prop.solve(real, companion_data(phi_bc), n)?,
        })
    }

    /// `||u_1|| ||u_2||` at `b_k`.
    pub fn product_at_block(&self, k: usize) -> f64 {
        (self.u1.norms[k] * self.u2.norms[k]).sqrt()
    }
}

impl Medium for CombMedium<'_> {
    fn boundary_angle(&self) -> f64 {
        self.phi_bc
    }

    fn norms_sq(&self, l: f64) -> Result<(f64, f64)> {
        Ok((
            self.u1.norm_sq_at(self.spec, l)?,
            self.u2.norm_sq_at(self.spec, l)?,
        ))
    }

    fn max_length(&self) -> f64 {
        self.spec.b(self.n)
    }

    fn m(&self, z: Complex64, l: f64) -> Result<Complex64> {
        Ok(m_function(self.spec, self.real, z, self.phi_bc, l)?.m)
    }

    fn m_truncation(&self, l_eps: f64) -> Result<f64> {
        let k = self.spec.block_containing(l_eps).unwrap_or(1);
        if 4 * k > self.n {
            return Err(Error::InsufficientTruncation {
                reached: self.product_at_block(self.n / 4),
                target: self.product_at_block(k),
            });
        }
        Ok(self.spec.b(self.n))
    }
}

/// `V ≡ 0` on the half-line.
#[derive(Clone, Copy, Debug)]
pub struct FreeMedium {
    pub energy: f64,
    pub phi_bc: f64,
}

impl Medium for FreeMedium {
    fn boundary_angle(&self) -> f64 {
        self.phi_bc
    }

    fn norms_sq(&self, l: f64) -> Result<(f64, f64)> {
        let g = free_gram(Dd::from_f64(self.energy), l).1.map(|x| x.to_f64());
        let form = |v: [f64; 2]| {
            let gv = g.mul_vec(v);
            v[0] * gv[0] + v[1] * gv[1]
        };
        Ok((form(boundary_data(self.phi_bc)), form(companion_data(self.phi_bc))))
    }

    fn max_length(&self) -> f64 {
        f64::INFINITY
    }

    fn m(&self, z: Complex64, l: f64) -> Result<Complex64> {
        let t = free_mat(z, l).m;
        let c = |v: [f64; 2]| {
            let w = t.mul_vec([Complex64::new(v[0], 0.0), Complex64::new(v[1], 0.0)]);
            PropagationState::new(w)
        };
        m_ratio(&c(boundary_data(self.phi_bc))?, &c(companion_data(self.phi_bc))?, l)
    }

    fn m_truncation(&self, l_eps: f64) -> Result<f64> {
        Ok(4.0 * l_eps)
    }
}

/// The `L` with `||u_1||_L ||u_2||_L = 1/(2ε)`, by bisection.
pub fn l_of_epsilon(medium: &dyn Medium, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps = {eps} must be positive")));
    }
    let target = 0.5 / eps;
    let prod = |l: f64| -> Result<f64> {
        let (a, b) = medium.norms_sq(l)?;
        Ok((a * b).sqrt())
    };
    let max = medium.max_length();
    let mut hi = if max.is_finite() { max } else { 1.0 };
    while prod(hi)? < target {
        if max.is_finite() {
            return Err(Error::InsufficientTruncation {
                reached: prod(hi)?,
                target,
            });
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p = prod(mid)?;
        if ((p - target) / target).abs() < 1e-9 {
            return Ok(mid);
        }
        if p < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = hi;
    let p = prod(l)?;
    if ((p - target) / target).abs() >= 1e-6 {
        return Err(Error::Degenerate(format!(
            "L(eps) bisection stalled: residual {:e}",
            (p - target) / target
        )));
    }
    Ok(l)
}

/// `5 ∓ √24`.
pub fn jl_constants() -> (f64, f64) {
    let r = 24f64.sqrt();
    (5.0 - r, 5.0 + r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JlRow {
    pub energy: f64,
    pub eps: f64,
    pub l_eps: f64,
    pub m_truncation: f64,
    /// `||u_1||_{L(ε)} / ||u_2||_{L(ε)}`.
    pub ratio: f64,
    pub m_abs: f64,
    pub product: f64,
    pub pass: bool,
}

pub fn jl_check(medium: &dyn Medium, e: f64, eps_list: &[f64]) -> Result<Vec<JlRow>> {
    if !(e > 0.0 && e < ELLIPTIC_MAX) {
        return Err(Error::Domain(format!("E = {e} outside (0, 12/5)")));
    }
    let (lo, hi) = jl_constants();
    eps_list
        .iter()
        .map(|&eps| {
            let l_eps = l_of_epsilon(medium, eps)?;
            let (a, b) = medium.norms_sq(l_eps)?;
            let ratio = (a / b).sqrt();
            let lm = medium.m_truncation(l_eps)?;
            let m_abs = medium.m(Complex64::new(e, eps), lm)?.norm();
            let product = ratio * m_abs;
            Ok(JlRow {
                energy: e,
                eps,
                l_eps,
                m_truncation: lm,
                ratio,
                m_abs,
                product,
                pass: lo < product && product < hi,
            })
        })
        .collect()
}

/// Smallest `ε` whose smoothing height `η = ε/10` is resolved by the
/// truncation at `b_n` for every realization: `4 n(η) <= n`, with `n(η)` the
/// block where `L(η)` falls, and `η` at least the spacing `π / ∂_E θ(b_n)` of
/// the truncated problem's eigenvalues near `E`.
pub fn smallest_scan_epsilon(
    spec: &CombSpec,
    reals: &[Realization],
    e: f64,
    n: usize,
) -> Result<f64> {
    let prop = Propagator::new(spec, e, n)?;
    let mut worst: f64 = 0.0;
    for real in reals {
        let med = CombMedium::with(&prop, real, 0.0, n)?;
        let trace = trace_from(&prop, real, boundary_data(0.0), 0.0, n)?;
        let spacing = PI / trace.points[n].dtheta_de.abs();
        let eta = (0.5 / med.product_at_block(n / 4)).max(spacing);
        worst = worst.max(10.0 * eta);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimensionScan {
    pub energy: f64,
    pub eps: Vec<f64>,
    /// `rho[r][k]`: estimated mass of `(E − ε_k, E + ε_k)` for realization `r`.
    pub rho: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
    /// Median of `slopes`.
    pub slope: f64,
    pub nodes: usize,
    /// Blocks propagated for each `ε`.
    pub truncation_blocks: Vec<usize>,
    /// Quadrature nodes moved off an excluded energy.
    pub shifted_nodes: usize,
}

/// Slope of `ln ρ((E−ε, E+ε))` vs `ln ε`, with `ρ` from Stone's formula at
/// height `ε/10` (composite Simpson over `intervals + 1` nodes) and `m`
/// truncated no deeper than `b_n`.
pub fn local_dimension_scan(
    spec: &CombSpec,
    reals: &[Realization],
    e: f64,
    eps_grid: &[f64],
    intervals: usize,
    n: usize,
) -> Result<DimensionScan> {
    if reals.is_empty() {
        return Err(Error::Input("no realizations".into()));
    }
    if intervals < 64 || !intervals.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "{intervals} quadrature intervals; need an even number >= 64"
        )));
    }
    let (emin, emax) = eps_grid
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    if !(emin > 0.0) || emax / emin < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Input("eps grid must be positive and span >= 2 decades".into()));
    }
    if let Some(x) = excluded_hit(e) {
        return Err(Error::Domain(format!("E = {e} within the guard of excluded energy {x}")));
    }
    let n = n.min(spec.n_blocks);
    // Im m at height η only sees the comb up to where η ∂_E θ is a few units,
    // and ∂_E θ grows linearly in the block index: truncate each ε at the
    // depth giving the same η n as the smallest ε at b_n.
    let depth: Vec<usize> = eps_grid
        .iter()
        .map(|&eps| ((n as f64 * emin / eps).ceil() as usize).clamp(1, n))
        .collect();
    let mut shifted = 0;
    let mut items = Vec::new();
    for (k, &eps) in eps_grid.iter().enumerate() {
        let h = 2.0 * eps / intervals as f64;
        for j in 0..=intervals {
            let mut t = e - eps + j as f64 * h;
            for x in excluded_energies() {
                if (t - x).abs() < 1e-9 {
                    t = x + 1e-9;
                    shifted += 1;
                }
            }
            let w = if j == 0 || j == intervals {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            items.push((k, Complex64::new(t, eps / 10.0), w * h / 3.0));
        }
    }
    let values = items
        .par_iter()
        .map(|&(k, z, _)| {
            let cp = ComplexPropagator::new(spec, z, depth[k])?;
            let l = spec.b(depth[k]);
            reals
                .iter()
                .map(|r| Ok(cp.m_at(r, 0.0, l)?.m.im))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rho = vec![vec![0.0; eps_grid.len()]; reals.len()];
    for ((k, _, w), vals) in items.iter().zip(&values) {
        for (r, v) in vals.iter().enumerate() {
            rho[r][*k] += w * v / PI;
        }
    }
    let ln_eps: Vec<f64> = eps_grid.iter().map(|x| x.ln()).collect();
    let slopes: Vec<f64> = rho
        .iter()
        .map(|row| ls_slope(&ln_eps, &row.iter().map(|x| x.ln()).collect::<Vec<_>>()))
        .collect();
    Ok(DimensionScan {
        energy: e,
        eps: eps_grid.to_vec(),
        rho,
        slope: median(&slopes),
        slopes,
        nodes: intervals + 1,
        truncation_blocks: depth,
        shifted_nodes: shifted,
    })
}

/// Log-spaced grid of `points` values on `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let k = points.max(2) - 1;
    (0..=k)
        .map(|j| lo * (hi / lo).powf(j as f64 / k as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::{sample_realization, EnsembleSpec};
    use crate::transfer::{cplx, TransferMat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_values() {
        let w = spectral_window(1.0).unwrap();
        assert!((w.lower - (6.0 - 3.0 * 3f64.sqrt()) / 5.0).abs() < 1e-15);
        assert!((w.lower - 0.16077).abs() < 1e-5 && (w.upper - 2.23923).abs() < 1e-5);
        let x = w.excluded;
        assert!((x[0] - 0.35147).abs() < 1e-5 && x[1] == 1.2 && (x[2] - 2.04853).abs() < 1e-5);
        let narrow = spectral_window(2.0 - 1e-9).unwrap();
        assert!(narrow.upper - narrow.lower < 1e-3);
        assert!(narrow.lower < 1.2 && 1.2 < narrow.upper);
        assert!(spectral_window(0.0).is_err() && spectral_window(2.0).is_err());
    }

    #[test]
    fn alpha_values() {
        assert!((alpha_theory(1.0, 1.0).unwrap() - 26.0 / 35.0).abs() < 1e-15);
        assert!((beta_theory(1.0, 1.0) - 9.0 / 70.0).abs() < 1e-15);
        let near = alpha_theory(1.2 - 1e-7, 1.0).unwrap();
        assert!((near - 0.75).abs() < 1e-12 && near < 0.75);
        let w = spectral_window(1.0).unwrap();
        assert!(alpha_theory(w.lower + 1e-12, 1.0).unwrap().abs() < 1e-9);
        assert!(alpha_theory(0.1, 1.0).is_err());
        let (lo, hi) = invert_alpha(26.0 / 35.0, 1.0).unwrap();
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 1.4).abs() < 1e-14);
        let (lo, hi) = invert_alpha(0.75 - 1e-12, 1.0).unwrap();
        assert!((lo - 1.2).abs() < 1e-4 && (hi - 1.2).abs() < 1e-4);
        assert!(invert_alpha(0.75, 1.0).is_err() && invert_alpha(0.0, 1.0).is_err());
    }

    #[test]
    fn alpha_beta_identity_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let lambda = rng.random_range(0.01..1.99);
            let w = spectral_window(lambda).unwrap();
            let e = rng.random_range(w.lower..w.upper);
            let a = alpha_theory(e, lambda).unwrap();
            assert!((a - (1.0 - 2.0 * beta_theory(e, lambda))).abs() <= 1e-14);
            assert!(beta_theory(e, lambda) < 0.5);
            if (e - 1.2).abs() > 1e-3 && a > 1e-6 {
                let (lo, hi) = invert_alpha(a, lambda).unwrap();
                assert!((lo - e).abs() < 1e-10 || (hi - e).abs() < 1e-10, "{e} {lo} {hi}");
            }
        }
    }

    #[test]
    fn window_consistency() {
        for lambda in [0.3, 1.0, 1.7] {
            let w = spectral_window(lambda).unwrap();
            for k in 1..2400 {
                let e = k as f64 * 1e-3;
                if (e - w.lower).abs() < 1e-9 || (e - w.upper).abs() < 1e-9 {
                    continue;
                }
                assert_eq!(beta_theory(e, lambda) < 0.5, w.contains(e), "E={e}");
            }
        }
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(100, 100_000, 10);
        assert_eq!(g.first(), Some(&100));
        assert_eq!(g.last(), Some(&100_000));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn singular_split_of_rotation_is_indeterminate() {
        let mut t = ScaledTransfer::<f64>::identity();
        let (s, c) = 0.3f64.sin_cos();
        t.push(&TransferMat {
            m: Mat2::new(c, -s, s, c),
            dm_de: Mat2::zero(),
        });
        assert!(matches!(
            singular_split(&t),
            Err(Error::IndeterminateDirection { .. })
        ));
        let mut d = ScaledTransfer::<f64>::identity();
        d.push(&TransferMat {
            m: Mat2::new(4.0, 0.0, 0.0, 0.25),
            dm_de: Mat2::zero(),
        });
        let sp = singular_split(&d).unwrap();
        assert!(angle_gap(sp.minor_angle, FRAC_PI_2) < 1e-14);
        assert!((sp.log_sigma_max - 4f64.ln()).abs() < 1e-14);
        assert!((sp.log_sigma_min + 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_ensemble_singular_values_stay_bounded() {
        let spec = CombSpec::inverse_square(4000).unwrap();
        let prop = Propagator::new(&spec, 1.0, 4000).unwrap();
        let d = subordinate_direction_with(&prop, &Realization::zero(4000), 1000).unwrap();
        for &(_, _, smax, smin) in &d.history {
            assert!(smax.exp() < 20.0 && smin.exp() > 1.0 / 20.0);
        }
    }

    #[test]
    fn subordinate_direction_decays_and_companion_grows() {
        let n = 20_000;
        let spec = CombSpec::inverse_square(n).unwrap();
        let prop = Propagator::new(&spec, 1.0, n).unwrap();
        let ens = EnsembleSpec::rademacher(1.0, 4).unwrap();
        let (mut ds, mut gs) = (vec![], vec![]);
        let mut error_path_seen = false;
        for i in 0..8 {
            let real = sample_realization(&ens, i, n).unwrap();
            let pair = subordinate_pair(&prop, &real, n / 4, n).unwrap();
            let d = pair.decay_slope().unwrap();
            let g = pair.growth_slope().unwrap();
            assert!(pair.subordinate.points[n].log_r < pair.companion.points[n].log_r);
            if d <= 0.05 {
                let s = subordinate_decay(&spec, &real, 1.0, pair.direction.angle, n).unwrap();
                assert!((s - d).abs() < 1e-12);
            }
            if g > 0.05 && !error_path_seen {
                let wrong = pair.direction.angle + FRAC_PI_2;
                assert!(matches!(
                    subordinate_decay(&spec, &real, 1.0, wrong, n),
                    Err(Error::SubordinateSearch { .. })
                ));
                error_path_seen = true;
            }
            ds.push(d);
            gs.push(g);
        }
        assert!(error_path_seen);
        assert!(median(&ds) < 0.0 && median(&gs) > 0.0);
    }

    #[test]
    fn subordinacy_ratio_rejects_unsorted_grid() {
        let spec = CombSpec::inverse_square(1000).unwrap();
        let real = Realization::zero(1000);
        let r = subordinacy_ratio(&spec, &real, 1.0, 0.7, &[1.0, 0.5]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn m_function_free_segment() {
        // Block 1 at a = 1 carries no deltas: V = 0 on [0, 8].
        let spec = CombSpec::inverse_square(10).unwrap();
        let real = Realization::zero(10);
        for (z, l) in [(cplx(1.0, 0.1), 5.0), (cplx(2.0, 0.5), 7.5), (cplx(0.3, 1e-3), 3.0)] {
            let m = m_function(&spec, &real, z, 0.0, l).unwrap().m;
            let k = z.sqrt();
            let exact = -k * (k * l).cos() / (k * l).sin();
            assert!((m - exact).norm() < 1e-8 * exact.norm(), "{m} {exact}");
        }
        assert!(m_function(&spec, &real, cplx(1.0, 0.0), 0.0, 5.0).is_err());
    }

    #[test]
    fn herglotz() {
        let n = 300;
        let spec = CombSpec::inverse_square(n).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 2).unwrap(), 0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let z = cplx(rng.random_range(0.05..2.35), 10f64.powf(rng.random_range(-3.0..0.0)));
            let l = rng.random_range(0.5..spec.b(n));
            let phi_bc = rng.random_range(0.0..PI);
            let m = m_function(&spec, &real, z, phi_bc, l).unwrap();
            assert!(m.m.im > 0.0, "{z} {l} {}", m.m);
        }
    }

    #[test]
    fn m_function_truncation_converges() {
        let n = 20_000;
        let spec = CombSpec::inverse_square(n).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 6).unwrap(), 0, n).unwrap();
        let eps = 1e-3;
        let med = CombMedium::new(&spec, &real, 1.0, 0.0, n).unwrap();
        let l_eps = l_of_epsilon(&med, eps).unwrap();
        let k = spec.block_containing(l_eps).unwrap();
        assert!(8 * k <= n);
        let z = cplx(1.0, eps);
        let m1 = m_function(&spec, &real, z, 0.0, spec.b(n / 2)).unwrap().m;
        let m2 = m_function(&spec, &real, z, 0.0, spec.b(n)).unwrap().m;
        assert!((m1 - m2).norm() < 1e-3 * m1.norm(), "{m1} {m2}");
    }

    #[test]
    fn l_of_epsilon_free_case() {
        let free = FreeMedium {
            energy: 1.0,
            phi_bc: 0.0,
        };
        let l = l_of_epsilon(&free, 1e-2).unwrap();
        assert!((l / 100.0 - 1.0).abs() < 0.05);
        let (a, b) = free.norms_sq(l).unwrap();
        assert!(((a * b).sqrt() * 2e-2 - 1.0).abs() < 1e-6);
        let (a, _) = free.norms_sq(1.0).unwrap();
        assert!((a - (0.5 - 2f64.sin() / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn l_of_epsilon_comb() {
        let n = 5000;
        let spec = CombSpec::inverse_square(n).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 8).unwrap(), 1, n).unwrap();
        let med = CombMedium::new(&spec, &real, 1.0, 0.0, n).unwrap();
        let mut prev = 0.0;
        for eps in [1e-1, 1e-2, 1e-3] {
            let l = l_of_epsilon(&med, eps).unwrap();
            assert!(l > prev);
            prev = l;
            let (a, b) = med.norms_sq(l).unwrap();
            assert!(((a * b).sqrt() * 2.0 * eps - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            l_of_epsilon(&med, 1e-12),
            Err(Error::InsufficientTruncation { .. })
        ));
    }

    #[test]
    fn jl_constants_and_free_case() {
        let (lo, hi) = jl_constants();
        assert!((lo - 0.101021).abs() < 1e-6 && (hi - 9.89898).abs() < 1e-5);
        let free = FreeMedium {
            energy: 1.0,
            phi_bc: 0.0,
        };
        let rows = jl_check(&free, 1.0, &[0.1, 0.01, 0.001]).unwrap();
        assert!(rows.iter().all(|r| r.pass));
    }

    #[test]
    fn scan_rejects_bad_input() {
        let spec = CombSpec::inverse_square(100).unwrap();
        let reals = vec![Realization::zero(100)];
        assert!(local_dimension_scan(&spec, &reals, 1.0, &[1e-3, 1e-2], 64, 100).is_err());
        assert!(local_dimension_scan(&spec, &reals, 1.0, &[1e-4, 1e-2], 63, 100).is_err());
        assert!(local_dimension_scan(&spec, &reals, 1.2, &[1e-4, 1e-2], 64, 100).is_err());
    }

    #[test]
    fn dimension_scan_is_node_invariant() {
        let n = 10_000;
        let spec = CombSpec::inverse_square(n).unwrap();
        let reals = vec![Realization::zero(n)];
        let emin = smallest_scan_epsilon(&spec, &reals, 1.0, n).unwrap();
        let grid = log_space(emin, 100.0 * emin, 3);
        let a = local_dimension_scan(&spec, &reals, 1.0, &grid, 64, n).unwrap();
        let b = local_dimension_scan(&spec, &reals, 1.0, &grid, 128, n).unwrap();
        assert!(((b.slope - a.slope) / a.slope).abs() < 0.02);
        assert!(a.rho[0].windows(2).all(|w| w[1] > w[0]));
        assert_eq!(a.truncation_blocks[0], n);
        assert!(a.truncation_blocks[2] < n / 50);
    }
}
