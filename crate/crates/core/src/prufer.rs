//! Prüfer variables relative to the eigenbasis of the limit matrix, and the
//! three ways of measuring `int_0^{b_n} u^2`.
//!
//! A state `(u, u')` is written as `p f_+ + conj(p) f_-` with
//! `f_± = (1, 1 - e^{∓iφ})`, and `p = i R e^{iθ}`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use num_complex::Complex64;

use crate::comb::{CombSpec, Realization};
use crate::error::{Error, Result};
use crate::linalg::{median, Mat2};
use crate::path::{Propagator, SolutionPath};
use crate::transfer::{limit_mat, phase, PropagationState};

/// Eigenvectors of `M(E)` for the eigenvalues `e^{±iφ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenBasis {
    pub phi: f64,
    pub f_plus: [Complex64; 2],
    pub f_minus: [Complex64; 2],
}

impl EigenBasis {
    pub fn new(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi < PI) || phi.sin() < 1e-12 {
            return Err(Error::Degenerate(format!(
                "phase {phi} outside (0, pi): eigenbasis degenerates"
            )));
        }
        let one = Complex64::new(1.0, 0.0);
        let f_plus = [one, one - Complex64::from_polar(1.0, -phi)];
        let f_minus = [one, one - Complex64::from_polar(1.0, phi)];
        let basis = EigenBasis {
            phi,
            f_plus,
            f_minus,
        };
        let e = Complex64::new(6.0 * (1.0 - phi.cos()) / 5.0, 0.0);
        let m = limit_mat(e).m;
        for (f, sign) in [(f_plus, 1.0), (f_minus, -1.0)] {
            let mf = m.mul_vec(f);
            let lam = Complex64::from_polar(1.0, sign * phi);
            let err = (mf[0] - lam * f[0]).norm().max((mf[1] - lam * f[1]).norm());
            if err > 1e-12 {
                return Err(Error::Degenerate(format!(
                    "eigenvector residual {err:e} at phase {phi}"
                )));
            }
        }
        Ok(basis)
    }

    pub fn from_energy(e: f64) -> Result<Self> {
        Self::new(phase(e)?.0)
    }

    /// Coefficient `p` of `f_+` in the expansion of `(u, du)`.
    #[inline]
    pub fn coefficient(&self, u: f64, du: f64) -> Complex64 {
        let (s, c) = self.phi.sin_cos();
        Complex64::new(0.5 * u, (u * (1.0 - c) - du) / (2.0 * s))
    }

    /// `(u, du) = p f_+ + conj(p) f_-` with `p = i R e^{iθ}`.
    pub fn reconstruct(&self, log_r: f64, theta: f64) -> [f64; 2] {
        let r = log_r.exp();
        [
            -2.0 * r * theta.sin(),
            2.0 * r * (-theta.sin() + (theta - self.phi).sin()),
        ]
    }
}

fn reduce(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

/// `(ln R, θ mod 2π in (-π, π])` for the state `(u, du)`.
pub fn decompose(u: f64, du: f64, basis: &EigenBasis) -> Result<(f64, f64)> {
    if u == 0.0 && du == 0.0 {
        return Err(Error::Degenerate("zero state has no Prüfer angle".into()));
    }
    let p = basis.coefficient(u, du);
    Ok((p.norm().ln(), reduce(p.arg() - FRAC_PI_2)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruferPoint {
    pub log_r: f64,
    /// Continuous lift.
    pub theta: f64,
    pub dtheta_de: f64,
}

#[derive(Clone, Debug)]
pub struct PruferTrace {
    pub energy: f64,
    pub phi: f64,
    pub dphi_de: f64,
    pub boundary_angle: f64,
    /// Perturbation strength of the realization.
    pub lambda: f64,
    /// Identity of the realization `(master_seed, index)`.
    pub realization: (u64, u64),
    /// `points[n]` describes the state at `b_n`; `points[0]` is `x = 0`.
    pub points: Vec<PruferPoint>,
    pub path: SolutionPath,
}

/// Initial data `(u, u')(0)` of the `u_1`-type solution.
pub fn boundary_data(phi_bc: f64) -> [f64; 2] {
    [-phi_bc.sin(), phi_bc.cos()]
}

/// Initial data of the companion `u_2`-type solution.
pub fn companion_data(phi_bc: f64) -> [f64; 2] {
    [phi_bc.cos(), phi_bc.sin()]
}

fn point(
    state: &PropagationState<f64>,
    basis: &EigenBasis,
    dphi_de: f64,
    prev_theta: Option<f64>,
) -> Result<PruferPoint> {
    let [u, du] = state.v;
    let [ue, due] = state.dv_de;
    let (log_r, theta_mod) = decompose(u, du, basis)?;
    let theta = match prev_theta {
        None => theta_mod,
        Some(prev) => {
            let target = prev + basis.phi;
            theta_mod + TAU * ((target - theta_mod) / TAU).round()
        }
    };
    let (s, c) = basis.phi.sin_cos();
    let p = basis.coefficient(u, du);
    let w = u * (1.0 - c) - du;
    let dy = (ue * (1.0 - c) + u * s * dphi_de - due) / (2.0 * s) - w * c * dphi_de / (2.0 * s * s);
    let dp = Complex64::new(0.5 * ue, dy);
    Ok(PruferPoint {
        log_r: log_r + state.log_scale,
        theta,
        dtheta_de: (dp / p).im,
    })
}

/// Prüfer trace of the solution with initial data `init` through `n` blocks.
pub fn trace_from(
    prop: &Propagator,
    real: &Realization,
    init: [f64; 2],
    boundary_angle: f64,
    n: usize,
) -> Result<PruferTrace> {
    let (phi, dphi_de) = phase(prop.energy)?;
    let basis = EigenBasis::new(phi)?;
    let path = prop.solve(real, init, n)?;
    let mut points = Vec::with_capacity(n + 1);
    let mut prev = None;
    for s in &path.states {
        let pt = point(s, &basis, dphi_de, prev)?;
        prev = Some(pt.theta);
        points.push(pt);
    }
    Ok(PruferTrace {
        energy: prop.energy,
        phi,
        dphi_de,
        boundary_angle,
        lambda: real.ensemble.effective_lambda(),
        realization: (real.seed, real.index),
        points,
        path,
    })
}

/// Prüfer trace of the solution with boundary angle `phi_bc`.
pub fn prufer_trace(
    spec: &CombSpec,
    real: &Realization,
    e: f64,
    phi_bc: f64,
    n: usize,
) -> Result<PruferTrace> {
    let prop = Propagator::new(spec, e, n)?;
    trace_with(&prop, real, phi_bc, n)
}

/// [`prufer_trace`] with a shared propagator.
pub fn trace_with(
    prop: &Propagator,
    real: &Realization,
    phi_bc: f64,
    n: usize,
) -> Result<PruferTrace> {
    trace_from(prop, real, boundary_data(phi_bc), phi_bc, n)
}

impl PruferTrace {
    pub fn len(&self) -> usize {
        self.points.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_identity(&self, n: usize) -> Result<f64> {
        norm_identity(&self.path.states[n])
    }

    pub fn norm_quadrature(&self, n: usize) -> f64 {
        self.path.norms[n]
    }

    pub fn norm_prufer(&self, n: usize) -> f64 {
        norm_prufer(&self.points[n], self.phi)
    }
}

/// Plateau of `|dθ_n/dE| / n` over the last decade of a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DthetaGrowth {
    pub value: f64,
    /// `|r_N - r_{N/10}| / r_N`.
    pub drift: f64,
    pub converged: bool,
}

pub fn dtheta_growth(trace: &PruferTrace) -> Result<DthetaGrowth> {
    let n = trace.len();
    if n < 1000 {
        return Err(Error::Input(format!("trace of {n} blocks; need at least 1000")));
    }
    let ratio = |k: usize| trace.points[k].dtheta_de.abs() / k as f64;
    let start = n / 10;
    let values: Vec<f64> = (start..=n).map(ratio).collect();
    let value = median(&values);
    let drift = (ratio(n) - ratio(start)).abs() / ratio(n);
    Ok(DthetaGrowth {
        value,
        drift,
        converged: drift <= 0.5,
    })
}

/// `u' ∂_E u − u ∂_E u'` with scales restored; equals `int_0^x u^2`.
pub fn norm_identity(state: &PropagationState<f64>) -> Result<f64> {
    let [u, du] = state.v;
    let [ue, due] = state.dv_de;
    let raw = du * ue - u * due;
    let size = (du * ue).abs() + (u * due).abs();
    if raw < -1e-8 * size {
        return Err(Error::DerivativeCorruption(raw));
    }
    Ok(raw * (2.0 * state.log_scale).exp())
}

/// Exact `int_0^{b_n} u^2` for the solution with initial data `init`.
pub fn norm_quadrature(
    spec: &CombSpec,
    real: &Realization,
    e: f64,
    init: [f64; 2],
    n: usize,
) -> Result<f64> {
    let prop = Propagator::new(spec, e, n)?;
    Ok(prop.solve(real, init, n)?.norms[n])
}

/// `4 R^2 (∂θ/∂E) sin φ`.
pub fn norm_prufer(point: &PruferPoint, phi: f64) -> f64 {
    4.0 * (2.0 * point.log_r).exp() * point.dtheta_de * phi.sin()
}

/// `u_1 u_2' − u_1' u_2` with scales restored.
pub fn wronskian(s1: &PropagationState<f64>, s2: &PropagationState<f64>) -> f64 {
    let m = Mat2::new(s1.v[0], s2.v[0], s1.v[1], s2.v[1]);
    m.det() * (s1.log_scale + s2.log_scale).exp()
}

/// `R_n^2/R_{n-1}^2` minus its first-order prediction
/// `1 + (g_n/sin φ) sin 2θ̃_n + (g_n/sin φ)^2 sin^2 θ̃_n`, `θ̃_n = θ_{n-1} + φ`,
/// for `n = 1..=N`. The prediction is exact for the limit matrix, so the
/// residual measures the deviation of the blocks from it.
pub fn r_recursion_residuals(trace: &PruferTrace, real: &Realization) -> Vec<f64> {
    let s = trace.phi.sin();
    trace
        .points
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let x = real.g(k + 1) / s;
            let tt = w[0].theta + trace.phi;
            let exact = (2.0 * (w[1].log_r - w[0].log_r)).exp();
            exact - (1.0 + x * (2.0 * tt).sin() + x * x * tt.sin().powi(2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::EnsembleSpec;
    use crate::comb::sample_realization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigenbasis_is_conjugate_pair() {
        let b = EigenBasis::from_energy(1.0).unwrap();
        assert_eq!(b.f_minus[1], b.f_plus[1].conj());
        assert!(EigenBasis::new(0.0).is_err());
        assert!(EigenBasis::new(PI).is_err());
    }

    #[test]
    fn decompose_examples() {
        let b = EigenBasis::new(FRAC_PI_2).unwrap();
        let (lr, th) = decompose(-2.0, -2.0, &b).unwrap();
        assert!(lr.abs() < 1e-15);
        assert!((th - FRAC_PI_2).abs() < 1e-15);
        let (lr2, th2) = decompose(-4.0, -4.0, &b).unwrap();
        assert!((lr2 - lr - 2f64.ln()).abs() < 1e-15);
        assert!((th2 - th).abs() < 1e-15);
        assert!(decompose(0.0, 0.0, &b).is_err());
    }

    #[test]
    fn decompose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let phi = rng.random_range(0.01..PI - 0.01);
            let u = rng.random_range(-5.0..5.0);
            let du = rng.random_range(-5.0..5.0);
            let b = EigenBasis::new(phi).unwrap();
            let (lr, th) = decompose(u, du, &b).unwrap();
            assert!(th > -PI && th <= PI);
            let [u2, du2] = b.reconstruct(lr, th);
            let scale = u.abs().max(du.abs());
            assert!((u2 - u).abs() <= 1e-10 * scale && (du2 - du).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn zero_ensemble_trace_is_bounded() {
        let spec = CombSpec::inverse_square(1000).unwrap();
        let real = Realization::zero(1000);
        let t = prufer_trace(&spec, &real, 1.0, 0.0, 1000).unwrap();
        let lr: Vec<f64> = t.points[100..].iter().map(|p| p.log_r).collect();
        let sup = lr.iter().cloned().fold(f64::MIN, f64::max);
        let inf = lr.iter().cloned().fold(f64::MAX, f64::min);
        assert!(sup - inf < 3.0);
        for w in t.points[100..].windows(2) {
            assert!((w[1].theta - w[0].theta - t.phi).abs() < 0.05);
        }
    }

    #[test]
    fn unwrap_matches_reduced_angle() {
        let spec = CombSpec::inverse_square(2000).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 3).unwrap(), 0, 2000).unwrap();
        let t = prufer_trace(&spec, &real, 0.7, 0.3, 2000).unwrap();
        let basis = EigenBasis::new(t.phi).unwrap();
        for (p, s) in t.points.iter().zip(&t.path.states).skip(1) {
            let (_, th) = decompose(s.v[0], s.v[1], &basis).unwrap();
            let d = reduce(p.theta - th);
            assert!(d.abs() < 1e-9);
        }
        for w in t.points[100..].windows(2) {
            assert!((w[1].theta - w[0].theta - t.phi).abs() < FRAC_PI_2);
        }
    }

    #[test]
    fn scaling_initial_data_shifts_log_r() {
        let spec = CombSpec::inverse_square(500).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 1).unwrap(), 2, 500).unwrap();
        let prop = Propagator::new(&spec, 1.3, 500).unwrap();
        let a = trace_from(&prop, &real, [0.2, 0.9], 0.0, 500).unwrap();
        let b = trace_from(&prop, &real, [0.6, 2.7], 0.0, 500).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((q.log_r - p.log_r - 3f64.ln()).abs() < 1e-12);
            assert!((q.theta - p.theta).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_identity_free_segment() {
        // Block 1 at a = 1 has no deltas: u = sin x on [0, 8].
        let spec = CombSpec::inverse_square(1).unwrap();
        let real = Realization::zero(1);
        let prop = Propagator::new(&spec, 1.0, 1).unwrap();
        let path = prop.solve(&real, [0.0, 1.0], 1).unwrap();
        let l: f64 = 8.0;
        let exact = l / 2.0 - (2.0f64 * l).sin() / 4.0;
        assert!((norm_identity(&path.states[1]).unwrap() - exact).abs() < 1e-12 * exact);
        assert!((path.norms[1] - exact).abs() < 1e-12 * exact);
        assert_eq!(norm_identity(&path.states[0]).unwrap(), 0.0);
    }

    #[test]
    fn norms_agree() {
        let spec = CombSpec::inverse_square(1000).unwrap();
        let ens = EnsembleSpec::rademacher(1.0, 11).unwrap();
        for idx in 0..3 {
            let real = sample_realization(&ens, idx, 1000).unwrap();
            let t = prufer_trace(&spec, &real, 1.0, 0.0, 1000).unwrap();
            let mut prev = 0.0;
            for n in 1..=1000 {
                let ni = t.norm_identity(n).unwrap();
                let nq = t.norm_quadrature(n);
                assert!((ni - nq).abs() <= 1e-8 * nq, "n={n} {ni} {nq}");
                assert!(ni >= prev);
                prev = ni;
            }
            let np = t.norm_prufer(1000);
            assert!((np / t.norm_quadrature(1000) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn dtheta_matches_finite_difference() {
        let spec = CombSpec::inverse_square(1000).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 5).unwrap(), 0, 1000).unwrap();
        let h = 1e-7;
        let t = prufer_trace(&spec, &real, 1.0, 0.0, 1000).unwrap();
        let tp = prufer_trace(&spec, &real, 1.0 + h, 0.0, 1000).unwrap();
        let tm = prufer_trace(&spec, &real, 1.0 - h, 0.0, 1000).unwrap();
        let fd = (tp.points[1000].theta - tm.points[1000].theta) / (2.0 * h);
        let an = t.points[1000].dtheta_de;
        assert!((fd - an).abs() <= 1e-3 * an.abs(), "{fd} {an}");
    }

    #[test]
    fn dtheta_growth_zero_ensemble() {
        let spec = CombSpec::inverse_square(10_000).unwrap();
        let real = Realization::zero(10_000);
        let t = prufer_trace(&spec, &real, 1.0, 0.0, 10_000).unwrap();
        let g = dtheta_growth(&t).unwrap();
        assert!(g.value > 0.0 && g.value.is_finite());
        assert!(g.converged);
    }

    #[test]
    fn wronskian_of_boundary_pair() {
        let spec = CombSpec::inverse_square(10_000).unwrap();
        let real = sample_realization(&EnsembleSpec::rademacher(1.0, 9).unwrap(), 0, 10_000).unwrap();
        let prop = Propagator::new(&spec, 1.0, 10_000).unwrap();
        let phi_bc = 0.4;
        let p1 = prop.solve(&real, boundary_data(phi_bc), 10_000).unwrap();
        let p2 = prop.solve(&real, companion_data(phi_bc), 10_000).unwrap();
        assert!((wronskian(&p1.states[0], &p2.states[0]) + 1.0).abs() < 1e-15);
        for n in (0..=10_000).step_by(100) {
            let w = wronskian(&p1.states[n], &p2.states[n]);
            assert!((w + 1.0).abs() < 1e-8, "n={n} w={w}");
        }
        assert_eq!(wronskian(&p1.states[7], &p1.states[7]), 0.0);
    }

    #[test]
    fn r_recursion_residual_decays_like_inverse_n() {
        let n = 10_000;
        let spec = CombSpec::inverse_square(n).unwrap();
        let ens = EnsembleSpec::rademacher(1.0, 13).unwrap();
        for real in [Realization::zero(n), sample_realization(&ens, 0, n).unwrap()] {
            let t = prufer_trace(&spec, &real, 1.0, 0.0, n).unwrap();
            let r = r_recursion_residuals(&t, &real);
            let (mut x, mut y) = (vec![], vec![]);
            for k in [10usize, 100, 1000] {
                let m = r[k..10 * k].iter().map(|v| v.abs()).fold(0.0, f64::max);
                x.push((k as f64).ln());
                y.push(m.ln());
            }
            let slope = crate::linalg::ls_slope(&x, &y);
            assert!((slope + 1.0).abs() < 0.2, "slope {slope}");
        }
    }
}
