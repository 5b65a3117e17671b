//! Exact transfer matrices for `-u'' + V u = E u` across free segments and
//! delta kicks, carried together with their analytic energy derivative.
//!
//! The free propagator is written through the entire functions
//! `C(z) = sum z^k/(2k)!` and `S(z) = sum z^k/(2k+1)!` with `z = -E len^2`:
//!
//! ```text
//! [[ C,          len S ],
//!  [ -E len S,   C     ]]
//! ```
//!
//! so one code path covers positive, zero, negative and complex energies
//! without branch cuts. Long segments are halved until `|z| <= 4` and the
//! result squared back.

use std::ops::Mul;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::Serialize;

use crate::comb::{amplitudes_dd, CombSpec, Realization, PATTERN};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::linalg::{vec_norm, Energy, Mat2, Scalar};

/// Upper end of the elliptic window of the limit matrix.
pub const ELLIPTIC_MAX: f64 = 12.0 / 5.0;

/// A transfer matrix bundled with its entrywise derivative in `E`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferMat<T> {
    pub m: Mat2<T>,
    pub dm_de: Mat2<T>,
}

impl<T: Scalar> TransferMat<T> {
    pub fn identity() -> Self {
        TransferMat {
            m: Mat2::identity(),
            dm_de: Mat2::zero(),
        }
    }

    /// `kick(g) * self`.
    #[inline]
    pub fn kicked(&self, g: T) -> Self {
        TransferMat {
            m: self.m.kicked(g),
            dm_de: self.dm_de.kicked(g),
        }
    }

    pub fn det(&self) -> T {
        self.m.det()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> TransferMat<U> {
        TransferMat {
            m: self.m.map(f),
            dm_de: self.dm_de.map(f),
        }
    }
}

impl<E: Energy> TransferMat<E> {
    fn narrow(w: &TransferMat<E::Wide>) -> Self {
        w.map(E::narrow)
    }
}

/// `self * rhs`, i.e. `rhs` is applied first.
impl<T: Scalar> Mul for TransferMat<T> {
    type Output = TransferMat<T>;
    #[inline]
    fn mul(self, rhs: TransferMat<T>) -> TransferMat<T> {
        TransferMat {
            m: self.m * rhs.m,
            dm_de: self.dm_de * rhs.m + self.m * rhs.dm_de,
        }
    }
}

const SERIES_TERMS: usize = 40;

struct Coefficients {
    /// `1/(2k)!`
    even: [Dd; SERIES_TERMS + 2],
    /// `1/(2k+1)!`
    odd: [Dd; SERIES_TERMS + 2],
}

fn coefficients() -> &'static Coefficients {
    static COEFFS: OnceLock<Coefficients> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let mut even = [Dd::ZERO; SERIES_TERMS + 2];
        let mut odd = [Dd::ZERO; SERIES_TERMS + 2];
        let mut fact = Dd::ONE;
        for k in 0..SERIES_TERMS + 2 {
            if k > 0 {
                fact = fact.mul_f64((2 * k - 1) as f64).mul_f64((2 * k) as f64);
            }
            even[k] = fact.recip();
            odd[k] = (fact.mul_f64((2 * k + 1) as f64)).recip();
        }
        Coefficients { even, odd }
    })
}

/// Values of the entire functions at one argument.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Entire<W> {
    /// `C(z)`
    pub c: W,
    /// `S(z)`
    pub s: W,
    /// `S'(z)`
    pub ds: W,
    /// `(C(z) - 1)/z`
    pub p: W,
    /// `(S(z) - 1)/z`
    pub q: W,
}

pub(crate) fn entire<W: Scalar>(z: W) -> Entire<W> {
    let co = coefficients();
    let zn = z.norm_sqr();
    let (mut c, mut s, mut ds, mut p, mut q) = (W::zero(), W::zero(), W::zero(), W::zero(), W::zero());
    let mut pow = W::one(); // z^k
    let mut pow_n = 1.0; // |z|^{2k}
    for k in 0..SERIES_TERMS {
        c = c + pow * W::from_dd(co.even[k]);
        s = s + pow * W::from_dd(co.odd[k]);
        p = p + pow * W::from_dd(co.even[k + 1]);
        q = q + pow * W::from_dd(co.odd[k + 1]);
        ds = ds + pow * W::from_dd(co.odd[k + 1].mul_f64((k + 1) as f64));
        // Next term relative to the leading one is below 2^-110.
        let next = co.even[k + 1].to_f64();
        if pow_n * zn * next * next < 1e-68 {
            break;
        }
        pow = pow * z;
        pow_n *= zn;
    }
    Entire { c, s, ds, p, q }
}

fn halvings(e_abs: f64, len: f64) -> u32 {
    let mut m = 0;
    let mut l = len;
    while e_abs * l * l > 4.0 && m < 60 {
        l *= 0.5;
        m += 1;
    }
    m
}

/// Free propagator over `len` in double-double.
pub(crate) fn free_wide<W: Scalar>(e: W, len: f64) -> TransferMat<W> {
    let m = halvings(e.norm_sqr().sqrt(), len);
    let l = len * 0.5f64.powi(m as i32);
    let lw = W::from_f64(l);
    let l2 = lw * lw;
    let z = -(e * l2);
    let f = entire(z);
    let ls = lw * f.s;
    let half_l2s = -(l2 * f.s).scale(0.5);
    let l3ds = l2 * lw * f.ds;
    let mut t = TransferMat {
        m: Mat2::new(f.c, ls, -(e * ls), f.c),
        dm_de: Mat2::new(half_l2s, -l3ds, e * l3ds - ls, half_l2s),
    };
    for _ in 0..m {
        t = t * t;
    }
    t
}

/// Gram matrix `int_0^len (c(t), s(t))^T (c(t), s(t)) dt` of the free
/// solutions with `(c, c') = (1, 0)` and `(s, s') = (0, 1)`, real energy,
/// together with the propagator itself.
pub(crate) fn free_gram(e: Dd, len: f64) -> (Mat2<Dd>, Mat2<Dd>) {
    let m = halvings(4.0 * e.to_f64().abs(), len);
    let l = len * 0.5f64.powi(m as i32);
    let lw = Dd::from_f64(l);
    let l2 = lw * lw;
    let z4 = -(e * l2).mul_f64(4.0);
    let f = entire(z4);
    let cc = lw * (Dd::ONE + f.s).mul_f64(0.5);
    let cs = l2 * f.p;
    let ss = (l2 * lw * f.q).mul_f64(2.0);
    let mut gram = Mat2::new(cc, cs, cs, ss);
    let mut prop = free_wide(e, l).m;
    for _ in 0..m {
        gram = gram + prop.transpose() * gram * prop;
        prop = prop * prop;
    }
    (prop, gram)
}

/// Free propagator `[[cos kL, sin kL / k], [-k sin kL, cos kL]]`, `k = sqrt(E)`.
pub fn free_mat<E: Energy>(e: E, len: f64) -> TransferMat<E> {
    assert!(len >= 0.0, "segment length must be non-negative");
    TransferMat::narrow(&free_wide(e.widen(), len))
}

/// Delta kick of amplitude `g`: `u' -> u' + g u`.
pub fn kick_mat<E: Energy>(g: f64) -> TransferMat<E> {
    TransferMat {
        m: Mat2::new(E::one(), E::zero(), E::from_f64(g), E::one()),
        dm_de: Mat2::zero(),
    }
}

fn block_wide<W: Scalar>(a: f64, e: W, derivative: bool) -> Result<TransferMat<W>> {
    let (y1, y2) = amplitudes_dd(a)?;
    let (y1, y2) = (W::from_dd(y1), W::from_dd(y2));
    let f = free_wide(e, a);
    let mut t = TransferMat::<W>::identity();
    for &is_y1 in PATTERN.iter() {
        let y = if is_y1 { y1 } else { y2 };
        t = if derivative {
            f * t
        } else {
            TransferMat {
                m: f.m * t.m,
                dm_de: t.dm_de,
            }
        };
        t = t.kicked(y);
    }
    Ok(t)
}

/// Transfer matrix of one unperturbed block of length `8a`.
pub fn unperturbed_block<E: Energy>(a: f64, e: E) -> Result<TransferMat<E>> {
    Ok(TransferMat::narrow(&block_wide(a, e.widen(), true)?))
}

/// Same as [`unperturbed_block`] with the derivative left at zero.
pub fn unperturbed_block_value<E: Energy>(a: f64, e: E) -> Result<Mat2<E>> {
    Ok(TransferMat::<E>::narrow(&block_wide(a, e.widen(), false)?).m)
}

/// Transfer matrix from `b_{n-1}` to `b_{n-1} + offset` inside a block of
/// length `8a`, `0 <= offset <= 8a`. Deltas sitting exactly at the end point
/// are not applied; they do not affect `u` there.
pub fn partial_block_value<E: Energy>(a: f64, e: E, offset: f64) -> Result<Mat2<E>> {
    let (y1, y2) = amplitudes_dd(a)?;
    let (y1, y2) = (E::Wide::from_dd(y1), E::Wide::from_dd(y2));
    let ew = e.widen();
    let full = free_wide(ew, a).m;
    let mut t = Mat2::<E::Wide>::identity();
    for (k, &is_y1) in PATTERN.iter().enumerate() {
        let rest = offset - k as f64 * a;
        if rest <= 0.0 {
            break;
        }
        if rest < a {
            t = free_wide(ew, rest).m * t;
            break;
        }
        t = full * t;
        if rest > a {
            t = t.kicked(if is_y1 { y1 } else { y2 });
        }
    }
    Ok(t.map(E::narrow))
}

/// `kick(g) * M_a(E)`: one block of the perturbed comb.
pub fn block_mat<E: Energy>(a: f64, e: E, g: f64) -> Result<TransferMat<E>> {
    Ok(unperturbed_block(a, e)?.kicked(E::from_f64(g)))
}

/// `M(E) = [[1 - 5E/3, 1], [-5E/3, 1]]`, the `a -> 0` limit of a block.
pub fn limit_mat<E: Energy>(e: E) -> TransferMat<E> {
    let k = E::from_f64(5.0 / 3.0);
    TransferMat {
        m: Mat2::new(E::one() - k * e, E::one(), -(k * e), E::one()),
        dm_de: Mat2::new(-k, E::zero(), -k, E::zero()),
    }
}

/// Rotation angle `phi = arccos(1 - 5E/6)` of the limit matrix and `dphi/dE`.
pub fn phase(e: f64) -> Result<(f64, f64)> {
    if !(e > 0.0 && e < ELLIPTIC_MAX) {
        return Err(Error::Domain(format!(
            "E = {e} outside (0, 12/5): the limit matrix is not elliptic"
        )));
    }
    let phi = (1.0 - 5.0 * e / 6.0).acos();
    Ok((phi, (5.0 / 6.0) / phi.sin()))
}

/// Unit-norm solution vector plus the log of the discarded scale.
///
/// The true solution is `exp(log_scale) * v`; `dv_de` is the energy
/// derivative of the true solution divided by the same `exp(log_scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationState<T> {
    pub v: [T; 2],
    pub log_scale: f64,
    pub dv_de: [T; 2],
}

impl<T: Scalar> PropagationState<T> {
    /// Energy-independent initial data.
    pub fn new(v: [T; 2]) -> Result<Self> {
        let n = vec_norm(v);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate("initial vector must be nonzero and finite".into()));
        }
        let inv = 1.0 / n;
        Ok(PropagationState {
            v: [v[0].scale(inv), v[1].scale(inv)],
            log_scale: n.ln(),
            dv_de: [T::zero(), T::zero()],
        })
    }

    pub fn propagate(&mut self, mat: &TransferMat<T>) -> Result<()> {
        let w = mat.m.mul_vec(self.v);
        let dw1 = mat.dm_de.mul_vec(self.v);
        let dw2 = mat.m.mul_vec(self.dv_de);
        let n = vec_norm(w);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::SingularPropagation);
        }
        let inv = 1.0 / n;
        self.v = [w[0].scale(inv), w[1].scale(inv)];
        self.dv_de = [(dw1[0] + dw2[0]).scale(inv), (dw1[1] + dw2[1]).scale(inv)];
        self.log_scale += n.ln();
        Ok(())
    }

    /// Propagation without derivative bookkeeping.
    pub fn propagate_value(&mut self, m: &Mat2<T>) -> Result<()> {
        let w = m.mul_vec(self.v);
        let n = vec_norm(w);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::SingularPropagation);
        }
        let inv = 1.0 / n;
        self.v = [w[0].scale(inv), w[1].scale(inv)];
        self.log_scale += n.ln();
        Ok(())
    }

    /// `exp(log_scale) * v`.
    pub fn solution(&self) -> [T; 2] {
        let s = self.log_scale.exp();
        [self.v[0].scale(s), self.v[1].scale(s)]
    }

    pub fn solution_derivative(&self) -> [T; 2] {
        let s = self.log_scale.exp();
        [self.dv_de[0].scale(s), self.dv_de[1].scale(s)]
    }
}

/// Functional form of [`PropagationState::propagate`].
pub fn propagate<T: Scalar>(
    state: PropagationState<T>,
    mat: &TransferMat<T>,
) -> Result<PropagationState<T>> {
    let mut s = state;
    s.propagate(mat)?;
    Ok(s)
}

/// Block matrices `M_{a_n}(E)` of one comb at one energy, shared by every
/// realization propagated at that energy.
#[derive(Clone, Debug)]
pub struct BlockCache<E> {
    pub energy: E,
    blocks: Vec<TransferMat<E>>,
}

impl<E: Energy> BlockCache<E> {
    pub fn new(spec: &CombSpec, energy: E, n: usize) -> Result<Self> {
        if n > spec.n_blocks {
            return Err(Error::Range {
                index: n,
                max: spec.n_blocks,
            });
        }
        let blocks = (1..=n)
            .map(|j| unperturbed_block(spec.a(j), energy))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockCache { energy, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Unperturbed block `n`, from 1.
    #[inline]
    pub fn block(&self, n: usize) -> &TransferMat<E> {
        &self.blocks[n - 1]
    }

    /// Perturbed block `n`.
    #[inline]
    pub fn perturbed(&self, n: usize, g: f64) -> TransferMat<E> {
        self.blocks[n - 1].kicked(E::from_f64(g))
    }
}

/// A matrix held as `exp(log_scale) * mat` with `mat` of unit Frobenius norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledTransfer<T> {
    pub mat: TransferMat<T>,
    pub log_scale: f64,
}

impl<T: Scalar> ScaledTransfer<T> {
    pub fn identity() -> Self {
        let s = 2f64.sqrt();
        ScaledTransfer {
            mat: TransferMat::identity().map(|x: T| x.scale(1.0 / s)),
            log_scale: s.ln(),
        }
    }

    /// Left-multiplies by `factor` and renormalizes.
    pub fn push(&mut self, factor: &TransferMat<T>) {
        let p = *factor * self.mat;
        let n = p.m.norm();
        let inv = 1.0 / n;
        self.mat = p.map(|x| x.scale(inv));
        self.log_scale += n.ln();
    }

    /// Determinant with the scale restored.
    pub fn det(&self) -> T {
        self.mat.m.det().scale((2.0 * self.log_scale).exp())
    }

    pub fn restored(&self) -> TransferMat<T> {
        let s = self.log_scale.exp();
        self.mat.map(|x| x.scale(s))
    }
}

/// Ordered product of the first `n` perturbed blocks, in log-scaled form.
pub fn cumulative_transfer<E: Energy>(
    spec: &CombSpec,
    real: &Realization,
    e: E,
    n: usize,
) -> Result<ScaledTransfer<E>> {
    let max = spec.n_blocks.min(real.len());
    if n == 0 || n > max {
        return Err(Error::Range { index: n, max });
    }
    let mut acc = ScaledTransfer::identity();
    for j in 1..=n {
        acc.push(&block_mat(spec.a(j), e, real.g(j))?);
    }
    Ok(acc)
}

/// Same as [`cumulative_transfer`] using precomputed blocks.
pub fn cumulative_transfer_cached<E: Energy>(
    cache: &BlockCache<E>,
    real: &Realization,
    n: usize,
) -> Result<ScaledTransfer<E>> {
    let max = cache.len().min(real.len());
    if n == 0 || n > max {
        return Err(Error::Range { index: n, max });
    }
    let mut acc = ScaledTransfer::identity();
    for j in 1..=n {
        acc.push(&cache.perturbed(j, real.g(j)));
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub a: f64,
    pub err: f64,
    pub predicted: f64,
    pub ratio: f64,
}

/// `||M_a(E) - M(E)||_max` against the `a^{1/2}` law.
pub fn convergence_report(e: f64, a_list: &[f64]) -> Result<Vec<ConvergenceRow>> {
    phase(e)?;
    let limit = limit_mat(e).m;
    a_list
        .iter()
        .map(|&a| {
            let m = unperturbed_block_value(a, e)?;
            let err = (m - limit).max_abs();
            let predicted = a.sqrt();
            Ok(ConvergenceRow {
                a,
                err,
                predicted,
                ratio: err / predicted,
            })
        })
        .collect()
}

/// Complex energy helper.
pub fn cplx(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn free_zero_length_is_identity() {
        let t = free_mat(1.7, 0.0);
        assert_eq!(t.m, Mat2::identity());
        assert_eq!(t.dm_de, Mat2::zero());
    }

    #[test]
    fn free_half_and_quarter_periods() {
        let t = free_mat(PI * PI, 1.0);
        assert!(close(t.m.get(0, 0), -1.0, 1e-14) && close(t.m.get(1, 1), -1.0, 1e-14));
        assert!(t.m.get(0, 1).abs() < 1e-14 && t.m.get(1, 0).abs() < 1e-13);
        let q = free_mat(1.0, PI / 2.0);
        assert!(q.m.get(0, 0).abs() < 1e-15 && q.m.get(1, 1).abs() < 1e-15);
        assert!(close(q.m.get(0, 1), 1.0, 1e-15) && close(q.m.get(1, 0), -1.0, 1e-15));
    }

    #[test]
    fn free_matches_trigonometry_and_hyperbolics() {
        for &(e, l) in &[(2.3, 0.7), (150.0, 1.3), (0.01, 3.0), (1e-12, 2.0)] {
            let k: f64 = f64::sqrt(e);
            let t = free_mat(e, l);
            assert!(close(t.m.get(0, 0), (k * l).cos(), 1e-12));
            assert!(close(t.m.get(0, 1), (k * l).sin() / k, 1e-12));
            assert!(close(t.m.get(1, 0), -k * (k * l).sin(), 1e-11));
        }
        let k: f64 = 1.5;
        let t = free_mat(-k * k, 0.8);
        assert!(close(t.m.get(0, 0), (k * 0.8).cosh(), 1e-13));
        assert!(close(t.m.get(0, 1), (k * 0.8).sinh() / k, 1e-13));
        assert!(close(t.m.get(1, 0), k * (k * 0.8).sinh(), 1e-13));
        let z = cplx(1.0, 0.3);
        let t = free_mat(z, 2.0);
        let kz = z.sqrt();
        assert!((t.m.get(0, 1) - (kz * 2.0).sin() / kz).norm() < 1e-13);
    }

    #[test]
    fn free_determinant_and_derivative() {
        for &e in &[0.5, 1.0, 2.0, -3.0] {
            let t = free_mat(e, 0.9);
            assert!(close(t.det(), 1.0, 1e-14));
            let h = 1e-6;
            let fd = (free_mat(e + h, 0.9).m - free_mat(e - h, 0.9).m).scale(0.5 / h);
            assert!((fd - t.dm_de).max_abs() < 1e-8);
        }
    }

    #[test]
    fn kicks_compose_additively() {
        let k = kick_mat::<f64>(2.0) * kick_mat(3.0);
        assert_eq!(k, kick_mat(5.0));
        assert_eq!(kick_mat::<f64>(0.0), TransferMat::identity());
        assert_eq!(kick_mat::<f64>(4.0).m.mul_vec([1.0, 0.0]), [1.0, 4.0]);
    }

    #[test]
    fn block_near_limit() {
        // Reference entries from an independent 40-digit evaluation of the
        // eight-factor product.
        let oracle = [
            (1e-4, [-0.7072753468579460, 1.020029557949321, -1.673609823339658, 0.9997966017368016]),
            (1e-8, [-0.6670667266753335, 1.000200003329666, -1.666733361109888, 0.9999999799966660]),
        ];
        for (a, want) in oracle {
            let m = unperturbed_block(a, 1.0).unwrap().m;
            for (k, w) in want.iter().enumerate() {
                assert!((m.get(k / 2, k % 2) - w).abs() < 1e-12, "a={a} entry {k}");
            }
            // The (1,1) deviation is about 4 a^{1/2}.
            assert!((m.get(0, 0) + 2.0 / 3.0).abs() < 5.0 * a.sqrt());
        }
        let a = 1e-4;
        let m = block_mat(a, 1.0, 0.0).unwrap();
        let mg = block_mat(a, 1.0, 0.1).unwrap();
        assert_eq!(mg, m.kicked(0.1));
        assert!(block_mat(1.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn block_is_unimodular() {
        for &a in &[1.0, 0.3, 1e-2, 1e-5, 1e-8, 1e-10] {
            for &e in &[0.2, 1.0, 2.2] {
                let m = unperturbed_block(a, e).unwrap();
                assert!(close(m.det(), 1.0, 1e-12), "a={a} e={e} det={}", m.det());
            }
        }
    }

    #[test]
    fn block_derivative_matches_central_differences() {
        for &e in &[0.5, 1.0, 2.0] {
            for &a in &[0.5, 1e-3, 1e-7] {
                let h = 1e-6;
                let t = unperturbed_block(a, e).unwrap();
                let fd = (unperturbed_block(a, e + h).unwrap().m
                    - unperturbed_block(a, e - h).unwrap().m)
                    .scale(0.5 / h);
                let rel = (fd - t.dm_de).max_abs() / t.dm_de.max_abs();
                assert!(rel < 1e-4, "a={a} e={e} rel={rel}");
            }
        }
    }

    #[test]
    fn complex_path_reproduces_real_path() {
        for &a in &[0.5, 1e-4, 1e-9] {
            let r = unperturbed_block(a, 1.3).unwrap();
            let c = unperturbed_block(a, cplx(1.3, 0.0)).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((c.m.get(i, j).re - r.m.get(i, j)).abs() < 1e-12);
                    assert!(c.m.get(i, j).im.abs() < 1e-12);
                    assert!((c.dm_de.get(i, j).re - r.dm_de.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn limit_matrix_values() {
        let m0 = limit_mat(0.0);
        assert_eq!(m0.m, Mat2::new(1.0, 1.0, 0.0, 1.0));
        let m = limit_mat(6.0 / 5.0);
        assert!((m.m - Mat2::new(-1.0, 1.0, -2.0, 1.0)).max_abs() < 1e-15);
        assert!(m.m.trace().abs() < 1e-15);
        assert!((limit_mat(12.0 / 5.0).m.trace() + 2.0).abs() < 1e-15);
        assert_eq!(m.dm_de, Mat2::new(-5.0 / 3.0, 0.0, -5.0 / 3.0, 0.0));
    }

    #[test]
    fn phase_values() {
        let (phi, dphi) = phase(6.0 / 5.0).unwrap();
        assert!(close(phi, PI / 2.0, 1e-15) && close(dphi, 5.0 / 6.0, 1e-15));
        assert!(phase(1e-12).unwrap().0 < 1e-5);
        let (phi1, _) = phase(1.0).unwrap();
        assert!(close(phi1, 1.4033482475752073, 1e-15));
        // Eigenvalue argument of M(1): roots of x^2 - tr x + 1.
        let tr = limit_mat(1.0).m.trace();
        let arg = f64::atan2((4.0 - tr * tr).sqrt(), tr);
        assert!(close(arg, phi1, 1e-15));
        assert!(phase(0.0).is_err() && phase(2.4).is_err() && phase(-1.0).is_err());
    }

    #[test]
    fn propagate_kick_and_identity() {
        let s = PropagationState::new([1.0, 0.0]).unwrap();
        assert_eq!(propagate(s, &TransferMat::identity()).unwrap(), s);
        let g: f64 = 0.7;
        let k = propagate(s, &kick_mat(g)).unwrap();
        let n = (1.0 + g * g).sqrt();
        assert!(close(k.v[0], 1.0 / n, 1e-16) && close(k.v[1], g / n, 1e-16));
        assert!(close(k.log_scale, 0.5 * (1.0 + g * g).ln(), 1e-16));
        assert!(PropagationState::new([0.0, 0.0]).is_err());
    }

    #[test]
    fn renormalized_product_matches_extended_precision() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut state = PropagationState::new([0.6, -0.8]).unwrap();
        // Extended-precision oracle: unnormalized double-double product with
        // a separate binary exponent to stay in range.
        let mut w = [Dd::from_f64(0.6), Dd::from_f64(-0.8)];
        let mut exp2 = 0i64;
        for _ in 0..10_000 {
            let e = rng.random_range(0.2..2.2);
            let l = rng.random_range(0.01..0.5);
            let g = rng.random_range(-1.0..1.0);
            let t = free_mat(e, l).kicked(g);
            state.propagate(&t).unwrap();
            let m = t.m.map(Dd::from_f64);
            w = m.mul_vec(w);
            let mag = w[0].to_f64().abs().max(w[1].to_f64().abs());
            let k = mag.log2().floor() as i32;
            let f = 2f64.powi(-k);
            w = [w[0].mul_f64(f), w[1].mul_f64(f)];
            exp2 += k as i64;
        }
        let scale = (state.log_scale - exp2 as f64 * 2f64.ln()).exp();
        for i in 0..2 {
            let approx = state.v[i] * scale;
            let exact = w[i].to_f64();
            assert!((approx - exact).abs() <= 1e-8 * vec_norm([w[0].to_f64(), w[1].to_f64()]));
        }
    }

    #[test]
    fn cumulative_transfer_properties() {
        let spec = CombSpec::inverse_square(10_000).unwrap();
        let zero = Realization::zero(10_000);
        let one = cumulative_transfer(&spec, &zero, 1.0, 1).unwrap();
        let direct = block_mat(spec.a(1), 1.0, 0.0).unwrap();
        assert!((one.restored().m - direct.m).max_abs() < 1e-14);

        let cache = BlockCache::new(&spec, 1.0, 10_000).unwrap();
        let mut acc = ScaledTransfer::identity();
        let mut first: f64 = 0.0;
        let mut last: f64 = 0.0;
        for j in 1..=1000 {
            acc.push(&cache.perturbed(j, 0.0));
            let n = acc.restored().m.norm();
            if j <= 100 {
                first = first.max(n);
            } else {
                last = last.max(n);
            }
        }
        // No growth once the blocks are close to the elliptic limit.
        assert!(first < 20.0 && last <= first, "first {first} last {last}");

        let full = cumulative_transfer_cached(&cache, &zero, 10_000).unwrap();
        assert!(close(full.det(), 1.0, 1e-8));
        assert!(cumulative_transfer(&spec, &zero, 1.0, 10_001).is_err());
    }

    #[test]
    fn composition_law() {
        let spec = CombSpec::inverse_square(20).unwrap();
        let mut r = Realization::zero(20);
        r.g.iter_mut().enumerate().for_each(|(j, g)| *g = 0.3 * (j as f64).cos());
        let c19 = cumulative_transfer(&spec, &r, 0.8, 19).unwrap().restored();
        let c20 = cumulative_transfer(&spec, &r, 0.8, 20).unwrap().restored();
        let b20 = block_mat(spec.a(20), 0.8, r.g(20)).unwrap();
        let prod = b20 * c19;
        assert!((prod.m - c20.m).max_abs() < 1e-12 * c20.m.max_abs());
        assert!((prod.dm_de - c20.dm_de).max_abs() < 1e-10 * c20.dm_de.max_abs());
    }

    #[test]
    fn convergence_rows() {
        let rows = convergence_report(1.0, &[1e-4, 1e-6]).unwrap();
        let r = rows[0].err / rows[1].err;
        assert!((5.0..=20.0).contains(&r), "ratio {r}");
        let twice = convergence_report(1.0, &[1e-4, 1e-4]).unwrap();
        assert_eq!(twice[0], twice[1]);
        assert!(convergence_report(2.0, &[1e-8]).unwrap()[0].err < 1e-3);
        assert!(convergence_report(3.0, &[1e-4]).is_err());
    }

    #[test]
    fn convergence_order_is_one_half() {
        let a_list: Vec<f64> = (2..=8).map(|k| 10f64.powi(-k)).collect();
        let rows = convergence_report(1.0, &a_list).unwrap();
        let x: Vec<f64> = rows.iter().map(|r| r.a.ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.err.ln()).collect();
        let slope = crate::linalg::ls_slope(&x, &y);
        assert!((slope - 0.5).abs() < 0.1, "slope {slope}");
    }
}
