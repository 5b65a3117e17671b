//! Scalars and 2×2 matrices shared by the real and complex propagation paths.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::dd::{Cdd, Dd};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn from_dd(x: Dd) -> Self;
    /// Squared modulus, rounded to `f64`.
    fn norm_sqr(self) -> f64;
    fn scale(self, s: f64) -> Self;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_dd(x: Dd) -> Self {
        x.to_f64()
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn from_dd(x: Dd) -> Self {
        Complex64::new(x.to_f64(), 0.0)
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for Dd {
    fn zero() -> Self {
        Dd::ZERO
    }
    fn one() -> Self {
        Dd::ONE
    }
    fn from_f64(x: f64) -> Self {
        Dd::from_f64(x)
    }
    fn from_dd(x: Dd) -> Self {
        x
    }
    fn norm_sqr(self) -> f64 {
        let h = self.to_f64();
        h * h
    }
    fn scale(self, s: f64) -> Self {
        self.mul_f64(s)
    }
}

impl Scalar for Cdd {
    fn zero() -> Self {
        Cdd::new(Dd::ZERO, Dd::ZERO)
    }
    fn one() -> Self {
        Cdd::new(Dd::ONE, Dd::ZERO)
    }
    fn from_f64(x: f64) -> Self {
        Cdd::new(Dd::from_f64(x), Dd::ZERO)
    }
    fn from_dd(x: Dd) -> Self {
        Cdd::new(x, Dd::ZERO)
    }
    fn norm_sqr(self) -> f64 {
        let (r, i) = (self.re.to_f64(), self.im.to_f64());
        r * r + i * i
    }
    fn scale(self, s: f64) -> Self {
        Cdd::new(self.re.mul_f64(s), self.im.mul_f64(s))
    }
}

/// Energy scalar field (`f64` or `Complex64`) together with the
/// double-double type its blocks are assembled in.
pub trait Energy: Scalar + Send + Sync + 'static {
    type Wide: Scalar;
    fn widen(self) -> Self::Wide;
    fn narrow(w: Self::Wide) -> Self;
}

impl Energy for f64 {
    type Wide = Dd;
    fn widen(self) -> Dd {
        Dd::from_f64(self)
    }
    fn narrow(w: Dd) -> f64 {
        w.to_f64()
    }
}

impl Energy for Complex64 {
    type Wide = Cdd;
    fn widen(self) -> Cdd {
        Cdd::new(Dd::from_f64(self.re), Dd::from_f64(self.im))
    }
    fn narrow(w: Cdd) -> Complex64 {
        Complex64::new(w.re.to_f64(), w.im.to_f64())
    }
}

/// Row-major 2×2 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2<T> {
    pub a: [[T; 2]; 2],
}

impl<T: Scalar> Mat2<T> {
    pub fn new(m00: T, m01: T, m10: T, m11: T) -> Self {
        Mat2 {
            a: [[m00, m01], [m10, m11]],
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::one())
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.a[i][j]
    }

    #[inline]
    pub fn mul_vec(&self, v: [T; 2]) -> [T; 2] {
        [
            self.a[0][0] * v[0] + self.a[0][1] * v[1],
            self.a[1][0] * v[0] + self.a[1][1] * v[1],
        ]
    }

    pub fn det(&self) -> T {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn trace(&self) -> T {
        self.a[0][0] + self.a[1][1]
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.a[0][0], self.a[1][0], self.a[0][1], self.a[1][1])
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x.scale(s))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Mat2<U> {
        Mat2::new(
            f(self.a[0][0]),
            f(self.a[0][1]),
            f(self.a[1][0]),
            f(self.a[1][1]),
        )
    }

    /// Left multiplication by the kick `[[1, 0], [g, 1]]`.
    #[inline]
    pub fn kicked(&self, g: T) -> Self {
        Self::new(
            self.a[0][0],
            self.a[0][1],
            self.a[1][0] + g * self.a[0][0],
            self.a[1][1] + g * self.a[0][1],
        )
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.a
            .iter()
            .flatten()
            .map(|x| x.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .flatten()
            .map(|x| x.norm_sqr().sqrt())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> Mul for Mat2<T> {
    type Output = Mat2<T>;
    #[inline]
    fn mul(self, b: Mat2<T>) -> Mat2<T> {
        let a = &self.a;
        let b = &b.a;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl<T: Scalar> Add for Mat2<T> {
    type Output = Mat2<T>;
    fn add(self, b: Mat2<T>) -> Mat2<T> {
        let a = &self.a;
        let b = &b.a;
        Mat2::new(
            a[0][0] + b[0][0],
            a[0][1] + b[0][1],
            a[1][0] + b[1][0],
            a[1][1] + b[1][1],
        )
    }
}

impl<T: Scalar> Sub for Mat2<T> {
    type Output = Mat2<T>;
    fn sub(self, b: Mat2<T>) -> Mat2<T> {
        let a = &self.a;
        let b = &b.a;
        Mat2::new(
            a[0][0] - b[0][0],
            a[0][1] - b[0][1],
            a[1][0] - b[1][0],
            a[1][1] - b[1][1],
        )
    }
}

#[inline]
pub fn vec_norm<T: Scalar>(v: [T; 2]) -> f64 {
    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
    }
    sxy / sxx
}

/// Median of a sample (NaNs are not expected).
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    v[lo] * (1.0 - t) + v[hi] * t
}

/// Harmonic numbers `H_0..=H_n` accumulated in double-double.
pub fn harmonic_numbers(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = Dd::ZERO;
    out.push(0.0);
    for j in 1..=n {
        acc = acc + Dd::from_f64(j as f64).recip();
        out.push(acc.to_f64());
    }
    out
}
