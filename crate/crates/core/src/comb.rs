//! The deterministic comb and its random perturbation.
//!
//! Block `n` occupies `(b_{n-1}, b_n]` with `b_n - b_{n-1} = 8 a_n` and carries
//! eight deltas at `b_{n-1} + k a_n`, `k = 1..8`, with amplitudes
//! `(y1, y2, y2, y1, y2, y1, y1, y2)`. The random kick `g_n` sits on the last
//! delta of block `n` (at `b_n`) and is merged additively with `y2(a_n)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::linalg::harmonic_numbers;

/// Hard ceiling on the number of blocks a comb may hold.
pub const MAX_BLOCKS: usize = 10_000_000;

/// Position-ordered amplitude pattern inside one block (true = `y1`).
pub const PATTERN: [bool; 8] = [true, false, false, true, false, true, true, false];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    InverseSquare,
    InversePower,
}

/// Block-length law `a_n = c n^{-p}` (`p = 2` for the inverse-square rule).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRule {
    pub kind: RuleKind,
    pub scale: f64,
    pub exponent: f64,
}

impl SequenceRule {
    pub fn inverse_square(scale: f64) -> Result<Self> {
        Self::new(RuleKind::InverseSquare, scale, 2.0)
    }

    pub fn inverse_power(scale: f64, exponent: f64) -> Result<Self> {
        Self::new(RuleKind::InversePower, scale, exponent)
    }

    pub fn new(kind: RuleKind, scale: f64, exponent: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("sequence scale must be positive, got {scale}")));
        }
        let exponent = match kind {
            RuleKind::InverseSquare => 2.0,
            RuleKind::InversePower => exponent,
        };
        if !(exponent >= 2.0 && exponent.is_finite()) {
            return Err(Error::Domain(format!(
                "sequence exponent must be >= 2 for a summable comb, got {exponent}"
            )));
        }
        Ok(SequenceRule {
            kind,
            scale,
            exponent,
        })
    }

    pub fn exponent(&self) -> f64 {
        match self.kind {
            RuleKind::InverseSquare => 2.0,
            RuleKind::InversePower => self.exponent,
        }
    }

    /// `a_n` for `n >= 1`.
    pub fn a(&self, n: usize) -> f64 {
        assert!(n >= 1, "block index starts at 1");
        let n = n as f64;
        match self.kind {
            RuleKind::InverseSquare => self.scale / (n * n),
            RuleKind::InversePower => self.scale * n.powf(-self.exponent),
        }
    }

    /// `b = sum_{n>=1} 8 a_n = 8 c zeta(p)`.
    pub fn total_length(&self) -> f64 {
        8.0 * self.scale * zeta(self.exponent())
    }
}

/// `a_n` for a rule.
pub fn sequence_a(rule: &SequenceRule, n: usize) -> f64 {
    rule.a(n)
}

/// Riemann zeta for real `p > 1` by Euler–Maclaurin with cutoff 64.
fn zeta(p: f64) -> f64 {
    if p == 2.0 {
        return std::f64::consts::PI * std::f64::consts::PI / 6.0;
    }
    const K: usize = 64;
    let mut s = Dd::ZERO;
    for n in 1..K {
        s = s + Dd::from_f64((n as f64).powf(-p));
    }
    let k = K as f64;
    let mut tail = k.powf(1.0 - p) / (p - 1.0) + 0.5 * k.powf(-p);
    // Bernoulli corrections B2/2!, B4/4!, B6/6!.
    let b = [1.0 / 12.0, -1.0 / 720.0, 1.0 / 30240.0];
    let mut rising = p; // p (p+1) ... (p + 2j - 2)
    let mut pow = k.powf(-p - 1.0);
    for (j, bj) in b.iter().enumerate() {
        tail += bj * rising * pow;
        let m = (2 * j + 1) as f64;
        rising *= (p + m) * (p + m + 1.0);
        pow /= k * k;
    }
    (s + Dd::from_f64(tail)).to_f64()
}

/// `(y1, y2)` for block length `a` in `(0, 1]`.
pub fn amplitudes(a: f64) -> Result<(f64, f64)> {
    let (y1, y2) = amplitudes_dd(a)?;
    Ok((y1.to_f64(), y2.to_f64()))
}

/// Double-double `y1 = a^{-3/2} - a^{-1}`, `y2 = a^{-1/2} - a^{-1}`.
pub fn amplitudes_dd(a: f64) -> Result<(Dd, Dd)> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::Domain(format!("block length must lie in (0, 1], got {a}")));
    }
    let inv = Dd::from_f64(a).recip();
    let root = inv.sqrt();
    Ok((inv * root - inv, root - inv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombSpec {
    pub rule: SequenceRule,
    pub n_blocks: usize,
    /// `a[n-1] = a_n`.
    a: Vec<f64>,
    /// `b[n] = b_n` for `n = 0..=N`, `b[0] = 0`.
    b: Vec<f64>,
    pub total_length: f64,
}

impl CombSpec {
    pub fn new(rule: SequenceRule, n_blocks: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Domain("comb needs at least one block".into()));
        }
        if n_blocks > MAX_BLOCKS {
            return Err(Error::Capacity {
                requested: n_blocks,
                max: MAX_BLOCKS,
            });
        }
        let a: Vec<f64> = (1..=n_blocks).map(|n| rule.a(n)).collect();
        if a[0] > 1.0 {
            return Err(Error::Domain(format!(
                "a_1 = {} exceeds 1; the block amplitudes require 0 < a <= 1",
                a[0]
            )));
        }
        let mut b = Vec::with_capacity(n_blocks + 1);
        let mut acc = Dd::ZERO;
        b.push(0.0);
        for &an in &a {
            acc = acc + Dd::from_f64(an).mul_f64(8.0);
            b.push(acc.to_f64());
        }
        Ok(CombSpec {
            rule,
            n_blocks,
            a,
            b,
            total_length: rule.total_length(),
        })
    }

    /// Default comb `a_n = n^{-2}`.
    pub fn inverse_square(n_blocks: usize) -> Result<Self> {
        Self::new(SequenceRule::inverse_square(1.0)?, n_blocks)
    }

    /// `a_n`, `n` from 1.
    #[inline]
    pub fn a(&self, n: usize) -> f64 {
        self.a[n - 1]
    }

    /// `b_n`, `n` from 0.
    #[inline]
    pub fn b(&self, n: usize) -> f64 {
        self.b[n]
    }

    /// `b_1..=b_N`.
    pub fn breakpoints(&self) -> &[f64] {
        &self.b[1..]
    }

    pub fn lengths(&self) -> &[f64] {
        &self.a
    }

    /// Positions of the eight deltas of block `n`.
    pub fn delta_positions(&self, n: usize) -> [f64; 8] {
        let start = self.b(n - 1);
        let a = self.a(n);
        let mut out = [0.0; 8];
        for (k, x) in out.iter_mut().enumerate() {
            *x = if k == 7 { self.b(n) } else { start + (k + 1) as f64 * a };
        }
        out
    }

    /// Block index `n` with `b_{n-1} < x <= b_n`; `None` outside `(0, b_N]`.
    pub fn block_containing(&self, x: f64) -> Option<usize> {
        if !(x > 0.0 && x <= self.b[self.n_blocks]) {
            return None;
        }
        let idx = self.b.partition_point(|&bn| bn < x);
        Some(idx.max(1))
    }
}

/// `b_1..=b_N`.
pub fn breakpoints(spec: &CombSpec) -> Vec<f64> {
    spec.breakpoints().to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    RademacherScaled,
    UniformScaled,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub lambda: f64,
    pub master_seed: u64,
}

impl EnsembleSpec {
    pub fn new(kind: EnsembleKind, lambda: f64, master_seed: u64) -> Result<Self> {
        if kind != EnsembleKind::Zero && !(lambda > 0.0 && lambda < 2.0) {
            return Err(Error::Domain(format!(
                "lambda = {lambda} lies outside (0, 2), where the exponent law holds"
            )));
        }
        Ok(EnsembleSpec {
            kind,
            lambda,
            master_seed,
        })
    }

    pub fn rademacher(lambda: f64, master_seed: u64) -> Result<Self> {
        Self::new(EnsembleKind::RademacherScaled, lambda, master_seed)
    }

    pub fn uniform(lambda: f64, master_seed: u64) -> Result<Self> {
        Self::new(EnsembleKind::UniformScaled, lambda, master_seed)
    }

    pub fn zero() -> Self {
        EnsembleSpec {
            kind: EnsembleKind::Zero,
            lambda: 0.0,
            master_seed: 0,
        }
    }

    /// Perturbation strength actually present (`0` for the zero ensemble).
    pub fn effective_lambda(&self) -> f64 {
        match self.kind {
            EnsembleKind::Zero => 0.0,
            _ => self.lambda,
        }
    }

    /// Constants `(C1, eps)` of the sup bound `|g_n| <= C1 n^{-1/3-eps}`.
    pub fn sup_bound_constants(&self) -> (f64, f64) {
        match self.kind {
            EnsembleKind::RademacherScaled => (self.lambda, 1.0 / 6.0),
            EnsembleKind::UniformScaled => (self.lambda * 3f64.sqrt(), 1.0 / 6.0),
            EnsembleKind::Zero => (0.0, 1.0 / 6.0),
        }
    }

    fn value(&self, n: usize, word: u64) -> f64 {
        let scale = self.lambda / (n as f64).sqrt();
        match self.kind {
            EnsembleKind::Zero => 0.0,
            EnsembleKind::RademacherScaled => {
                if word >> 63 == 1 {
                    scale
                } else {
                    -scale
                }
            }
            EnsembleKind::UniformScaled => {
                let u = (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                scale * 3f64.sqrt() * (2.0 * u - 1.0)
            }
        }
    }

    fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index);
        rng
    }

    /// Random access to `g_n` of realization `index`; agrees with
    /// [`sample_realization`] entry by entry.
    pub fn draw(&self, index: u64, n: usize) -> f64 {
        assert!(n >= 1);
        let mut rng = self.stream(index);
        rng.set_word_pos(2 * (n as u128 - 1));
        self.value(n, rng.next_u64())
    }
}

/// One sampled perturbation sequence; `g[n-1] = g_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub g: Vec<f64>,
    pub seed: u64,
    pub index: u64,
    pub ensemble: EnsembleSpec,
}

impl Realization {
    /// The unperturbed comb.
    pub fn zero(n: usize) -> Self {
        Realization {
            g: vec![0.0; n],
            seed: 0,
            index: 0,
            ensemble: EnsembleSpec::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// `g_n`, `n` from 1.
    #[inline]
    pub fn g(&self, n: usize) -> f64 {
        self.g[n - 1]
    }
}

/// Samples `g_1..=g_N` for realization `index`. Entry `n` is word `2(n-1)`
/// of ChaCha8 stream `index` keyed by the master seed, so any entry can be
/// regenerated alone and prefixes are stable under extension.
pub fn sample_realization(ens: &EnsembleSpec, index: u64, n: usize) -> Result<Realization> {
    let ens = EnsembleSpec::new(ens.kind, ens.lambda, ens.master_seed)?;
    if n == 0 {
        return Err(Error::Domain("realization needs N >= 1".into()));
    }
    let g = match ens.kind {
        EnsembleKind::Zero => vec![0.0; n],
        _ => {
            let mut rng = ens.stream(index);
            (1..=n).map(|j| ens.value(j, rng.next_u64())).collect()
        }
    };
    Ok(Realization {
        g,
        seed: ens.master_seed,
        index,
        ensemble: ens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub realizations: usize,
    pub n_blocks: usize,
    /// Mean over blocks and realizations of `n g_n^2`.
    pub second_moment: f64,
    /// Mean over blocks and realizations of `n^2 g_n^4`.
    pub fourth_moment: f64,
    /// Mean over realizations of `sum_{j<=N} g_j^2`.
    pub partial_sum: f64,
    /// `lambda^2 H_N`, the expected value of `partial_sum`.
    pub partial_sum_expected: f64,
    /// Mean over realizations of `xi_n = g_n sqrt(n) / lambda`.
    pub sign_mean: f64,
}

pub fn moment_diagnostics(reals: &[Realization]) -> Result<MomentReport> {
    let first = reals
        .first()
        .ok_or_else(|| Error::Input("moment diagnostics need at least one realization".into()))?;
    let n = first.len();
    let lambda = first.ensemble.effective_lambda();
    let (mut m2, mut m4, mut psum, mut xi) = (Dd::ZERO, Dd::ZERO, Dd::ZERO, Dd::ZERO);
    let mut count = 0usize;
    for r in reals {
        if r.len() != n {
            return Err(Error::Input("realizations differ in length".into()));
        }
        for (j, &g) in r.g.iter().enumerate() {
            let nj = (j + 1) as f64;
            let g2 = Dd::from_f64(g) * Dd::from_f64(g);
            m2 = m2 + g2.mul_f64(nj);
            m4 = m4 + (g2 * g2).mul_f64(nj * nj);
            psum = psum + g2;
            if lambda > 0.0 {
                xi = xi + Dd::from_f64(g * nj.sqrt() / lambda);
            }
            count += 1;
        }
    }
    let h = harmonic_numbers(n)[n];
    let count = count as f64;
    Ok(MomentReport {
        realizations: reals.len(),
        n_blocks: n,
        second_moment: m2.to_f64() / count,
        fourth_moment: m4.to_f64() / count,
        partial_sum: psum.to_f64() / reals.len() as f64,
        partial_sum_expected: lambda * lambda * h,
        sign_mean: xi.to_f64() / count,
    })
}

/// One row of the potential dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub block_index: usize,
    pub position: f64,
    pub amplitude: f64,
    pub kind: &'static str,
}

/// Every delta of the perturbed comb, in position order.
pub fn potential_rows(spec: &CombSpec, real: &Realization) -> Result<Vec<DeltaRow>> {
    let mut rows = Vec::with_capacity(8 * spec.n_blocks);
    for n in 1..=spec.n_blocks.min(real.len()) {
        let (y1, y2) = amplitudes(spec.a(n))?;
        for (k, x) in spec.delta_positions(n).into_iter().enumerate() {
            let (amplitude, kind) = match (k, PATTERN[k]) {
                (7, _) => (y2 + real.g(n), "y2+g"),
                (_, true) => (y1, "y1"),
                (_, false) => (y2, "y2"),
            };
            rows.push(DeltaRow {
                block_index: n,
                position: x,
                amplitude,
                kind,
            });
        }
    }
    Ok(rows)
}
