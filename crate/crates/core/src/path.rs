//! Real-energy solution paths: a solution propagated block by block with its
//! energy derivative and the exact running integral of `u^2`.
//!
//! Between deltas a solution is `u(t) = u0 c(t) + u0' s(t)` with `c, s` the
//! free solutions, so the integral of `u^2` over a segment is a quadratic form
//! in `(u0, u0')` with an explicit Gram matrix. Summing the forms over the
//! eight segments of a block gives one 2×2 form per block that depends only
//! on `(a_n, E)`.

use crate::comb::{amplitudes_dd, CombSpec, Realization, PATTERN};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::linalg::Mat2;
use crate::transfer::{free_gram, BlockCache, PropagationState};

fn block_form(a: f64, e: f64) -> Result<Mat2<f64>> {
    let (y1, y2) = amplitudes_dd(a)?;
    let (free, gram) = free_gram(Dd::from_f64(e), a);
    let mut p = Mat2::<Dd>::identity();
    let mut q = Mat2::<Dd>::zero();
    for &is_y1 in PATTERN.iter() {
        q = q + p.transpose() * gram * p;
        p = (free * p).kicked(if is_y1 { y1 } else { y2 });
    }
    Ok(q.map(|x| x.to_f64()))
}

/// Integral of `u^2` from `b_{n-1}` to `b_{n-1} + offset` for the solution
/// with data `w` just right of `b_{n-1}`, evaluated in double-double.
pub fn partial_block_integral(a: f64, e: f64, w: [f64; 2], offset: f64) -> Result<f64> {
    let (y1, y2) = amplitudes_dd(a)?;
    let (free, gram) = free_gram(Dd::from_f64(e), a);
    let mut v = [Dd::from_f64(w[0]), Dd::from_f64(w[1])];
    let mut acc = Dd::ZERO;
    for (k, &is_y1) in PATTERN.iter().enumerate() {
        let start = k as f64 * a;
        if offset <= start {
            break;
        }
        let len = (offset - start).min(a);
        let g = if len < a { free_gram(Dd::from_f64(e), len).1 } else { gram };
        let gv = g.mul_vec(v);
        acc = acc + v[0] * gv[0] + v[1] * gv[1];
        v = free.mul_vec(v);
        v[1] = v[1] + (if is_y1 { y1 } else { y2 }) * v[0];
    }
    Ok(acc.to_f64())
}

/// Everything needed to propagate many realizations at one real energy.
#[derive(Clone, Debug)]
pub struct Propagator<'a> {
    pub spec: &'a CombSpec,
    pub energy: f64,
    pub blocks: BlockCache<f64>,
    /// Per-block quadratic forms of `int u^2`.
    forms: Vec<Mat2<f64>>,
}

impl<'a> Propagator<'a> {
    pub fn new(spec: &'a CombSpec, energy: f64, n: usize) -> Result<Self> {
        let blocks = BlockCache::new(spec, energy, n)?;
        let forms = (1..=n)
            .map(|j| block_form(spec.a(j), energy))
            .collect::<Result<Vec<_>>>()?;
        Ok(Propagator {
            spec,
            energy,
            blocks,
            forms,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Integral of `u^2` over block `n` for data `v` at `b_{n-1}` (scale 1).
    #[inline]
    pub fn block_integral(&self, n: usize, v: [f64; 2]) -> f64 {
        let q = &self.forms[n - 1];
        let qv = q.mul_vec(v);
        v[0] * qv[0] + v[1] * qv[1]
    }

    /// Propagates `init` (given at `x = 0`) through `n` blocks.
    pub fn solve(&self, real: &Realization, init: [f64; 2], n: usize) -> Result<SolutionPath> {
        let max = self.len().min(real.len());
        if n > max {
            return Err(Error::Range { index: n, max });
        }
        let mut state = PropagationState::new(init)?;
        let mut states = Vec::with_capacity(n + 1);
        let mut norms = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        states.push(state);
        norms.push(0.0);
        for j in 1..=n {
            acc += (2.0 * state.log_scale).exp() * self.block_integral(j, state.v);
            state.propagate(&self.blocks.perturbed(j, real.g(j)))?;
            states.push(state);
            norms.push(acc);
        }
        Ok(SolutionPath {
            energy: self.energy,
            states,
            norms,
        })
    }
}

/// A solution sampled at the breakpoints `b_0 = 0, b_1, ..., b_N`.
#[derive(Clone, Debug)]
pub struct SolutionPath {
    pub energy: f64,
    /// `states[n]` holds `(u, u')(b_n)` just right of `b_n`.
    pub states: Vec<PropagationState<f64>>,
    /// `norms[n]` = integral of `u^2` over `[0, b_n]` by exact quadrature.
    pub norms: Vec<f64>,
}

impl SolutionPath {
    pub fn blocks(&self) -> usize {
        self.states.len() - 1
    }

    /// Squared norm on `[0, L]` for any `0 <= L <= b_N`.
    pub fn norm_sq_at(&self, spec: &CombSpec, l: f64) -> Result<f64> {
        if l <= 0.0 {
            return Ok(0.0);
        }
        let n = spec
            .block_containing(l)
            .filter(|&n| n <= self.blocks())
            .ok_or_else(|| Error::Input(format!("L = {l} beyond the propagated range")))?;
        let s = &self.states[n - 1];
        let partial = partial_block_integral(spec.a(n), self.energy, s.v, l - spec.b(n - 1))?;
        Ok(self.norms[n - 1] + (2.0 * s.log_scale).exp() * partial)
    }
}
