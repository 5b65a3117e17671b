//! The end-to-end validation suite: every acceptance criterion at its stated
//! scale, each reported with measured values, bounds and wall-clock.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::comb::{moment_diagnostics, sample_realization, CombSpec, EnsembleSpec, Realization};
use crate::config::DEFAULT_SEED;
use crate::error::Result;
use crate::linalg::{harmonic_numbers, ls_slope, median};
use crate::path::Propagator;
use crate::prufer::{boundary_data, companion_data, trace_with, wronskian};
use crate::spectral::{
    alpha_theory, beta_theory, excluded_hit, harmonic_slope, invert_alpha, jl_check, jl_constants,
    last_decade_grid, local_dimension_scan, log_space, smallest_scan_epsilon, spectral_window,
    subordinacy_ratio_with, subordinate_pair, CombMedium, ExponentEstimate,
};
use crate::transfer::{convergence_report, limit_mat, phase};

pub const CRITERIA: usize = 13;

/// Depth of the unperturbed dimension scan. The Poisson tail of Stone's
/// formula at η = ε/10 biases the slope upward by about ∂ρ/∂ε ∝ ε; N = 1e5
/// only reaches ε_min = 3.7e-4 and reads 1.19, N = 4e5 reads 1.06.
pub const BASELINE_BLOCKS: usize = 400_000;

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub seed: u64,
    /// Multiplies every tolerance; 0 forces failures.
    pub tolerance_scale: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            seed: DEFAULT_SEED,
            tolerance_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub metrics: Vec<Metric>,
    pub seconds: f64,
    /// Set when the criterion could not be evaluated.
    pub error: Option<String>,
}

impl CriterionResult {
    /// One line: status, id, name, metrics, wall-clock.
    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let body = match &self.error {
            Some(e) => format!("error: {e}"),
            None => self
                .metrics
                .iter()
                .map(|m| format!("{} = {} ({}{})", m.name, num(m.value), m.bound, if m.pass { "" } else { ", violated" }))
                .collect::<Vec<_>>()
                .join("; "),
        };
        format!("[{status}] {:>2} {}: {body} [{:.2} s]", self.id, self.name, self.seconds)
    }
}

/// Compact rendering: fixed point for moderate magnitudes, else scientific.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if !x.is_finite() || (x.fract() == 0.0 && a < 1e9) {
        format!("{x}")
    } else if !(1e-3..1e5).contains(&a) {
        format!("{x:.3e}")
    } else {
        format!("{x:.6}")
    }
}

/// Accumulates metrics with tolerances scaled by `Options::tolerance_scale`.
struct Gate {
    s: f64,
    metrics: Vec<Metric>,
}

impl Gate {
    fn push(&mut self, name: &str, value: f64, bound: String, pass: bool) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
            bound,
            pass: pass && value.is_finite(),
        });
    }

    fn abs(&mut self, name: &str, value: f64, target: f64, tol: f64) {
        let t = tol * self.s;
        self.push(name, value, format!("{} ± {}", num(target), num(t)), (value - target).abs() <= t);
    }

    fn rel(&mut self, name: &str, value: f64, target: f64, tol: f64) {
        let t = tol * self.s;
        let ok = ((value - target) / target).abs() <= t;
        self.push(name, value, format!("{} ± {:.1}%", num(target), 100.0 * t), ok);
    }

    fn below(&mut self, name: &str, value: f64, bound: f64) {
        let b = bound * self.s;
        self.push(name, value, format!("< {}", num(b)), value < b);
    }

    fn at_least(&mut self, name: &str, value: f64, bound: f64) {
        let b = bound / self.s;
        self.push(name, value, format!(">= {}", num(b)), value >= b);
    }

    /// `value` in `(lo, hi)`, half-width scaled about the centre.
    fn band(&mut self, name: &str, value: f64, lo: f64, hi: f64) {
        let (c, h) = ((lo + hi) / 2.0, (hi - lo) / 2.0 * self.s);
        self.push(name, value, format!("in ({}, {})", num(c - h), num(c + h)), (value - c).abs() < h);
    }
}

fn realizations(ens: &EnsembleSpec, count: usize, n: usize) -> Result<Vec<Realization>> {
    (0..count as u64).map(|i| sample_realization(ens, i, n)).collect()
}

pub struct Suite {
    opts: Options,
    baseline: OnceLock<f64>,
}

pub fn names() -> [&'static str; CRITERIA] {
    [
        "transfer-limit convergence",
        "eigenstructure of the limit matrix",
        "norm identity",
        "Prufer norm formula",
        "Wronskian constancy",
        "growth exponent",
        "subordinate decay",
        "dimension formula identity",
        "alpha-subordinacy plateau",
        "Jitomirskaya-Last sandwich",
        "unperturbed baseline",
        "local dimension trend",
        "ensemble diagnostics",
    ]
}

impl Suite {
    pub fn new(opts: Options) -> Self {
        Suite {
            opts,
            baseline: OnceLock::new(),
        }
    }

    /// Runs criterion `id` (1-based); errors become failing results.
    pub fn run(&self, id: usize) -> CriterionResult {
        let t0 = Instant::now();
        let mut g = Gate {
            s: self.opts.tolerance_scale,
            metrics: Vec::new(),
        };
        let outcome = match id {
            1 => self.c1(&mut g),
            2 => self.c2(&mut g),
            3 => self.c3(&mut g),
            4 => self.c4(&mut g),
            5 => self.c5(&mut g),
            6 => self.c6(&mut g),
            7 => self.c7(&mut g),
            8 => self.c8(&mut g),
            9 => self.c9(&mut g),
            10 => self.c10(&mut g),
            11 => self.c11(&mut g),
            12 => self.c12(&mut g),
            13 => self.c13(&mut g),
            _ => panic!("no criterion {id}"),
        };
        let error = outcome.err().map(|e| e.to_string());
        CriterionResult {
            id,
            name: names()[id - 1],
            pass: error.is_none() && !g.metrics.is_empty() && g.metrics.iter().all(|m| m.pass),
            metrics: g.metrics,
            seconds: t0.elapsed().as_secs_f64(),
            error,
        }
    }

    pub fn run_all(&self) -> Vec<CriterionResult> {
        (1..=CRITERIA).map(|id| self.run(id)).collect()
    }

    fn rademacher(&self, lambda: f64) -> Result<EnsembleSpec> {
        EnsembleSpec::rademacher(lambda, self.opts.seed)
    }

    fn c1(&self, g: &mut Gate) -> Result<()> {
        let rows = convergence_report(1.0, &[1e-2, 1e-4, 1e-6, 1e-8])?;
        let x: Vec<f64> = rows.iter().map(|r| r.a.ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.err.ln()).collect();
        g.abs("log-log slope", ls_slope(&x, &y), 0.5, 0.1);
        Ok(())
    }

    fn c2(&self, g: &mut Gate) -> Result<()> {
        let (mut modulus, mut cosine, mut arg) = (0f64, 0f64, 0f64);
        for k in 0..1000 {
            let e = 2.4 * (k as f64 + 0.5) / 1000.0;
            let m = limit_mat(e).m;
            let (half, det) = (m.trace() / 2.0, m.det());
            let (re, im) = (half, (det - half * half).sqrt());
            let theta = im.atan2(re);
            modulus = modulus.max((re.hypot(im) - 1.0).abs());
            cosine = cosine.max((theta.cos() - (1.0 - 5.0 * e / 6.0)).abs());
            arg = arg.max((theta - phase(e)?.0).abs());
        }
        g.below("max ||lambda| - 1|", modulus, 1e-12);
        g.below("max |cos arg - (1 - 5E/6)|", cosine, 1e-12);
        g.below("max |arg - phase(E)|", arg, 1e-12);
        Ok(())
    }

    fn c3(&self, g: &mut Gate) -> Result<()> {
        let n = 1000;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let mut worst = 0f64;
        for real in realizations(&self.rademacher(1.0)?, 10, n)? {
            let t = trace_with(&prop, &real, 0.0, n)?;
            let q = t.norm_quadrature(n);
            worst = worst.max((t.norm_identity(n)? - q).abs() / q);
        }
        g.below("max rel |identity - quadrature|, n = 1e3", worst, 1e-8);
        // Block 1 (a = 1) carries no deltas: a free segment of length 8.
        let path = prop.solve(&Realization::zero(n), boundary_data(0.0), 1)?;
        let mut free = 0f64;
        for k in 1..=32 {
            let l = k as f64 * 0.25;
            let exact = l / 2.0 - (2.0 * l).sin() / 4.0;
            free = free.max((path.norm_sq_at(&spec, l)? - exact).abs() / exact);
        }
        g.below("max rel error vs L/2 - sin(2L)/4", free, 1e-10);
        Ok(())
    }

    fn c4(&self, g: &mut Gate) -> Result<()> {
        let n = 10_000;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let rel = |real: &Realization| -> Result<f64> {
            let t = trace_with(&prop, real, 0.0, n)?;
            let q = t.norm_quadrature(n);
            Ok((t.norm_prufer(n) - q).abs() / q)
        };
        g.below("zero ensemble rel error, n = 1e4", rel(&Realization::zero(n))?, 0.01);
        let worst = realizations(&self.rademacher(1.0)?, 10, n)?
            .iter()
            .map(rel)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        g.below("lambda = 1 max rel error, 10 realizations", worst, 0.01);
        Ok(())
    }

    fn c5(&self, g: &mut Gate) -> Result<()> {
        let n = 10_000;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let mut reals = realizations(&self.rademacher(1.0)?, 10, n)?;
        reals.push(Realization::zero(n));
        let mut worst = 0f64;
        for real in &reals {
            let u1 = prop.solve(real, boundary_data(0.0), n)?;
            let u2 = prop.solve(real, companion_data(0.0), n)?;
            let w0 = wronskian(&u1.states[0], &u2.states[0]);
            for (a, b) in u1.states.iter().zip(&u2.states) {
                worst = worst.max(((wronskian(a, b) - w0) / w0).abs());
            }
        }
        g.below("max rel Wronskian drift over 1e4 blocks", worst, 1e-8);
        Ok(())
    }

    fn beta_estimate(&self, lambda: f64, count: usize, n: usize) -> Result<ExponentEstimate> {
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let h = harmonic_numbers(n);
        let ens = self.rademacher(lambda)?;
        let slopes = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let real = sample_realization(&ens, i, n)?;
                harmonic_slope(&trace_with(&prop, &real, 0.0, n)?, &h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExponentEstimate::from_slopes(1.0, lambda, n, slopes))
    }

    fn c6(&self, g: &mut Gate) -> Result<()> {
        let est = self.beta_estimate(1.0, 100, 100_000)?;
        g.rel("median beta, lambda = 1", est.beta_hat, 9.0 / 70.0, 0.15);
        let est = self.beta_estimate(0.5, 100, 100_000)?;
        g.rel("median beta, lambda = 0.5", est.beta_hat, 9.0 / 280.0, 0.20);
        Ok(())
    }

    fn c7(&self, g: &mut Gate) -> Result<()> {
        let n = 100_000;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let ens = self.rademacher(1.0)?;
        let slopes = (0..100u64)
            .into_par_iter()
            .map(|i| {
                let real = sample_realization(&ens, i, n)?;
                let pair = subordinate_pair(&prop, &real, n / 4, n)?;
                Ok([pair.decay_slope()?, pair.growth_slope()?, pair.norm_sq_slope()?])
            })
            .collect::<Result<Vec<_>>>()?;
        let col = |k: usize| median(&slopes.iter().map(|s| s[k]).collect::<Vec<_>>());
        let beta = beta_theory(1.0, 1.0);
        g.rel("median decay slope", col(0), -beta, 0.25);
        g.rel("median companion growth slope", col(1), beta, 0.15);
        g.rel("median ln ||u^S||^2 vs ln n slope", col(2), 1.0 - 2.0 * beta, 0.25);
        Ok(())
    }

    fn c8(&self, g: &mut Gate) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        let (mut identity, mut inversion) = (0f64, 0f64);
        let mut k = 0;
        while k < 1000 {
            let lambda = rng.random_range(0.01..1.99);
            let w = spectral_window(lambda)?;
            let e = rng.random_range(w.lower..w.upper);
            if excluded_hit(e).is_some() || w.guard_hit(e).is_some() {
                continue;
            }
            let a = alpha_theory(e, lambda)?;
            identity = identity.max((a - (1.0 - 2.0 * beta_theory(e, lambda))).abs());
            let (lo, hi) = invert_alpha(a, lambda)?;
            inversion = inversion.max((lo - e).abs().min((hi - e).abs()));
            k += 1;
        }
        g.below("max |alpha - (1 - 2 beta)|", identity, 1e-14);
        g.below("max invert_alpha round-trip error in E", inversion, 1e-10);
        Ok(())
    }

    fn c9(&self, g: &mut Gate) -> Result<()> {
        let n = 100_000;
        let count = 50;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let ens = self.rademacher(1.0)?;
        let alpha = alpha_theory(1.0, 1.0)?;
        let grid = last_decade_grid(&spec, n, 21);
        let x: Vec<f64> = grid.iter().map(|l| l.ln()).collect();
        let flags = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let real = sample_realization(&ens, i, n)?;
                let pair = subordinate_pair(&prop, &real, n / 4, n)?;
                let ratio = |a: f64| subordinacy_ratio_with(&spec, &pair, a, &grid);
                let (mid, low, high) = (ratio(alpha)?, ratio(alpha - 0.2)?, ratio(alpha + 0.2)?);
                let (max, min) = mid
                    .iter()
                    .fold((f64::MIN, f64::MAX), |(a, b), &r| (a.max(r), b.min(r)));
                let trend = |r: &[f64]| ls_slope(&x, &r.iter().map(|v| v.ln()).collect::<Vec<_>>());
                let last = grid.len() - 1;
                let plateau = max / min < 3.0;
                let diverges = trend(&low) > 0.0 && low[last] / low[0] > 3.0;
                let decays = trend(&high) < 0.0 && high[0] / high[last] > 3.0;
                Ok([plateau, diverges, decays])
            })
            .collect::<Result<Vec<_>>>()?;
        let frac = |f: &dyn Fn(&[bool; 3]) -> bool| {
            flags.iter().filter(|v| f(v)).count() as f64 / count as f64
        };
        g.at_least("fraction with all three", frac(&|v| v[0] && v[1] && v[2]), 0.8);
        g.at_least("fraction plateau < factor 3", frac(&|v| v[0]), 0.8);
        g.at_least("fraction alpha - 0.2 diverging > factor 3", frac(&|v| v[1]), 0.8);
        g.at_least("fraction alpha + 0.2 decaying > factor 3", frac(&|v| v[2]), 0.8);
        Ok(())
    }

    fn c10(&self, g: &mut Gate) -> Result<()> {
        let n = 100_000;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let (lo, hi) = jl_constants();
        let reals = realizations(&self.rademacher(1.0)?, 10, n)?;
        let rows = reals
            .par_iter()
            .map(|real| jl_check(&CombMedium::with(&prop, real, 0.0, n)?, 1.0, &[1e-1, 1e-2, 1e-3]))
            .collect::<Result<Vec<_>>>()?;
        let products: Vec<f64> = rows.iter().flatten().map(|r| r.product).collect();
        let pmin = products.iter().cloned().fold(f64::MAX, f64::min);
        let pmax = products.iter().cloned().fold(f64::MIN, f64::max);
        g.band("min r|m| over 30 cells", pmin, lo, hi);
        g.band("max r|m| over 30 cells", pmax, lo, hi);
        Ok(())
    }

    fn zero_scan(&self) -> Result<f64> {
        if let Some(&s) = self.baseline.get() {
            return Ok(s);
        }
        let n = BASELINE_BLOCKS;
        let spec = CombSpec::inverse_square(n)?;
        let reals = vec![Realization::zero(n)];
        let emin = smallest_scan_epsilon(&spec, &reals, 1.0, n)?;
        let scan = local_dimension_scan(&spec, &reals, 1.0, &log_space(emin, 100.0 * emin, 5), 64, n)?;
        Ok(*self.baseline.get_or_init(|| scan.slope))
    }

    fn c11(&self, g: &mut Gate) -> Result<()> {
        let n = BASELINE_BLOCKS;
        let spec = CombSpec::inverse_square(n)?;
        let prop = Propagator::new(&spec, 1.0, n)?;
        let path = prop.solve(&Realization::zero(n), boundary_data(0.0), n)?;
        let r = |k: usize| path.norms[k] / k as f64;
        g.below("last-decade drift of ||psi||^2/n", (r(n) - r(n / 10)).abs() / r(n), 0.10);
        g.abs("local dimension slope", self.zero_scan()?, 1.0, 0.15);
        Ok(())
    }

    fn c12(&self, g: &mut Gate) -> Result<()> {
        let ens = self.rademacher(1.0)?;
        let mut slopes = Vec::new();
        for n in [10_000, 100_000] {
            let spec = CombSpec::inverse_square(n)?;
            let reals = realizations(&ens, 10, n)?;
            let emin = smallest_scan_epsilon(&spec, &reals, 1.0, n)?;
            let grid = log_space(emin, 100.0 * emin, 5);
            slopes.push(local_dimension_scan(&spec, &reals, 1.0, &grid, 64, n)?.slope);
        }
        let alpha = alpha_theory(1.0, 1.0)?;
        let baseline = self.zero_scan()?;
        g.band("slope at N = 1e5", slopes[1], 0.5, 1.0);
        g.at_least("baseline minus slope", baseline - slopes[1], 0.1);
        g.push(
            "slope at N = 1e4",
            slopes[0],
            format!("|slope - {alpha:.4}| above that at N = 1e5"),
            (slopes[1] - alpha).abs() < (slopes[0] - alpha).abs() && g.s > 0.0,
        );
        Ok(())
    }

    fn c13(&self, g: &mut Gate) -> Result<()> {
        let n = 10_000;
        let count = 100;
        let h = harmonic_numbers(n)[n];
        let rad = realizations(&self.rademacher(1.0)?, count, n)?;
        let mut sum_err = 0f64;
        let mut fourth_err = 0f64;
        for r in &rad {
            let m = moment_diagnostics(std::slice::from_ref(r))?;
            sum_err = sum_err.max((m.partial_sum - h).abs() / h);
            for (j, &x) in r.g.iter().enumerate() {
                let k = (j + 1) as f64;
                fourth_err = fourth_err.max((x.powi(4) * k * k - 1.0).abs());
            }
        }
        g.below("rademacher max rel |sum g^2 - H_N|", sum_err, 1e-13);
        g.below("rademacher max |n^2 g_n^4 - 1|", fourth_err, 1e-13);
        let uni = moment_diagnostics(&realizations(&EnsembleSpec::uniform(1.0, self.opts.seed)?, count, n)?)?;
        let cells = (count * n) as f64;
        // Standard errors from Var(3U^2) = 0.8 and Var(9U^4) = 5.76, U ~ U[-1, 1].
        g.abs("uniform mean n g^2", uni.second_moment, 1.0, 5.0 * (0.8 / cells).sqrt());
        g.abs("uniform mean n^2 g^4", uni.fourth_moment, 1.8, 5.0 * (5.76 / cells).sqrt());
        let var_sum: f64 = (1..=n).map(|k| 0.8 / (k * k) as f64).sum();
        g.abs("uniform mean sum g^2", uni.partial_sum, h, 5.0 * (var_sum / count as f64).sqrt());
        Ok(())
    }
}
