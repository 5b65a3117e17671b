//! Three operations for the static demo page. Each returns a JSON string;
//! errors come back as a thrown string. The exported wrappers are thin so
//! the bodies can be tested off the browser.

use deltacomb::comb::{sample_realization, CombSpec, EnsembleSpec, Realization};
use deltacomb::path::Propagator;
use deltacomb::prufer::trace_with;
use deltacomb::spectral::{alpha_theory, beta_theory, estimate_beta, log_grid, spectral_window};
use deltacomb::transfer::{convergence_report, phase};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Blocks accepted from the page; larger runs belong on the command line.
pub const MAX_BLOCKS: usize = 200_000;

type Out = Result<String, String>;

fn json<T: Serialize>(value: &T) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn fail(e: deltacomb::Error) -> String {
    e.to_string()
}

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct AlphaCurve {
    lambda: f64,
    lower: f64,
    upper: f64,
    excluded: [f64; 3],
    sup_alpha: f64,
    energy: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

/// `α(E)` and `β(E)` sampled across the window `J(λ)`.
#[wasm_bindgen]
pub fn alpha_curve(lambda: f64, points: usize) -> Result<String, JsValue> {
    js(curve(lambda, points))
}

fn curve(lambda: f64, points: usize) -> Out {
    let w = spectral_window(lambda).map_err(fail)?;
    let points = points.clamp(3, 2000);
    // Open interval: α vanishes at both ends.
    let h = (w.upper - w.lower) / (points + 1) as f64;
    let energy: Vec<f64> = (1..=points).map(|k| w.lower + k as f64 * h).collect();
    let alpha = energy
        .iter()
        .map(|&e| alpha_theory(e, lambda))
        .collect::<deltacomb::Result<Vec<_>>>()
        .map_err(fail)?;
    let beta = energy.iter().map(|&e| beta_theory(e, lambda)).collect();
    json(&AlphaCurve {
        lambda,
        lower: w.lower,
        upper: w.upper,
        excluded: w.excluded,
        sup_alpha: 1.0 - lambda * lambda / 4.0,
        energy,
        alpha,
        beta,
    })
}

#[derive(Serialize)]
struct TraceSummary {
    energy: f64,
    lambda: f64,
    phi: f64,
    n: Vec<usize>,
    log_r: Vec<f64>,
    harmonic: Vec<f64>,
    norm_per_block: Vec<f64>,
    beta_hat: f64,
    beta_theory: f64,
}

/// Prüfer trace of one realization, sampled on a log grid of blocks.
/// `lambda = 0` selects the unperturbed comb.
#[wasm_bindgen]
pub fn prufer_summary(energy: f64, lambda: f64, n_blocks: usize, seed: u32, index: u32) -> Result<String, JsValue> {
    js(summary(energy, lambda, n_blocks, seed, index))
}

fn summary(energy: f64, lambda: f64, n_blocks: usize, seed: u32, index: u32) -> Out {
    if !(10_000..=MAX_BLOCKS).contains(&n_blocks) {
        return Err(format!("blocks must lie in [10000, {MAX_BLOCKS}]"));
    }
    let spec = CombSpec::inverse_square(n_blocks).map_err(fail)?;
    let real = if lambda == 0.0 {
        Realization::zero(n_blocks)
    } else {
        let ens = EnsembleSpec::rademacher(lambda, u64::from(seed)).map_err(fail)?;
        sample_realization(&ens, u64::from(index), n_blocks).map_err(fail)?
    };
    let prop = Propagator::new(&spec, energy, n_blocks).map_err(fail)?;
    let trace = trace_with(&prop, &real, 0.0, n_blocks).map_err(fail)?;
    let est = estimate_beta(std::slice::from_ref(&trace)).map_err(fail)?;
    let n = log_grid(1, n_blocks, 30);
    let mut h = 0.0;
    let mut harmonic = Vec::with_capacity(n.len());
    let mut k = 0;
    for &m in &n {
        while k < m {
            k += 1;
            h += 1.0 / k as f64;
        }
        harmonic.push(h);
    }
    json(&TraceSummary {
        energy,
        lambda,
        phi: phase(energy).map_err(fail)?.0,
        log_r: n.iter().map(|&m| trace.points[m].log_r).collect(),
        norm_per_block: n.iter().map(|&m| trace.norm_quadrature(m) / m as f64).collect(),
        harmonic,
        n,
        beta_hat: est.beta_hat,
        beta_theory: est.beta_theory,
    })
}

/// Distance between the block matrix and its limit, for `a = 10^{-1..-8}`.
#[wasm_bindgen]
pub fn transfer_convergence(energy: f64) -> Result<String, JsValue> {
    js(convergence(energy))
}

fn convergence(energy: f64) -> Out {
    let a: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
    json(&convergence_report(energy, &a).map_err(fail)?)
}
