//! Experiment orchestration: fan out over (energy, realization) work items,
//! write CSV outputs in a fixed order, and record a manifest.
//!
//! Workers only compute; every file is written from this thread in
//! (energy index, realization index) order, so outputs do not depend on the
//! thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::acceptance::{Options, Suite, CRITERIA};
use crate::comb::{
    amplitudes, moment_diagnostics, potential_rows, sample_realization, CombSpec, EnsembleKind,
    Realization,
};
use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::{harmonic_numbers, ls_slope};
use crate::path::Propagator;
use crate::prufer::trace_with;
use crate::spectral::{
    alpha_theory, harmonic_slope, jl_check, local_dimension_scan, log_space, smallest_scan_epsilon,
    CombMedium, ComplexPropagator, ExponentEstimate,
};
use crate::transfer::convergence_report;

/// `a` values of the transfer-limit report.
pub const REPORT_AMPLITUDES: [f64; 4] = [1e-2, 1e-4, 1e-6, 1e-8];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: String,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, bound: impl Into<String>, pass: bool) -> Self {
        Check {
            name: name.into(),
            measured,
            bound: bound.into(),
            pass: pass && !measured.is_nan(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Substream {
    pub index: u64,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub site: String,
    pub energy: Option<f64>,
    pub realization: Option<u64>,
    pub master_seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub substreams: Vec<Substream>,
    /// `(C1, eps)` of the sup bound `|g_n| <= C1 n^{-1/3-eps}`.
    pub sup_bound: (f64, f64),
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    pub failure: Option<Failure>,
    pub passed: bool,
}

/// One work item's identity, for failure reports.
#[derive(Clone, Copy)]
struct Cell {
    energy: Option<(usize, f64)>,
    realization: Option<u64>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    spec: CombSpec,
}

struct Out {
    dir: PathBuf,
    master_seed: u64,
    outputs: Vec<String>,
    checks: Vec<Check>,
    failure: Option<Failure>,
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

impl Out {
    fn fail(&mut self, cell: Cell, site: &str, e: &Error) {
        if self.failure.is_none() {
            self.failure = Some(Failure {
                site: site.to_string(),
                energy: cell.energy.map(|x| x.1),
                realization: cell.realization,
                master_seed: self.master_seed,
                message: e.to_string(),
            });
        }
    }

    /// Writes `rows` to `name` under the output directory.
    fn write<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = writer(&self.dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

/// Evaluates `f` over cells in parallel chunks and hands each result to
/// `sink` in cell order. Failed cells are recorded and skipped.
fn fan_out<T: Send>(
    out: &mut Out,
    cells: Vec<Cell>,
    site: &str,
    f: impl Fn(Cell) -> Result<T> + Sync,
    mut sink: impl FnMut(&mut Out, Cell, T) -> Result<()>,
) -> Result<()> {
    let chunk = 2 * rayon::current_num_threads();
    for part in cells.chunks(chunk) {
        let done: Vec<Result<T>> = part.par_iter().map(|&c| f(c)).collect();
        for (&c, r) in part.iter().zip(done) {
            match r {
                Ok(v) => sink(out, c, v)?,
                Err(e) => out.fail(c, site, &e),
            }
        }
    }
    Ok(())
}

impl Ctx<'_> {
    fn realization(&self, index: u64) -> Result<Realization> {
        match self.cfg.ensemble.kind {
            EnsembleKind::Zero => Ok(Realization::zero(self.spec.n_blocks)),
            _ => sample_realization(&self.cfg.ensemble, index, self.spec.n_blocks),
        }
    }

    fn reals(&self) -> u64 {
        self.cfg.realizations as u64
    }

    fn energy_cells(&self) -> Vec<Cell> {
        self.cfg
            .energies
            .iter()
            .enumerate()
            .map(|(k, &e)| Cell {
                energy: Some((k, e)),
                realization: None,
            })
            .collect()
    }

    fn grid_cells(&self, k: usize, e: f64) -> Vec<Cell> {
        (0..self.reals())
            .map(|i| Cell {
                energy: Some((k, e)),
                realization: Some(i),
            })
            .collect()
    }

    fn dump_potential(&self, out: &mut Out) -> Result<()> {
        let cells: Vec<Cell> = (0..self.reals())
            .map(|i| Cell {
                energy: None,
                realization: Some(i),
            })
            .collect();
        let mut violations = 0usize;
        let mut reals = Vec::new();
        fan_out(
            out,
            cells,
            "dump-potential",
            |c| {
                let real = self.realization(c.realization.unwrap_or(0))?;
                let rows = potential_rows(&self.spec, &real)?;
                Ok((real, rows))
            },
            |run, c, (real, rows)| {
                for r in &rows {
                    let n = r.block_index;
                    let inside = r.position > self.spec.b(n - 1) && r.position <= self.spec.b(n);
                    let a = self.spec.a(n);
                    let (y1, y2) = amplitudes(a)?;
                    let signed = a == 1.0 || (y1 > 0.0 && y2 < 0.0);
                    violations += usize::from(!(inside && signed));
                }
                run.write(&format!("potential_r{}.csv", c.realization.unwrap_or(0)), rows)?;
                reals.push(real);
                Ok(())
            },
        )?;
        out.checks.push(Check::new(
            "delta geometry and sign structure violations",
            violations as f64,
            "= 0",
            violations == 0,
        ));
        if !reals.is_empty() {
            let m = moment_diagnostics(&reals)?;
            if self.cfg.ensemble.kind == EnsembleKind::RademacherScaled {
                let rel = (m.partial_sum - m.partial_sum_expected).abs() / m.partial_sum_expected;
                out.checks.push(Check::new(
                    "mean sum g^2 vs lambda^2 H_N (relative)",
                    rel,
                    "< 1e-12",
                    rel < 1e-12,
                ));
            }
            out.write("moments.csv", [m])?;
        }
        Ok(())
    }

    fn transfer_report(&self, out: &mut Out) -> Result<()> {
        let x: Vec<f64> = REPORT_AMPLITUDES.iter().map(|a| a.ln()).collect();
        fan_out(
            out,
            self.energy_cells(),
            "transfer-report",
            |c| convergence_report(c.energy.map_or(1.0, |x| x.1), &REPORT_AMPLITUDES),
            |run, c, rows| {
                let (k, e) = c.energy.unwrap_or((0, 1.0));
                let y: Vec<f64> = rows.iter().map(|r| r.err.ln()).collect();
                let slope = ls_slope(&x, &y);
                run.checks.push(Check::new(
                    format!("E = {e}: log-log slope of ||M_a - M||_max"),
                    slope,
                    "0.5 ± 0.1",
                    (slope - 0.5).abs() <= 0.1,
                ));
                run.write(&format!("transfer_e{k}.csv"), rows)
            },
        )
    }

    fn prufer_trace(&self, out: &mut Out) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            n: usize,
            b_n: f64,
            #[serde(rename = "log_R")]
            log_r: f64,
            theta: f64,
            #[serde(rename = "dtheta_dE")]
            dtheta_de: f64,
            norm_identity: f64,
            norm_quadrature: f64,
            norm_prufer: f64,
        }
        let n = self.spec.n_blocks;
        let (mut identity, mut prufer) = (0f64, 0f64);
        for (k, e) in self.cfg.energies.clone().into_iter().enumerate() {
            let prop = match Propagator::new(&self.spec, e, n) {
                Ok(p) => p,
                Err(err) => {
                    out.fail(Cell { energy: Some((k, e)), realization: None }, "prufer-trace", &err);
                    continue;
                }
            };
            let cells = self.grid_cells(k, e);
            let phi_bc = self.cfg.boundary_angle;
            fan_out(
            out,
                cells,
                "prufer-trace",
                |c| {
                    let real = self.realization(c.realization.unwrap_or(0))?;
                    let t = trace_with(&prop, &real, phi_bc, n)?;
                    (1..=n)
                        .map(|j| {
                            Ok(Row {
                                n: j,
                                b_n: self.spec.b(j),
                                log_r: t.points[j].log_r,
                                theta: t.points[j].theta,
                                dtheta_de: t.points[j].dtheta_de,
                                norm_identity: t.norm_identity(j)?,
                                norm_quadrature: t.norm_quadrature(j),
                                norm_prufer: t.norm_prufer(j),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                },
                |run, c, rows| {
                    let last = &rows[rows.len() - 1];
                    let q = last.norm_quadrature;
                    identity = identity.max((last.norm_identity - q).abs() / q);
                    prufer = prufer.max((last.norm_prufer - q).abs() / q);
                    run.write(&format!("prufer_e{k}_r{}.csv", c.realization.unwrap_or(0)), rows)
                },
            )?;
        }
        out.checks.push(Check::new(
            format!("max rel |norm_identity - norm_quadrature| at n = {n}"),
            identity,
            "< 1e-6",
            identity < 1e-6,
        ));
        if n >= 10_000 {
            out.checks.push(Check::new(
                format!("max rel |norm_prufer - norm_quadrature| at n = {n}"),
                prufer,
                "< 1e-2",
                prufer < 1e-2,
            ));
        }
        Ok(())
    }

    fn exponent_sweep(&self, out: &mut Out) -> Result<()> {
        #[derive(Serialize)]
        struct Slope {
            energy: f64,
            realization: u64,
            slope: f64,
        }
        let n = self.spec.n_blocks;
        let h = harmonic_numbers(n);
        let mut estimates = Vec::new();
        let mut slopes_out = Vec::new();
        for (k, e) in self.cfg.energies.clone().into_iter().enumerate() {
            let prop = match Propagator::new(&self.spec, e, n) {
                Ok(p) => p,
                Err(err) => {
                    out.fail(Cell { energy: Some((k, e)), realization: None }, "exponent-sweep", &err);
                    continue;
                }
            };
            let mut slopes = Vec::new();
            let phi_bc = self.cfg.boundary_angle;
            fan_out(
            out,
                self.grid_cells(k, e),
                "exponent-sweep",
                |c| {
                    let real = self.realization(c.realization.unwrap_or(0))?;
                    harmonic_slope(&trace_with(&prop, &real, phi_bc, n)?, &h)
                },
                |_, c, s| {
                    slopes.push(s);
                    slopes_out.push(Slope {
                        energy: e,
                        realization: c.realization.unwrap_or(0),
                        slope: s,
                    });
                    Ok(())
                },
            )?;
            if slopes.is_empty() {
                continue;
            }
            let est = ExponentEstimate::from_slopes(e, self.cfg.ensemble.effective_lambda(), n, slopes);
            if est.beta_theory > 0.0 {
                let rel = (est.beta_hat - est.beta_theory) / est.beta_theory;
                out.checks.push(Check::new(
                    format!("E = {e}: (beta_hat - beta) / beta"),
                    rel,
                    "|.| <= 0.2",
                    rel.abs() <= 0.2,
                ));
            }
            estimates.push(est);
        }
        #[derive(Serialize)]
        struct Row {
            energy: f64,
            lambda: f64,
            beta_hat: f64,
            beta_theory: f64,
            alpha_hat: f64,
            alpha_theory: f64,
            n_used: usize,
            realizations_used: usize,
            dispersion: f64,
        }
        let rows: Vec<Row> = estimates
            .iter()
            .map(|x| Row {
                energy: x.energy,
                lambda: x.lambda,
                beta_hat: x.beta_hat,
                beta_theory: x.beta_theory,
                alpha_hat: x.alpha_hat,
                alpha_theory: x.alpha_theory,
                n_used: x.n_used,
                realizations_used: x.realizations_used,
                dispersion: x.dispersion,
            })
            .collect();
        out.write("exponent_sweep.csv", rows)?;
        out.write("exponent_slopes.csv", slopes_out)
    }

    fn mfunc_scan(&self, out: &mut Out) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            energy: f64,
            eps: f64,
            realization: u64,
            truncation_l: f64,
            m_re: f64,
            m_im: f64,
        }
        let n = self.spec.n_blocks;
        let l = self.spec.b(n);
        let mut cells = Vec::new();
        for (k, &e) in self.cfg.energies.iter().enumerate() {
            cells.extend(self.grid_cells(k, e));
        }
        let mut rows = Vec::new();
        let mut min_im = f64::INFINITY;
        fan_out(
            out,
            cells,
            "mfunc-scan",
            |c| {
                let e = c.energy.map_or(1.0, |x| x.1);
                let real = self.realization(c.realization.unwrap_or(0))?;
                self.cfg
                    .epsilons
                    .iter()
                    .map(|&eps| {
                        let cp = ComplexPropagator::new(&self.spec, num_complex::Complex64::new(e, eps), n)?;
                        Ok((eps, cp.m_at(&real, self.cfg.boundary_angle, l)?.m))
                    })
                    .collect::<Result<Vec<_>>>()
            },
            |_, c, ms| {
                for (eps, m) in ms {
                    min_im = min_im.min(m.im);
                    rows.push(Row {
                        energy: c.energy.map_or(1.0, |x| x.1),
                        eps,
                        realization: c.realization.unwrap_or(0),
                        truncation_l: l,
                        m_re: m.re,
                        m_im: m.im,
                    });
                }
                Ok(())
            },
        )?;
        out.checks
            .push(Check::new("min Im m (Herglotz)", min_im, "> 0", min_im > 0.0));
        out.write("mfunc_scan.csv", rows)
    }

    fn jl_check(&self, out: &mut Out) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            energy: f64,
            realization: u64,
            eps: f64,
            l_eps: f64,
            m_truncation: f64,
            ratio: f64,
            m_abs: f64,
            product: f64,
            pass: bool,
        }
        let n = self.spec.n_blocks;
        let mut rows = Vec::new();
        let mut failed = 0usize;
        for (k, e) in self.cfg.energies.clone().into_iter().enumerate() {
            let prop = match Propagator::new(&self.spec, e, n) {
                Ok(p) => p,
                Err(err) => {
                    out.fail(Cell { energy: Some((k, e)), realization: None }, "jl-check", &err);
                    continue;
                }
            };
            fan_out(
            out,
                self.grid_cells(k, e),
                "jl-check",
                |c| {
                    let real = self.realization(c.realization.unwrap_or(0))?;
                    let med = CombMedium::with(&prop, &real, self.cfg.boundary_angle, n)?;
                    jl_check(&med, e, &self.cfg.epsilons)
                },
                |_, c, cells| {
                    for r in cells {
                        failed += usize::from(!r.pass);
                        rows.push(Row {
                            energy: r.energy,
                            realization: c.realization.unwrap_or(0),
                            eps: r.eps,
                            l_eps: r.l_eps,
                            m_truncation: r.m_truncation,
                            ratio: r.ratio,
                            m_abs: r.m_abs,
                            product: r.product,
                            pass: r.pass,
                        });
                    }
                    Ok(())
                },
            )?;
        }
        out.checks.push(Check::new(
            "cells outside (5 - sqrt 24, 5 + sqrt 24)",
            failed as f64,
            "= 0",
            failed == 0,
        ));
        out.write("jl_check.csv", rows)
    }

    fn dimension_scan(&self, out: &mut Out) -> Result<()> {
        #[derive(Serialize)]
        struct Rho {
            energy: f64,
            realization: u64,
            eps: f64,
            truncation_blocks: usize,
            rho: f64,
        }
        #[derive(Serialize)]
        struct Row {
            energy: f64,
            lambda: f64,
            realizations: usize,
            eps_min: f64,
            eps_max: f64,
            slope: f64,
            alpha_theory: f64,
            nodes: usize,
            shifted_nodes: usize,
        }
        let n = self.spec.n_blocks;
        let lambda = self.cfg.ensemble.effective_lambda();
        let (mut rho_rows, mut rows) = (Vec::new(), Vec::new());
        for (k, e) in self.cfg.energies.clone().into_iter().enumerate() {
            let cell = Cell { energy: Some((k, e)), realization: None };
            let scan = (|| {
                let reals = (0..self.reals())
                    .map(|i| self.realization(i))
                    .collect::<Result<Vec<_>>>()?;
                let grid = if self.cfg.epsilons.is_empty() {
                    let emin = smallest_scan_epsilon(&self.spec, &reals, e, n)?;
                    log_space(emin, 100.0 * emin, 5)
                } else {
                    self.cfg.epsilons.clone()
                };
                local_dimension_scan(&self.spec, &reals, e, &grid, 64, n)
            })();
            let scan = match scan {
                Ok(s) => s,
                Err(err) => {
                    out.fail(cell, "dimension-scan", &err);
                    continue;
                }
            };
            for (r, row) in scan.rho.iter().enumerate() {
                for (j, &rho) in row.iter().enumerate() {
                    rho_rows.push(Rho {
                        energy: e,
                        realization: r as u64,
                        eps: scan.eps[j],
                        truncation_blocks: scan.truncation_blocks[j],
                        rho,
                    });
                }
            }
            let alpha = if lambda > 0.0 { alpha_theory(e, lambda).unwrap_or(f64::NAN) } else { 1.0 };
            let (name, pass, bound) = if lambda > 0.0 {
                ("slope below the absolutely continuous value 1", scan.slope < 1.0, "< 1")
            } else {
                ("|slope - 1| (absolutely continuous baseline)", (scan.slope - 1.0).abs() <= 0.15, "|.| <= 0.15")
            };
            out.checks.push(Check::new(format!("E = {e}: {name}"), scan.slope, bound, pass));
            let (lo, hi) = scan
                .eps
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            rows.push(Row {
                energy: e,
                lambda,
                realizations: scan.rho.len(),
                eps_min: lo,
                eps_max: hi,
                slope: scan.slope,
                alpha_theory: alpha,
                nodes: scan.nodes,
                shifted_nodes: scan.shifted_nodes,
            });
        }
        out.write("dimension_scan.csv", rows)?;
        out.write("dimension_scan_rho.csv", rho_rows)
    }

    fn validate(&self, out: &mut Out, opts: Options, criteria: &[usize]) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            criterion: usize,
            name: &'a str,
            metric: &'a str,
            value: f64,
            bound: &'a str,
            pass: bool,
            seconds: f64,
        }
        let suite = Suite::new(opts);
        let results: Vec<_> = criteria
            .iter()
            .map(|&id| {
                let r = suite.run(id);
                eprintln!("{}", r.line());
                r
            })
            .collect();
        for r in &results {
            let violated = r.metrics.iter().filter(|m| !m.pass).count();
            let bound = match &r.error {
                Some(e) => format!("not evaluated: {e}"),
                None => format!("metrics violated out of {}, must be 0", r.metrics.len()),
            };
            out.checks.push(Check::new(
                format!("criterion {}: {}", r.id, r.name),
                violated as f64,
                bound,
                r.pass,
            ));
        }
        let rows: Vec<Row> = results
            .iter()
            .flat_map(|r| {
                r.metrics.iter().map(move |m| Row {
                    criterion: r.id,
                    name: r.name,
                    metric: &m.name,
                    value: m.value,
                    bound: &m.bound,
                    pass: m.pass,
                    seconds: r.seconds,
                })
            })
            .collect();
        out.write("acceptance.csv", rows)?;
        fs::write(out.dir.join("acceptance.json"), serde_json::to_string_pretty(&results)?)?;
        out.outputs.push("acceptance.json".into());
        Ok(())
    }
}

/// Options of the `validate` experiment; ignored by the others.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Multiplies every acceptance tolerance (0 forces failures).
    pub tolerance_scale: f64,
    /// Criteria to run, 1-based.
    pub criteria: Vec<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            tolerance_scale: 1.0,
            criteria: (1..=CRITERIA).collect(),
        }
    }
}

/// Executes `cfg`, writing outputs and `manifest.json` into `cfg.output_dir`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunManifest> {
    if let Some(&bad) = opts.criteria.iter().find(|&&c| c == 0 || c > CRITERIA) {
        return Err(Error::Config(format!("no criterion {bad}; criteria are 1..={CRITERIA}")));
    }
    let t0 = Instant::now();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let ctx = Ctx {
        cfg,
        spec: cfg.comb.spec()?,
    };
    let mut out = Out {
        dir,
        master_seed: cfg.ensemble.master_seed,
        outputs: Vec::new(),
        checks: Vec::new(),
        failure: None,
    };
    let o = &mut out;
    match cfg.experiment {
        Experiment::DumpPotential => ctx.dump_potential(o)?,
        Experiment::TransferReport => ctx.transfer_report(o)?,
        Experiment::PruferTrace => ctx.prufer_trace(o)?,
        Experiment::ExponentSweep => ctx.exponent_sweep(o)?,
        Experiment::MfuncScan => ctx.mfunc_scan(o)?,
        Experiment::JlCheck => ctx.jl_check(o)?,
        Experiment::DimensionScan => ctx.dimension_scan(o)?,
        Experiment::Validate => ctx.validate(
            o,
            Options {
                seed: cfg.ensemble.master_seed,
                tolerance_scale: opts.tolerance_scale,
            },
            &opts.criteria,
        )?,
    }
    let uses_realizations = !matches!(cfg.experiment, Experiment::TransferReport | Experiment::Validate);
    let substreams = if uses_realizations && cfg.ensemble.kind != EnsembleKind::Zero {
        (0..cfg.realizations as u64)
            .map(|index| Substream {
                index,
                master_seed: cfg.ensemble.master_seed,
            })
            .collect()
    } else {
        Vec::new()
    };
    let passed = out.failure.is_none() && out.checks.iter().all(|c| c.pass);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        substreams,
        sup_bound: cfg.ensemble.sup_bound_constants(),
        wall_clock_seconds: t0.elapsed().as_secs_f64(),
        outputs: out.outputs,
        checks: out.checks,
        failure: out.failure,
        passed,
    };
    fs::write(
        manifest.config.output_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
