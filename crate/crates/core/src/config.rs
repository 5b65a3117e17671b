//! Run configuration: one TOML document per run, validated and fully
//! defaulted before anything is computed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comb::{CombSpec, EnsembleKind, EnsembleSpec, RuleKind, SequenceRule, MAX_BLOCKS};
use crate::error::{Error, Result};
use crate::spectral::{excluded_energies, spectral_window, GUARD_RADIUS};
use crate::transfer::ELLIPTIC_MAX;

/// Master seed used when a config does not name one.
pub const DEFAULT_SEED: u64 = 20261014;
pub const DEFAULT_EPSILONS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DumpPotential,
    TransferReport,
    PruferTrace,
    ExponentSweep,
    MfuncScan,
    JlCheck,
    DimensionScan,
    Validate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::DumpPotential => "dump-potential",
            Experiment::TransferReport => "transfer-report",
            Experiment::PruferTrace => "prufer-trace",
            Experiment::ExponentSweep => "exponent-sweep",
            Experiment::MfuncScan => "mfunc-scan",
            Experiment::JlCheck => "jl-check",
            Experiment::DimensionScan => "dimension-scan",
            Experiment::Validate => "validate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombConfig {
    pub kind: RuleKind,
    pub scale: f64,
    pub exponent: f64,
    pub n_blocks: usize,
}

impl Default for CombConfig {
    fn default() -> Self {
        CombConfig {
            kind: RuleKind::InverseSquare,
            scale: 1.0,
            exponent: 2.0,
            n_blocks: 100_000,
        }
    }
}

impl CombConfig {
    pub fn spec(&self) -> Result<CombSpec> {
        CombSpec::new(SequenceRule::new(self.kind, self.scale, self.exponent)?, self.n_blocks)
    }
}

/// Energies as an explicit list or an inclusive linear grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Energies {
    List(Vec<f64>),
    Grid { start: f64, stop: f64, count: usize },
}

impl Energies {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            Energies::List(ref v) => Ok(v.clone()),
            Energies::Grid { start, stop, count } => {
                if count == 0 {
                    return Err(Error::Config("energy grid count must be >= 1".into()));
                }
                if count == 1 {
                    return Ok(vec![start]);
                }
                let h = (stop - start) / (count - 1) as f64;
                Ok((0..count).map(|k| start + k as f64 * h).collect())
            }
        }
    }
}

/// A validated run description; a run is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub comb: CombConfig,
    pub ensemble: EnsembleSpec,
    pub energies: Vec<f64>,
    pub realizations: usize,
    pub boundary_angle: f64,
    /// Empty for `dimension-scan` means the grid is chosen from the truncation.
    pub epsilons: Vec<f64>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComb {
    #[serde(alias = "rule")]
    kind: Option<RuleKind>,
    scale: Option<f64>,
    exponent: Option<f64>,
    n_blocks: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    kind: Option<EnsembleKind>,
    lambda: Option<f64>,
    master_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<Experiment>,
    /// Shorthand for `ensemble.lambda`.
    lambda: Option<f64>,
    comb: Option<RawComb>,
    ensemble: Option<RawEnsemble>,
    energies: Option<Energies>,
    realizations: Option<usize>,
    boundary_angle: Option<f64>,
    epsilons: Option<Vec<f64>>,
    output_dir: Option<PathBuf>,
}

const TOP_KEYS: &[&str] = &[
    "experiment",
    "lambda",
    "comb",
    "ensemble",
    "energies",
    "realizations",
    "boundary_angle",
    "epsilons",
    "output_dir",
];
const COMB_KEYS: &[&str] = &["kind", "rule", "scale", "exponent", "n_blocks"];
const ENSEMBLE_KEYS: &[&str] = &["kind", "lambda", "master_seed"];
const GRID_KEYS: &[&str] = &["start", "stop", "count"];

fn unknown_keys(doc: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    let mut scan = |table: &toml::Table, allowed: &[&str], prefix: &str| {
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                out.push(format!("{prefix}{k}"));
            }
        }
    };
    scan(doc, TOP_KEYS, "");
    for (key, allowed) in [("comb", COMB_KEYS), ("ensemble", ENSEMBLE_KEYS), ("energies", GRID_KEYS)] {
        if let Some(toml::Value::Table(t)) = doc.get(key) {
            scan(t, allowed, &format!("{key}."));
        }
    }
    out
}

fn excluded_name(x: f64) -> &'static str {
    let [lo, mid, _] = excluded_energies();
    if x == mid {
        "6/5"
    } else if x == lo {
        "3(2-sqrt 2)/5"
    } else {
        "3(2+sqrt 2)/5"
    }
}

/// Parses a TOML config, fills defaults and validates it. `experiment` may be
/// left out when the caller supplies it (the CLI subcommand).
pub fn parse_config(text: &str, experiment: Option<Experiment>) -> Result<RunConfig> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let unknown = unknown_keys(&doc);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(raw, experiment)
}

/// Reads a TOML config, or a JSON run manifest whose `config` echo is reused.
pub fn load_config(path: &Path, experiment: Option<Experiment>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|x| x == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let echo = value.get("config").cloned().unwrap_or(value);
        let mut cfg: RunConfig =
            serde_json::from_value(echo).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(x) = experiment {
            cfg.experiment = x;
        }
        validate(&cfg)?;
        return Ok(cfg);
    }
    parse_config(&text, experiment)
}

fn resolve(raw: RawConfig, experiment: Option<Experiment>) -> Result<RunConfig> {
    let experiment = match (experiment, raw.experiment) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!(
                "config names experiment {} but {} was requested",
                b.name(),
                a.name()
            )))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Config("no experiment given".into())),
    };
    let c = raw.comb.unwrap_or_default();
    let d = CombConfig::default();
    let kind = c.kind.unwrap_or(d.kind);
    let comb = CombConfig {
        kind,
        scale: c.scale.unwrap_or(d.scale),
        exponent: match kind {
            RuleKind::InverseSquare => 2.0,
            RuleKind::InversePower => c.exponent.ok_or_else(|| {
                Error::Config("comb.exponent is required for the inverse-power rule".into())
            })?,
        },
        n_blocks: c.n_blocks.unwrap_or(d.n_blocks),
    };
    let ens = raw.ensemble.unwrap_or_default();
    let lambda = match (raw.lambda, ens.lambda) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!(
                "lambda = {a} conflicts with ensemble.lambda = {b}"
            )))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => 1.0,
    };
    let kind = ens.kind.unwrap_or(EnsembleKind::RademacherScaled);
    let ensemble = EnsembleSpec {
        kind,
        lambda: if kind == EnsembleKind::Zero { 0.0 } else { lambda },
        master_seed: ens.master_seed.unwrap_or(DEFAULT_SEED),
    };
    let epsilons = match raw.epsilons {
        Some(v) => v,
        None if experiment == Experiment::DimensionScan => Vec::new(),
        None => DEFAULT_EPSILONS.to_vec(),
    };
    let cfg = RunConfig {
        experiment,
        comb,
        ensemble,
        energies: raw.energies.unwrap_or(Energies::List(vec![1.0])).values()?,
        realizations: raw.realizations.unwrap_or(100),
        boundary_angle: raw.boundary_angle.unwrap_or(0.0),
        epsilons,
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
    };
    validate(&cfg)?;
    Ok(cfg)
}

/// Domain checks; every offending energy is listed at once.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(msg));
    if cfg.comb.n_blocks == 0 || cfg.comb.n_blocks > MAX_BLOCKS {
        return bad(format!("comb.n_blocks = {} outside 1..={MAX_BLOCKS}", cfg.comb.n_blocks));
    }
    SequenceRule::new(cfg.comb.kind, cfg.comb.scale, cfg.comb.exponent)
        .map_err(|e| Error::Config(e.to_string()))?;
    let zero = cfg.ensemble.kind == EnsembleKind::Zero;
    if !zero && !(cfg.ensemble.lambda > 0.0 && cfg.ensemble.lambda < 2.0) {
        return bad(format!(
            "lambda = {} violates the constraint lambda in (0, 2)",
            cfg.ensemble.lambda
        ));
    }
    if cfg.realizations == 0 {
        return bad("realizations must be >= 1".into());
    }
    if !cfg.boundary_angle.is_finite() {
        return bad("boundary_angle must be finite".into());
    }
    if cfg.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return bad("epsilons must be positive".into());
    }
    if cfg.energies.is_empty() {
        return bad("energies must not be empty".into());
    }
    let (lo, hi, what) = if zero {
        (0.0, ELLIPTIC_MAX, "(0, 12/5)".to_string())
    } else {
        let w = spectral_window(cfg.ensemble.lambda).map_err(|e| Error::Config(e.to_string()))?;
        (w.lower, w.upper, format!("J({}) = ({}, {})", cfg.ensemble.lambda, w.lower, w.upper))
    };
    let mut outside = Vec::new();
    let mut guarded = BTreeSet::new();
    let mut near = Vec::new();
    for &e in &cfg.energies {
        if !(e > lo + GUARD_RADIUS && e < hi - GUARD_RADIUS) {
            outside.push(e.to_string());
        } else if let Some(x) = excluded_energies()
            .into_iter()
            .find(|x| (e - x).abs() < GUARD_RADIUS)
        {
            guarded.insert(excluded_name(x));
            near.push(e.to_string());
        }
    }
    let mut msgs = Vec::new();
    if !outside.is_empty() {
        msgs.push(format!("energies outside {what}: {}", outside.join(", ")));
    }
    if !near.is_empty() {
        msgs.push(format!(
            "energies within {GUARD_RADIUS:e} of the excluded points {}: {}",
            guarded.into_iter().collect::<Vec<_>>().join(", "),
            near.join(", ")
        ));
    }
    if !msgs.is_empty() {
        return bad(msgs.join("; "));
    }
    Ok(())
}
