//! Experiment configuration and orchestration: convergence under mesh
//! refinement, the resonance sweep, the periodic consistency check and
//! single runs. Results go to CSV files with a JSON metadata sidecar.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{
    classical_cell_tensor, make_solver, periodic_limit_check, worst_case_error, Bench, BenchError, SolverKind,
    WorstCaseError,
};
use crate::coefficients::{checkerboard, exp1_twofreq, exp2_resonance, laminate, Raster};
use crate::corrector::{compute_all_correctors, LodContext, Oversampling, DEFAULT_GLOBAL_DOF_CAP};
use crate::effective::eta_estimator;
use crate::fem::{CoefficientField, FeSpace, SpaceKind, Tensor};
use crate::geometry::{build_uniform_mesh, refine_uniform, Point};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numerical(#[from] BenchError),
    #[error("output: {0}")]
    Output(String),
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Output(e.to_string())
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        Self::Output(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Convergence,
    Resonance,
    PeriodicCheck,
    SingleRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    Exp1Twofreq { eps1: f64, eps2: f64 },
    Exp2Resonance { eps: f64 },
    Constant { value: f64 },
    Laminate { eps: f64, low: f64, high: f64 },
    Checkerboard { eps: f64, low: f64, high: f64 },
    Raster { path: PathBuf },
}

pub type Sampler = Box<dyn Fn(Point) -> f64 + Sync>;

impl CoefficientSpec {
    /// Builds the coefficient named `name` with parameters from `eps` flags and
    /// defaults for the rest. `raster:PATH` selects a raster file.
    pub fn from_name(name: &str, eps: Option<f64>, eps1: Option<f64>, eps2: Option<f64>) -> Result<Self, ConfigError> {
        let e = eps.unwrap_or(0.25);
        Ok(match name {
            "exp1_twofreq" => Self::Exp1Twofreq {
                eps1: eps1.unwrap_or(0.125),
                eps2: eps2.unwrap_or(0.03125),
            },
            "exp2_resonance" => Self::Exp2Resonance {
                eps: eps.unwrap_or(0.0625),
            },
            "constant" => Self::Constant { value: 1.0 },
            "laminate" => Self::Laminate {
                eps: e,
                low: 1.0,
                high: 10.0,
            },
            "checkerboard" => Self::Checkerboard {
                eps: e,
                low: 1.0,
                high: 10.0,
            },
            other => match other.strip_prefix("raster:") {
                Some(path) => Self::Raster { path: path.into() },
                None => {
                    return Err(ConfigError::Invalid {
                        field: "coefficient",
                        message: format!("unknown coefficient `{other}`"),
                    })
                }
            },
        })
    }

    /// Replaces the period parameters that are given.
    fn override_eps(&mut self, eps: Option<f64>, eps1: Option<f64>, eps2: Option<f64>) {
        match self {
            Self::Exp1Twofreq { eps1: a, eps2: b } => {
                if let Some(v) = eps1 {
                    *a = v;
                }
                if let Some(v) = eps2 {
                    *b = v;
                }
            }
            Self::Exp2Resonance { eps: a } | Self::Laminate { eps: a, .. } | Self::Checkerboard { eps: a, .. } => {
                if let Some(v) = eps {
                    *a = v;
                }
            }
            Self::Constant { .. } | Self::Raster { .. } => {}
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |message: String| Err(ConfigError::Invalid {
            field: "coefficient",
            message,
        });
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Self::Exp1Twofreq { eps1, eps2 } if !positive(*eps1) || !positive(*eps2) => {
                bad("periods must be positive".into())
            }
            Self::Exp2Resonance { eps } if !positive(*eps) => bad("period must be positive".into()),
            Self::Constant { value } if !positive(*value) => bad("value must be positive".into()),
            Self::Laminate { eps, low, high } | Self::Checkerboard { eps, low, high }
                if !positive(*eps) || !positive(*low) || !positive(*high) =>
            {
                bad("period and phase values must be positive".into())
            }
            _ => Ok(()),
        }
    }

    pub fn sampler(&self) -> Result<Sampler, ConfigError> {
        Ok(match self.clone() {
            Self::Exp1Twofreq { eps1, eps2 } => Box::new(exp1_twofreq(eps1, eps2)),
            Self::Exp2Resonance { eps } => Box::new(exp2_resonance(eps)),
            Self::Constant { value } => Box::new(move |_| value),
            Self::Laminate { eps, low, high } => Box::new(laminate(eps, low, high)),
            Self::Checkerboard { eps, low, high } => Box::new(checkerboard(eps, low, high)),
            Self::Raster { path } => {
                let r = Raster::read(&path).map_err(|e| ConfigError::Invalid {
                    field: "coefficient",
                    message: e.to_string(),
                })?;
                Box::new(move |p| r.eval(p))
            }
        })
    }

    /// Period of a periodic builtin.
    pub fn period(&self) -> Option<f64> {
        match self {
            Self::Exp2Resonance { eps } | Self::Laminate { eps, .. } | Self::Checkerboard { eps, .. } => Some(*eps),
            Self::Constant { .. } => Some(1.0),
            Self::Exp1Twofreq { eps1, eps2 } => Some(eps1.max(*eps2)),
            Self::Raster { .. } => None,
        }
    }
}

/// Fully resolved experiment configuration. Mesh sizes are exponents:
/// coarse level `k` means `H = sqrt(2) 2^-k`, fine level `L` means
/// `h = sqrt(2) 2^-L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub coarse_levels: Vec<u32>,
    pub fine_levels: u32,
    /// Permits a fine mesh with fewer than two levels over the finest
    /// coarse mesh.
    pub allow_shallow_fine: bool,
    pub ell: usize,
    pub coefficient: CoefficientSpec,
    /// Resonance sweep: `eps = 2^-k`.
    pub eps_exponents: Vec<u32>,
    /// Periodic check: truncated orders compared with the whole domain.
    pub periodic_ells: Vec<usize>,
    pub tol: f64,
    pub output_dir: PathBuf,
    /// 0 uses every available core.
    pub threads: usize,
    pub global_dof_cap: usize,
}

/// Partial configuration as read from a file; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    pub coarse_levels: Option<Vec<u32>>,
    pub fine_levels: Option<u32>,
    pub allow_shallow_fine: Option<bool>,
    pub ell: Option<usize>,
    pub coefficient: Option<CoefficientSpec>,
    pub eps_exponents: Option<Vec<u32>>,
    pub periodic_ells: Option<Vec<usize>>,
    pub tol: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub global_dof_cap: Option<usize>,
}

/// Command-line overrides; these win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ell: Option<usize>,
    pub fine_levels: Option<u32>,
    pub coeff: Option<String>,
    pub eps: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub tol: Option<f64>,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            coarse_levels: vec![1, 2, 3, 4],
            fine_levels: 7,
            allow_shallow_fine: false,
            ell: 2,
            coefficient: CoefficientSpec::Exp1Twofreq {
                eps1: 0.125,
                eps2: 0.03125,
            },
            eps_exponents: Vec::new(),
            periodic_ells: Vec::new(),
            tol: 1e-6,
            output_dir: PathBuf::from("out"),
            threads: 0,
            global_dof_cap: DEFAULT_GLOBAL_DOF_CAP,
        };
        match experiment {
            Experiment::Convergence => base,
            Experiment::Resonance => Self {
                coarse_levels: vec![4],
                coefficient: CoefficientSpec::Exp2Resonance { eps: 0.125 },
                eps_exponents: (0..=6).collect(),
                ..base
            },
            Experiment::PeriodicCheck => Self {
                coarse_levels: vec![2],
                fine_levels: 5,
                coefficient: CoefficientSpec::Laminate {
                    eps: 0.25,
                    low: 1.0,
                    high: 10.0,
                },
                periodic_ells: vec![0, 1, 2, 3],
                ..base
            },
            Experiment::SingleRun => Self {
                coarse_levels: vec![3],
                ..base
            },
        }
    }

    /// Defaults for `experiment`, then the file, then the flags.
    pub fn resolve(experiment: Experiment, file: Option<&Path>, flags: &Overrides) -> Result<Self, ConfigError> {
        let parsed = match file {
            Some(p) => serde_json::from_str::<ConfigFile>(&std::fs::read_to_string(p)?)?,
            None => ConfigFile::default(),
        };
        if let Some(e) = parsed.experiment {
            if e != experiment {
                return Err(ConfigError::Invalid {
                    field: "experiment",
                    message: format!("file requests {e:?}, command is {experiment:?}"),
                });
            }
        }
        let mut c = Self::defaults(experiment);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = parsed.$f { c.$f = v; } )* };
        }
        take!(
            coarse_levels,
            fine_levels,
            allow_shallow_fine,
            ell,
            coefficient,
            eps_exponents,
            periodic_ells,
            tol,
            output_dir,
            threads,
            global_dof_cap
        );
        if let Some(name) = &flags.coeff {
            c.coefficient = CoefficientSpec::from_name(name, flags.eps, flags.eps1, flags.eps2)?;
        } else {
            c.coefficient.override_eps(flags.eps, flags.eps1, flags.eps2);
        }
        if let Some(v) = flags.ell {
            c.ell = v;
        }
        if let Some(v) = flags.fine_levels {
            c.fine_levels = v;
        }
        if let Some(v) = &flags.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = flags.threads {
            c.threads = v;
        }
        if let Some(v) = flags.tol {
            c.tol = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, message: String| Err(ConfigError::Invalid { field, message });
        let Some(&finest) = self.coarse_levels.iter().max() else {
            return invalid("coarse_levels", "at least one coarse level is required".into());
        };
        if self.coarse_levels.contains(&0) {
            return invalid("coarse_levels", "levels start at 1".into());
        }
        if self.fine_levels > 12 {
            return invalid("fine_levels", format!("{} exceeds the supported maximum 12", self.fine_levels));
        }
        if self.fine_levels < finest {
            return invalid(
                "fine_levels",
                format!("{} is coarser than coarse level {finest}", self.fine_levels),
            );
        }
        if !self.allow_shallow_fine && self.fine_levels < finest + 2 {
            return invalid(
                "fine_levels",
                format!(
                    "{} gives fewer than two refinements over coarse level {finest}; set allow_shallow_fine to override",
                    self.fine_levels
                ),
            );
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return invalid("tol", format!("{} is outside (0, 1)", self.tol));
        }
        if self.experiment == Experiment::Resonance {
            if self.eps_exponents.is_empty() {
                return invalid("eps_exponents", "the resonance sweep needs at least one period".into());
            }
            if !matches!(self.coefficient, CoefficientSpec::Exp2Resonance { .. }) {
                return invalid("coefficient", "the resonance sweep uses exp2_resonance".into());
            }
        }
        if self.experiment == Experiment::PeriodicCheck && self.coefficient.period().is_none() {
            return invalid("coefficient", "the periodic check needs a periodic builtin".into());
        }
        self.coefficient.validate()
    }
}

/// Worst-case errors and indicator values for one coarse level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub h: f64,
    pub fem: WorstCaseError,
    /// `None` when the local system is singular.
    pub local: Option<WorstCaseError>,
    pub quasilocal: WorstCaseError,
    pub best: WorstCaseError,
    pub eta: Option<f64>,
    pub alpha_h: f64,
    pub beta_h: f64,
}

impl LevelReport {
    pub fn converged_flags(&self) -> String {
        [
            Some(&self.fem),
            self.local.as_ref(),
            Some(&self.quasilocal),
            Some(&self.best),
        ]
        .iter()
        .map(|w| if w.is_some_and(|w| w.converged) { '1' } else { '0' })
        .collect()
    }

    pub fn err_local(&self) -> f64 {
        self.local.as_ref().map_or(f64::NAN, |w| w.sigma)
    }
}

/// Nested Dirichlet context for coarse level `k` and fine level `fine`.
pub fn dirichlet_context(k: u32, fine: u32, sampler: &Sampler, cap: usize) -> Result<LodContext, BenchError> {
    let coarse = Arc::new(build_uniform_mesh(1usize << k).map_err(crate::fem::FemError::from)?);
    let fine_mesh = Arc::new(refine_uniform(&coarse, fine - k));
    let coeff = CoefficientField::from_scalar_fn(fine_mesh.clone(), sampler)?;
    Ok(LodContext::new(
        FeSpace::dirichlet(coarse)?,
        FeSpace::dirichlet(fine_mesh)?,
        coeff,
    )?
    .with_global_dof_cap(cap))
}

/// All four worst-case errors plus `eta`, `alpha_H`, `beta_H`.
pub fn evaluate_level(ctx: LodContext, ell: usize, tol: f64) -> Result<LevelReport, BenchError> {
    let h = ctx.coarse.mesh().mesh_size();
    let set = compute_all_correctors(&ctx, Oversampling::Layers(ell))?;
    let bench = Arc::new(Bench::new(Arc::new(ctx))?);
    let reference = make_solver(&bench, SolverKind::Reference, None)?;
    let fem = make_solver(&bench, SolverKind::StandardFem, None)?;
    let quasi = make_solver(&bench, SolverKind::QuasiLocal, Some(&set))?;
    let best = make_solver(&bench, SolverKind::BestApproximation, None)?;
    let field = crate::effective::local_coefficient(&crate::effective::assemble_kernel(&bench.ctx, &set)?)?;
    let report = eta_estimator(&field);
    let local = match make_solver(&bench, SolverKind::Local, Some(&set)) {
        Ok(handle) => Some(worst_case_error(&reference, &handle, tol)),
        Err(BenchError::Singular(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(LevelReport {
        h,
        fem: worst_case_error(&reference, &fem, tol),
        local,
        quasilocal: worst_case_error(&reference, &quasi, tol),
        best: worst_case_error(&reference, &best, tol),
        eta: report.eta,
        alpha_h: report.alpha_h,
        beta_h: report.beta_h,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), fmt)
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
    threads_used: usize,
    wall_time_seconds: f64,
    error_measure: &'static str,
    notes: serde_json::Value,
}

fn write_metadata(
    config: &ExperimentConfig,
    csv_name: &str,
    started: Instant,
    notes: serde_json::Value,
) -> Result<(), RunError> {
    let meta = Metadata {
        version: env!("CARGO_PKG_VERSION"),
        config,
        threads_used: rayon::current_num_threads(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        error_measure: "power iteration on the fine P1 right-hand-side space; a lower bound for the L2 supremum",
        notes,
    };
    let path = config.output_dir.join(format!("{csv_name}.meta.json"));
    std::fs::write(path, serde_json::to_string_pretty(&meta).map_err(|e| RunError::Output(e.to_string()))?)?;
    Ok(())
}

pub const CONVERGENCE_HEADER: [&str; 9] = [
    "H",
    "err_fem",
    "err_local",
    "err_quasilocal",
    "err_best",
    "eta",
    "alpha_H",
    "beta_H",
    "converged_flags",
];

/// One row per coarse level, written to `convergence.csv`.
pub fn run_convergence(config: &ExperimentConfig) -> Result<Vec<LevelReport>, RunError> {
    let started = Instant::now();
    let sampler = config.coefficient.sampler()?;
    let reports = config
        .coarse_levels
        .par_iter()
        .map(|&k| {
            let ctx = dirichlet_context(k, config.fine_levels, &sampler, config.global_dof_cap)?;
            evaluate_level(ctx, config.ell, config.tol)
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut w = csv::Writer::from_path(config.output_dir.join("convergence.csv"))?;
    w.write_record(CONVERGENCE_HEADER)?;
    for r in &reports {
        w.write_record([
            fmt(r.h),
            fmt(r.fem.sigma),
            fmt(r.err_local()),
            fmt(r.quasilocal.sigma),
            fmt(r.best.sigma),
            opt(r.eta),
            fmt(r.alpha_h),
            fmt(r.beta_h),
            r.converged_flags(),
        ])?;
    }
    w.flush()?;
    let unconverged: Vec<f64> = reports.iter().filter(|r| r.converged_flags() != "1111").map(|r| r.h).collect();
    write_metadata(
        config,
        "convergence",
        started,
        serde_json::json!({ "unconverged_rows_H": unconverged, "converged_flags_order": "fem,local,quasilocal,best" }),
    )?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceRow {
    pub eps: f64,
    pub level: LevelReport,
}

impl ResonanceRow {
    pub fn normalized(&self, err: f64) -> f64 {
        err / self.level.best.sigma
    }
}

/// Sweep over the periods at one coarse level, written to `resonance.csv`.
pub fn run_resonance(config: &ExperimentConfig) -> Result<Vec<ResonanceRow>, RunError> {
    let started = Instant::now();
    let k = config.coarse_levels[0];
    let rows = config
        .eps_exponents
        .par_iter()
        .map(|&e| {
            let eps = (-(e as f64)).exp2();
            let mut spec = config.coefficient.clone();
            spec.override_eps(Some(eps), None, None);
            let sampler = spec.sampler().map_err(|e| RunError::Output(e.to_string()))?;
            let ctx = dirichlet_context(k, config.fine_levels, &sampler, config.global_dof_cap)?;
            Ok(ResonanceRow {
                eps,
                level: evaluate_level(ctx, config.ell, config.tol)?,
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut w = csv::Writer::from_path(config.output_dir.join("resonance.csv"))?;
    w.write_record([
        "eps",
        "err_fem",
        "err_local",
        "err_quasilocal",
        "err_best",
        "norm_fem",
        "norm_local",
        "norm_quasilocal",
        "eta",
        "alpha_H",
        "beta_H",
        "converged_flags",
    ])?;
    for r in &rows {
        let l = &r.level;
        w.write_record([
            fmt(r.eps),
            fmt(l.fem.sigma),
            fmt(l.err_local()),
            fmt(l.quasilocal.sigma),
            fmt(l.best.sigma),
            fmt(r.normalized(l.fem.sigma)),
            fmt(r.normalized(l.err_local())),
            fmt(r.normalized(l.quasilocal.sigma)),
            opt(l.eta),
            fmt(l.alpha_h),
            fmt(l.beta_h),
            l.converged_flags(),
        ])?;
    }
    w.flush()?;
    let argmax = |f: &dyn Fn(&ResonanceRow) -> f64| {
        rows.iter()
            .filter(|r| !f(r).is_nan())
            .max_by(|a, b| f(a).total_cmp(&f(b)))
            .map(|r| r.eps)
    };
    write_metadata(
        config,
        "resonance",
        started,
        serde_json::json!({
            "H": (2f64).sqrt() * (-(k as f64)).exp2(),
            "local_normalized_error_max_at_eps": argmax(&|r| r.normalized(r.level.err_local())),
            "eta_max_at_eps": argmax(&|r| r.level.eta.unwrap_or(f64::NAN)),
        }),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicCheckOutput {
    pub report: crate::bench::PeriodicLimitReport,
    /// `(cells per period, |A0 - closed form|)` for laminates.
    pub closed_form: Vec<(usize, f64)>,
}

/// Closed-form tensor of a laminate: harmonic and arithmetic means.
pub fn laminate_tensor(low: f64, high: f64) -> Tensor {
    Tensor::new(2.0 * low * high / (low + high), 0.0, 0.0, 0.5 * (low + high))
}

/// Cell tensor of a periodic builtin on a unit cell with `cells` per side.
pub fn cell_tensor(spec: &CoefficientSpec, cells: usize) -> Result<crate::bench::PeriodicHomogenizedTensor, RunError> {
    let eps = spec.period().ok_or_else(|| ConfigError::Invalid {
        field: "coefficient",
        message: "not periodic".into(),
    })?;
    let sampler = spec.sampler()?;
    let mesh = Arc::new(build_uniform_mesh(cells).map_err(|e| RunError::Output(e.to_string()))?);
    let coeff = CoefficientField::from_scalar_fn(mesh.clone(), |p| sampler([p[0] * eps, p[1] * eps]))
        .map_err(BenchError::from)?;
    Ok(classical_cell_tensor(&coeff, &FeSpace::periodic(mesh).map_err(BenchError::from)?)?)
}

/// Whole-domain effective tensors on periodic spaces against the cell
/// tensor; written to `periodic_check.csv` and `periodic_decay.csv`.
pub fn run_periodic_check(config: &ExperimentConfig) -> Result<PeriodicCheckOutput, RunError> {
    let started = Instant::now();
    let k = config.coarse_levels[0];
    let eps = config.coefficient.period().expect("validated periodic");
    let n_fine = 1usize << config.fine_levels;
    let cells = eps * n_fine as f64;
    if (cells - cells.round()).abs() > 1e-9 || cells < 1.0 {
        return Err(ConfigError::Invalid {
            field: "fine_levels",
            message: format!("the fine mesh does not resolve the period {eps} by whole cells"),
        }
        .into());
    }
    let cells = cells.round() as usize;
    let sampler = config.coefficient.sampler()?;
    let coarse = Arc::new(build_uniform_mesh(1usize << k).map_err(|e| RunError::Output(e.to_string()))?);
    let fine = Arc::new(refine_uniform(&coarse, config.fine_levels - k));
    let coeff = CoefficientField::from_scalar_fn(fine.clone(), &sampler).map_err(BenchError::from)?;
    let ctx = LodContext::new(
        FeSpace::new(coarse, SpaceKind::PeriodicMeanFree).map_err(BenchError::from)?,
        FeSpace::new(fine, SpaceKind::PeriodicMeanFree).map_err(BenchError::from)?,
        coeff,
    )
    .map_err(BenchError::from)?
    .with_global_dof_cap(config.global_dof_cap);
    let cell = cell_tensor(&config.coefficient, cells)?;
    let report = periodic_limit_check(&ctx, &cell, &config.periodic_ells, 1e-6)?;
    let closed_form = match config.coefficient {
        CoefficientSpec::Laminate { low, high, .. } => {
            let exact = laminate_tensor(low, high);
            [cells, 2 * cells, 4 * cells]
                .iter()
                .map(|&c| Ok((c, (cell_tensor(&config.coefficient, c)?.a0 - exact).abs().max())))
                .collect::<Result<Vec<_>, RunError>>()?
        }
        _ => Vec::new(),
    };
    std::fs::create_dir_all(&config.output_dir)?;
    let mut w = csv::Writer::from_path(config.output_dir.join("periodic_check.csv"))?;
    w.write_record(["quantity", "value"])?;
    let mut row = |name: &str, v: f64| w.write_record([name.to_string(), fmt(v)]);
    row("constancy", report.constancy)?;
    row("cell_discrepancy", report.cell_discrepancy)?;
    row("decay_at_max_ell", report.ell_decay.last().map_or(0.0, |d| d.1))?;
    for (name, t) in [("mean", report.mean), ("cell", report.cell_tensor)] {
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            row(&format!("{name}_A{}{}", i + 1, j + 1), t[(i, j)])?;
        }
    }
    for (c, d) in &closed_form {
        row(&format!("closed_form_error_cells_{c}"), *d)?;
    }
    row("aligned", if report.aligned { 1.0 } else { 0.0 })?;
    w.flush()?;
    let mut d = csv::Writer::from_path(config.output_dir.join("periodic_decay.csv"))?;
    d.write_record(["ell", "discrepancy"])?;
    for (l, v) in &report.ell_decay {
        d.write_record([l.to_string(), fmt(*v)])?;
    }
    d.flush()?;
    write_metadata(
        config,
        "periodic_check",
        started,
        serde_json::json!({ "cells_per_period": cells, "aligned": report.aligned }),
    )?;
    Ok(PeriodicCheckOutput { report, closed_form })
}

/// One coarse level, written to `single_run.csv` plus the local tensor
/// field in `local_tensor.csv`.
pub fn run_single(config: &ExperimentConfig) -> Result<LevelReport, RunError> {
    let started = Instant::now();
    let k = config.coarse_levels[0];
    let sampler = config.coefficient.sampler()?;
    let ctx = dirichlet_context(k, config.fine_levels, &sampler, config.global_dof_cap)?;
    let set = compute_all_correctors(&ctx, Oversampling::Layers(config.ell)).map_err(BenchError::from)?;
    let kernel = crate::effective::assemble_kernel(&ctx, &set).map_err(BenchError::from)?;
    let field = crate::effective::local_coefficient(&kernel).map_err(BenchError::from)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(config.output_dir.join("local_tensor.csv"))?);
    field.write_csv(&mut f)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(config.output_dir.join("kernel_blocks.csv"))?);
    kernel.write_csv(&mut f)?;
    let r = evaluate_level(ctx, config.ell, config.tol)?;
    let mut w = csv::Writer::from_path(config.output_dir.join("single_run.csv"))?;
    w.write_record(CONVERGENCE_HEADER)?;
    w.write_record([
        fmt(r.h),
        fmt(r.fem.sigma),
        fmt(r.err_local()),
        fmt(r.quasilocal.sigma),
        fmt(r.best.sigma),
        opt(r.eta),
        fmt(r.alpha_h),
        fmt(r.beta_h),
        r.converged_flags(),
    ])?;
    w.flush()?;
    write_metadata(config, "single_run", started, serde_json::json!({}))?;
    Ok(r)
}

/// Converts every CSV in `dir` into a whitespace-separated `.dat` file and
/// writes a gnuplot script for the convergence and resonance tables.
pub fn export_plot(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut written = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    for path in entries {
        let mut r = csv::Reader::from_path(&path)?;
        let mut out = String::new();
        out.push('#');
        for h in r.headers()? {
            out.push(' ');
            out.push_str(h);
        }
        out.push('\n');
        for rec in r.records() {
            let rec = rec?;
            out.push_str(&rec.iter().collect::<Vec<_>>().join(" "));
            out.push('\n');
        }
        let target = path.with_extension("dat");
        std::fs::write(&target, out)?;
        written.push(target);
    }
    let script = dir.join("plots.gp");
    let mut gp = String::from("set logscale xy\nset key left top\n");
    if dir.join("convergence.dat").exists() {
        gp.push_str(
            "set output 'convergence.png'\nset terminal pngcairo\nset xlabel 'H'\nset ylabel 'worst-case L2 error'\n\
             plot for [c=2:5] 'convergence.dat' using 1:c with linespoints title columnhead(c)\n",
        );
    }
    if dir.join("resonance.dat").exists() {
        gp.push_str(
            "set output 'resonance.png'\nset xlabel 'eps'\nset ylabel 'normalized error'\n\
             plot for [c=6:8] 'resonance.dat' using 1:c with linespoints title columnhead(c)\n",
        );
    }
    std::fs::write(&script, gp)?;
    written.push(script);
    Ok(written)
}

/// Runs `config.experiment` on a pool with `config.threads` workers.
pub fn run(config: &ExperimentConfig) -> Result<(), RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| RunError::Output(e.to_string()))?;
    pool.install(|| match config.experiment {
        Experiment::Convergence => run_convergence(config).map(|_| ()),
        Experiment::Resonance => run_resonance(config).map(|_| ()),
        Experiment::PeriodicCheck => run_periodic_check(config).map(|_| ()),
        Experiment::SingleRun => run_single(config).map(|_| ()),
    })
}
