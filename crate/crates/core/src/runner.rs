//! Experiment configuration, task dispatch, convergence studies and reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conformal::{check_area_equality, check_conformal_mean_curvature, conformal_spec};
use crate::curvature::geometry_at;
use crate::error::{Error, Result};
use crate::family::{FamilyDoc, FamilyKind, PerturbationDoc, WeightedManifoldSpec};
use crate::fields::{EndPoint, FdStep, ScalarField};
use crate::mass::{adm_mass, centre_of_mass, weighted_mass, MassOptions, MassReport, RadiiSchedule};
use crate::quadrature::{halton_directions, radical_inverse, ProbeGrid};
use crate::staticity::{
    conformal_static_residuals, michel_integral_form, michel_pointwise_residual, potential_field, random_perturbation_doc,
    static_certificate, trace_identity_residual, Perturbation, PotentialId, IDENTITY_POTENTIALS,
};
use crate::surfaces::{
    find_f_minimal_sphere, hawking_vs_mass, penrose_ratio, weighted_hawking_mass, PenroseOptions, RadialSurface,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Mass,
    CheckConformal,
    StaticCheck,
    Penrose,
    Hawking,
    Michel,
    Convergence,
    Probe,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Mass,
        Task::CheckConformal,
        Task::StaticCheck,
        Task::Penrose,
        Task::Hawking,
        Task::Michel,
        Task::Convergence,
        Task::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mass => "mass",
            Task::CheckConformal => "check-conformal",
            Task::StaticCheck => "static-check",
            Task::Penrose => "penrose",
            Task::Hawking => "hawking",
            Task::Michel => "michel",
            Task::Convergence => "convergence",
            Task::Probe => "probe",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyParameter {
    Q,
    HFd,
    Rho0,
}

/// Radii given either as `"r0:K"` or `{"rho0": …, "k": …}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiiSpec {
    Text(String),
    Schedule(RadiiSchedule),
}

impl RadiiSpec {
    pub fn resolve(&self) -> Result<RadiiSchedule> {
        match self {
            RadiiSpec::Text(s) => RadiiSchedule::parse(s),
            RadiiSpec::Schedule(s) => Ok(*s),
        }
    }
}

/// Grid given either as `"annulus:rmin:rmax:count"` or as an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Text(String),
    Grid(ProbeGrid),
}

impl GridSpec {
    pub fn resolve(&self) -> Result<ProbeGrid> {
        match self {
            GridSpec::Text(s) => ProbeGrid::parse(s),
            GridSpec::Grid(g) => Ok(g.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Extrapolation residual, relative to `max(1, |value|)`.
    pub extrapolation: f64,
    /// Mass comparisons, relative to `max(1, |m|)`.
    pub mass: f64,
    /// Pointwise identities with analytic jets.
    pub identity: f64,
    /// Pointwise identities with finite-difference jets.
    pub identity_fd: f64,
    pub integral: f64,
    pub trace: f64,
    pub conformal_static: f64,
    pub static_residual: f64,
    pub penrose: f64,
    pub hawking: f64,
    pub hawking_equivalence: f64,
    pub centre: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            extrapolation: 1e-6,
            mass: 1e-4,
            identity: 1e-8,
            identity_fd: 1e-5,
            integral: 1e-6,
            trace: 1e-9,
            conformal_static: 1e-7,
            static_residual: 1e-6,
            penrose: 1e-3,
            hawking: 1e-3,
            hawking_equivalence: 1e-6,
            centre: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_fd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<RadiiSpec>,
    pub tolerances: Tolerances,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub seed: u64,
    /// Convergence study: which parameter to vary and its values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<StudyParameter>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
}

/// Optional expected outcomes turned into extra assertions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expect {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certified: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equality: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centre: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Directory for CSV tables; defaults to the report's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    pub spec: FamilyDoc,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bracket: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default)]
    pub expect: Expect,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn new(task: Task, spec: FamilyDoc) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            task: Some(task),
            spec,
            numerics: Numerics::default(),
            bracket: None,
            potential: None,
            perturbation: None,
            rho: None,
            point: None,
            expect: Expect::default(),
            output: OutputSpec::default(),
        }
    }

    /// Parses a config document; a bare family document is accepted too.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let cfg: Self = if v.get("family").is_some() && v.get("spec").is_none() {
            let doc: FamilyDoc = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
            Self {
                task: None,
                ..Self::new(Task::Mass, doc)
            }
        } else {
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?
        };
        if cfg.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("no task given".into()))
    }

    fn mass_options(&self) -> Result<MassOptions> {
        Ok(MassOptions {
            radii: match &self.numerics.radii {
                Some(r) => r.resolve()?,
                None => RadiiSchedule::default(),
            },
            q: self.numerics.q,
            tol: self.numerics.tolerances.extrapolation,
        })
    }

    fn build_spec(&self) -> Result<WeightedManifoldSpec> {
        let spec = self.spec.build()?;
        Ok(match self.numerics.h_fd {
            Some(h) if h > 0.0 => spec.with_fd_jets(FdStep::Fixed(h)),
            Some(h) => return Err(Error::Config(format!("h_fd = {h} must be positive"))),
            None => spec,
        })
    }

    fn grid(&self, spec: &WeightedManifoldSpec) -> Result<ProbeGrid> {
        let g = match &self.numerics.grid {
            Some(g) => g.resolve()?,
            None => default_grid(spec),
        };
        Ok(g.with_seed(self.numerics.seed))
    }

    fn bracket(&self) -> Result<(f64, f64)> {
        match self.bracket {
            Some([a, b]) if 0.0 < a && a < b => Ok((a, b)),
            Some([a, b]) => Err(Error::Config(format!("bracket [{a}, {b}] must satisfy 0 < a < b"))),
            None => Err(Error::Config("task needs a bracket".into())),
        }
    }

    /// Validates task-specific requirements.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        let n = self.spec.n;
        match task {
            Task::Penrose => {
                self.bracket()?;
                if !(3..=7).contains(&n) {
                    return Err(Error::Config(format!("penrose needs 3 <= n <= 7, got {n}")));
                }
            }
            Task::Hawking => {
                if n != 3 {
                    return Err(Error::Config(format!("hawking needs n = 3, got {n}")));
                }
                if self.rho.is_none() {
                    self.bracket()?;
                }
            }
            Task::Convergence
                if self.numerics.parameter.is_none() => {
                    return Err(Error::Config("convergence needs numerics.parameter (q, h_fd or rho0)".into()));
                }
            _ => {}
        }
        if let Some(p) = &self.potential {
            p.parse::<PotentialId>()?;
        }
        if let Some(x) = &self.point {
            if x.len() != n {
                return Err(Error::Config(format!("point has {} coordinates, n = {n}", x.len())));
            }
        }
        self.mass_options()?;
        if let Some(g) = &self.numerics.grid {
            g.resolve()?;
        }
        Ok(())
    }
}

/// Annulus clear of the excluded ball, out to `r = 50`, with 1000 points.
pub fn default_grid(spec: &WeightedManifoldSpec) -> ProbeGrid {
    let offset = spec.excluded.as_ref().map_or(0.0, |b| b.center.iter().map(|c| c * c).sum::<f64>().sqrt());
    let r_min = (1.5 * spec.excluded_radius() + offset).max(1.0);
    ProbeGrid::annulus(r_min, r_min.max(50.0), 1000)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionKind {
    Check,
    Convergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub kind: AssertionKind,
}

impl Assertion {
    /// Passes when `value <= tolerance`.
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
            kind: AssertionKind::Check,
        }
    }

    /// Passes when `value >= -tolerance`.
    pub fn nonnegative(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value >= -tolerance,
            kind: AssertionKind::Check,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tolerance: 0.0,
            passed: ok,
            kind: AssertionKind::Check,
        }
    }

    fn converged(label: &str, report: &MassReport) -> Self {
        Self {
            name: format!("{label}_converged"),
            value: report.fit.residual,
            tolerance: report.tolerance,
            passed: report.converged,
            kind: AssertionKind::Convergence,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn from_mass(name: &str, r: &MassReport) -> Self {
        let mut t = Self::new(name, &["rho", "value"]);
        for s in &r.samples {
            t.push(vec![Some(s.rho), Some(s.value)]);
        }
        t
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map_or(String::new(), |x| format!("{x:e}"))))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub task: Task,
    pub config: ExperimentConfig,
    pub results: Value,
    pub tables: Vec<Table>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
    pub wall_time_s: f64,
}

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const ASSERTION: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NON_CONVERGENCE: i32 = 3;
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        let failed = |k| self.assertions.iter().any(|a| !a.passed && a.kind == k);
        if failed(AssertionKind::Convergence) {
            exit::NON_CONVERGENCE
        } else if failed(AssertionKind::Check) {
            exit::ASSERTION
        } else {
            exit::PASS
        }
    }

    /// JSON with the wall-time field zeroed, for determinism comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.wall_time_s = 0.0;
        Ok(serde_json::to_string_pretty(&c)?)
    }

    /// Writes the JSON report and one `<stem>_<table>.csv` per table.
    pub fn write(&self, report: &Path, csv_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        std::fs::write(report, serde_json::to_string_pretty(self)?)?;
        let dir = csv_dir
            .map(Path::to_path_buf)
            .or_else(|| report.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let mut written = vec![report.to_path_buf()];
        for t in &self.tables {
            let p = dir.join(format!("{stem}_{}.csv", t.name));
            t.write_csv(&p)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Exit code for an error raised before or during a run.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConverged { .. } | Error::NoSignChange { .. } => exit::NON_CONVERGENCE,
        Error::PreconditionFailed(_) => exit::ASSERTION,
        _ => exit::CONFIG,
    }
}

struct Outcome {
    results: Value,
    tables: Vec<Table>,
    assertions: Vec<Assertion>,
}

impl Outcome {
    fn new(results: Value) -> Self {
        Self {
            results,
            tables: Vec::new(),
            assertions: Vec::new(),
        }
    }
}

pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let task = config.task()?;
    let out = match task {
        Task::Mass => run_mass(config)?,
        Task::CheckConformal => run_check_conformal(config)?,
        Task::StaticCheck => run_static_check(config)?,
        Task::Penrose => run_penrose(config)?,
        Task::Hawking => run_hawking(config)?,
        Task::Michel => run_michel(config)?,
        Task::Convergence => run_convergence(config)?,
        Task::Probe => run_probe(config)?,
    };
    let passed = out.assertions.iter().all(|a| a.passed);
    Ok(RunReport {
        schema: SCHEMA_VERSION,
        task,
        config: config.clone(),
        results: out.results,
        tables: out.tables,
        assertions: out.assertions,
        passed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn is_schwarzschild_type(doc: &FamilyDoc) -> bool {
    matches!(doc.family, FamilyKind::Schwarzschild | FamilyKind::FSchwarzschild)
}

fn expect_value(cfg: &ExperimentConfig, out: &mut Outcome, name: &str, value: f64, default_tol: f64) {
    if let Some(v) = cfg.expect.value {
        let tol = cfg.expect.tolerance.unwrap_or(default_tol) * v.abs().max(1.0);
        out.assertions.push(Assertion::below(name, (value - v).abs(), tol));
    }
}

fn run_mass(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let opts = cfg.mass_options()?;
    let tol = cfg.numerics.tolerances;
    let adm = adm_mass(&spec, &opts)?;
    let mf = weighted_mass(&spec, &opts)?;
    let tilde = adm_mass(&conformal_spec(&spec).tilde, &opts)?;
    let mut out = Outcome::new(Value::Null);
    for (label, r) in [("adm", &adm), ("weighted", &mf), ("tilde_adm", &tilde)] {
        out.assertions.push(Assertion::converged(label, r));
    }
    let scale = mf.value.abs().max(1.0);
    out.assertions
        .push(Assertion::below("conformal_mass_equality", (mf.value - tilde.value).abs(), tol.mass * scale));
    if let (Some(m), true) = (spec.mass_parameter, is_schwarzschild_type(&cfg.spec)) {
        out.assertions
            .push(Assertion::below("weighted_mass_equals_m", (mf.value - m).abs(), tol.mass * m.abs().max(1.0)));
    }
    expect_value(cfg, &mut out, "weighted_mass_expected", mf.value, tol.mass);

    let mut centre = Value::Null;
    if spec.symmetry.parity_compatible && mf.value.abs() >= 1e-8 {
        let cf = centre_of_mass(&spec, &opts, true)?;
        let ct = centre_of_mass(&conformal_spec(&spec).tilde, &opts, false)?;
        let diff = cf.value.iter().zip(&ct.value).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.assertions.push(Assertion::below("centre_conformal_equality", diff, tol.centre));
        let target = cfg.expect.centre.clone().or_else(|| cfg.spec.params.center.clone());
        if let Some(c) = target {
            let err = cf.value.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.assertions.push(Assertion::below("centre_recovers_translation", err, tol.centre));
        }
        for c in &cf.components {
            out.tables.push(Table::from_mass(&c.kind.to_string().replace('[', "_").replace(']', ""), c));
        }
        centre = json!({ "weighted": cf, "tilde_adm": ct });
    }
    out.tables.push(Table::from_mass("adm", &adm));
    out.tables.push(Table::from_mass("weighted", &mf));
    out.tables.push(Table::from_mass("tilde_adm", &tilde));
    out.results = json!({
        "adm": adm,
        "weighted": mf,
        "tilde_adm": tilde,
        "centre_of_mass": centre,
    });
    Ok(out)
}

/// Grid points outside the excluded ball.
fn admissible_points(spec: &WeightedManifoldSpec, grid: &ProbeGrid) -> Vec<EndPoint> {
    grid.points(spec.n)
        .into_iter()
        .map(EndPoint::new)
        .filter(|p| spec.check_point(p).is_ok())
        .collect()
}

fn sup(vals: impl IntoIterator<Item = f64>) -> f64 {
    vals.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn run_check_conformal(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let tol = cfg.numerics.tolerances;
    let grid = cfg.grid(&spec)?;
    let points = admissible_points(&spec, &grid);
    let residuals = points
        .par_iter()
        .map(|p| crate::conformal::check_conformal_scalar(&spec, p))
        .collect::<Result<Vec<_>>>()?;
    let scalar_sup = sup(residuals.iter().copied());
    let ident_tol = if cfg.numerics.h_fd.is_some() {
        tol.identity_fd
    } else {
        tol.identity
    };
    let mut out = Outcome::new(Value::Null);
    out.assertions.push(Assertion::below("scalar_identity_sup", scalar_sup, ident_tol));
    let mut table = Table::new("scalar_identity", &["r", "residual"]);
    for (p, r) in points.iter().zip(&residuals) {
        table.push(vec![Some(p.r()), Some(*r)]);
    }
    out.tables.push(table);

    let rho = cfg.rho.unwrap_or(2.0 * grid.r_min);
    let q = cfg.numerics.q.unwrap_or(8);
    let surface = RadialSurface::new(spec.n, rho, q);
    let h_sup = sup(surface
        .shell
        .nodes
        .par_iter()
        .map(|x| check_conformal_mean_curvature(&spec, &surface, &EndPoint::new(x.clone())))
        .collect::<Result<Vec<_>>>()?);
    out.assertions.push(Assertion::below("mean_curvature_transform_sup", h_sup, ident_tol));
    let area = check_area_equality(&spec, &surface)?;
    out.assertions.push(Assertion::below(
        "area_equality_rel",
        area.residual.abs() / area.a_f.abs().max(1.0),
        ident_tol,
    ));
    out.results = json!({
        "points": points.len(),
        "scalar_identity_sup": scalar_sup,
        "surface_rho": rho,
        "mean_curvature_transform_sup": h_sup,
        "area": area,
    });
    Ok(out)
}

fn run_static_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let tol = cfg.numerics.tolerances;
    let grid = cfg.grid(&spec)?;
    let id: PotentialId = cfg.potential.as_deref().unwrap_or("static").parse()?;
    let v = potential_field(id, &spec)?;
    let cert = static_certificate(&spec, v.as_ref(), &grid)?;
    let points = admissible_points(&spec, &grid);

    let trace_sup = IDENTITY_POTENTIALS
        .iter()
        .map(|&pid| {
            let w = potential_field(pid, &spec)?;
            let vals = points
                .par_iter()
                .map(|p| trace_identity_residual(&spec, w.as_ref(), p))
                .collect::<Result<Vec<_>>>()?;
            Ok(sup(vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let conformal_static_sup = sup(points
        .par_iter()
        .map(|p| Ok(conformal_static_residuals(&spec, v.clone(), p)?.max_abs()))
        .collect::<Result<Vec<_>>>()?);

    let mut out = Outcome::new(Value::Null);
    out.assertions.push(Assertion::below("trace_identity_sup", sup(trace_sup.iter().copied()), tol.trace));
    out.assertions.push(Assertion::below("conformal_static_identities_sup", conformal_static_sup, tol.conformal_static));
    let want = cfg.expect.certified.unwrap_or(true);
    let worst = cert.fg_sup.max(cert.ff_sup);
    out.assertions.push(Assertion {
        name: if want { "f_static_certified" } else { "f_static_rejected" }.into(),
        value: worst,
        tolerance: tol.static_residual,
        passed: (worst < tol.static_residual) == want,
        kind: AssertionKind::Check,
    });
    out.results = json!({
        "potential": id,
        "certificate": cert,
        "trace_identity_sup": IDENTITY_POTENTIALS.iter().zip(&trace_sup)
            .map(|(p, s)| json!({"potential": p, "sup": s})).collect::<Vec<_>>(),
        "conformal_static_identities_sup": conformal_static_sup,
    });
    Ok(out)
}

fn penrose_options(cfg: &ExperimentConfig) -> Result<PenroseOptions> {
    Ok(PenroseOptions {
        mass: cfg.mass_options()?,
        grid: cfg.numerics.grid.as_ref().map(|g| g.resolve()).transpose()?,
        q: cfg.numerics.q,
    })
}

fn run_penrose(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let tol = cfg.numerics.tolerances;
    let rho_star = find_f_minimal_sphere(&spec, cfg.bracket()?)?;
    let rep = penrose_ratio(&spec, rho_star, &penrose_options(cfg)?)?;
    let mut out = Outcome::new(Value::Null);
    out.assertions.push(Assertion::converged("weighted", &rep.mass));
    out.assertions.push(Assertion::nonnegative("penrose_inequality", rep.ratio - 1.0, tol.penrose));
    let equality = cfg.expect.equality.unwrap_or_else(|| is_schwarzschild_type(&cfg.spec));
    if equality {
        out.assertions.push(Assertion::below("penrose_equality", (rep.ratio - 1.0).abs(), tol.penrose));
    }
    expect_value(cfg, &mut out, "ratio_expected", rep.ratio, tol.penrose);
    out.tables.push(Table::from_mass("weighted", &rep.mass));
    out.results = serde_json::to_value(&rep)?;
    Ok(out)
}

fn run_hawking(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let tol = cfg.numerics.tolerances;
    let (rho, at_horizon) = match cfg.rho {
        Some(r) => (r, false),
        None => (find_f_minimal_sphere(&spec, cfg.bracket()?)?, true),
    };
    let opts = penrose_options(cfg)?;
    let rep = hawking_vs_mass(&spec, rho, &opts)?;
    let mut out = Outcome::new(Value::Null);
    out.assertions.push(Assertion::nonnegative("hawking_below_mass", rep.margin, tol.hawking));
    out.assertions.push(Assertion::below(
        "hawking_conformal_equivalence",
        (rep.m_h_f - rep.m_h_tilde).abs(),
        tol.hawking_equivalence,
    ));
    if let (Some(m), true, true) = (spec.mass_parameter, at_horizon, is_schwarzschild_type(&cfg.spec)) {
        out.assertions.push(Assertion::below("horizon_hawking_equals_m", (rep.m_h_f - m).abs(), tol.hawking));
    }
    expect_value(cfg, &mut out, "hawking_expected", rep.m_h_f, tol.hawking);
    // profile of m_{H,f} outward from rho
    let mut table = Table::new("hawking_profile", &["rho", "m_h_f", "m_h_tilde"]);
    let q = opts.q.unwrap_or(12);
    for k in 0..16 {
        let r = rho * 1.25f64.powi(k);
        let hm = weighted_hawking_mass(&spec, &RadialSurface::new(3, r, q))?;
        table.push(vec![Some(r), Some(hm.weighted), Some(hm.tilde)]);
    }
    out.tables.push(table);
    out.results = serde_json::to_value(&rep)?;
    Ok(out)
}

/// Low-discrepancy points in the ball `B_R(c)`.
fn ball_points(center: &[f64], radius: f64, count: usize, seed: u64) -> Vec<EndPoint> {
    let n = center.len();
    halton_directions(n, count, seed)
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let s = radius * radical_inverse(i as u64 + 1 + seed, 29).powf(1.0 / n as f64);
            EndPoint::new(center.iter().zip(&d).map(|(c, u)| c + s * u).collect())
        })
        .filter(|p| p.r() > 1e-9)
        .collect()
}

fn run_michel(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let n = spec.n;
    let tol = cfg.numerics.tolerances;
    let seed = cfg.numerics.seed;
    let doc = cfg
        .perturbation
        .clone()
        .unwrap_or_else(|| random_perturbation_doc(seed, n, &vec![0.0; n], 1.0));
    let pert = Perturbation::from_doc(&doc, n)?;
    let (center, radius) = pert
        .support
        .clone()
        .ok_or_else(|| Error::Config("perturbation has no terms".into()))?;
    let ids: Vec<PotentialId> = match &cfg.potential {
        Some(p) => vec![p.parse()?],
        None => std::iter::once(PotentialId::One)
            .chain((0..n).map(PotentialId::Coordinate))
            .collect(),
    };
    let points = ball_points(&center, radius, cfg.numerics.grid.as_ref().map_or(Ok(200), |g| g.resolve().map(|g| g.count))?, seed);
    let q = cfg.numerics.q.unwrap_or(24);
    let mut out = Outcome::new(Value::Null);
    let mut rows = Vec::new();
    let mut table = Table::new("michel", &["potential", "pointwise_sup", "enclosing_flux", "enclosing_residual", "cutting_flux", "cutting_residual"]);
    for (k, &id) in ids.iter().enumerate() {
        let v: Arc<dyn ScalarField> = potential_field(id, &spec)?;
        let pointwise = sup(points
            .par_iter()
            .map(|p| michel_pointwise_residual(&spec, &pert, v.as_ref(), p))
            .collect::<Result<Vec<_>>>()?);
        let enclosing = michel_integral_form(&spec, &pert, v.as_ref(), &center, radius + 0.5, q)?;
        let cutting = michel_integral_form(&spec, &pert, v.as_ref(), &center, 0.6 * radius, q)?;
        let name = serde_json::to_value(id)?;
        out.assertions.push(Assertion::below(format!("michel_pointwise[{k}]"), pointwise, tol.identity));
        for (label, c) in [("enclosing", &enclosing), ("cutting", &cutting)] {
            out.assertions.push(Assertion::below(
                format!("michel_integral_{label}[{k}]"),
                c.residual.abs() / c.flux.abs().max(1.0),
                tol.integral,
            ));
        }
        table.push(vec![
            Some(k as f64),
            Some(pointwise),
            Some(enclosing.flux),
            Some(enclosing.residual),
            Some(cutting.flux),
            Some(cutting.residual),
        ]);
        rows.push(json!({
            "potential": name,
            "pointwise_sup": pointwise,
            "enclosing": enclosing,
            "cutting": cutting,
        }));
    }
    out.tables.push(table);
    out.results = json!({
        "perturbation": doc,
        "support": { "center": center, "radius": radius },
        "points": points.len(),
        "potentials": rows,
    });
    Ok(out)
}

fn default_schedule(p: StudyParameter) -> Vec<f64> {
    match p {
        StudyParameter::Q => vec![4.0, 6.0, 8.0, 12.0, 16.0, 24.0],
        StudyParameter::HFd => vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
        StudyParameter::Rho0 => vec![8.0, 16.0, 32.0],
    }
}

/// Observed orders `log(e_i/e_{i+1}) / log(p_i/p_{i+1})`.
pub fn observed_orders(params: &[f64], errors: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None];
    for i in 1..errors.len() {
        let (e0, e1) = (errors[i - 1], errors[i]);
        let ratio = (params[i - 1] / params[i]).ln();
        out.push((e0 > 0.0 && e1 > 0.0 && ratio != 0.0).then(|| (e0 / e1).ln() / ratio.abs()));
    }
    out
}

/// Table of `(parameter, result, error, observed order)` for one parameter.
pub fn convergence_study(cfg: &ExperimentConfig, parameter: StudyParameter, schedule: &[f64]) -> Result<Table> {
    let base = cfg.spec.build()?;
    let mut values = Vec::with_capacity(schedule.len());
    let mut errors = Vec::with_capacity(schedule.len());
    match parameter {
        StudyParameter::Q | StudyParameter::Rho0 => {
            let reference = cfg.expect.value.or(base.mass_parameter.filter(|_| is_schwarzschild_type(&cfg.spec)));
            for &p in schedule {
                let mut opts = cfg.mass_options()?;
                match parameter {
                    StudyParameter::Q => opts.q = Some(p.round() as usize),
                    _ => opts.radii.rho0 = p,
                }
                let r = weighted_mass(&base, &opts)?;
                values.push((r.value, r.fit.residual));
            }
            let reference = reference.unwrap_or(values.last().map_or(0.0, |v| v.0));
            errors.extend(values.iter().map(|v| (v.0 - reference).abs()));
        }
        StudyParameter::HFd => {
            let x = cfg.point.clone().unwrap_or_else(|| {
                let g = default_grid(&base);
                let mut x = vec![0.0; base.n];
                x[0] = 1.3 * g.r_min;
                if base.n > 1 {
                    x[1] = 0.4 * g.r_min;
                }
                x
            });
            let p = EndPoint::new(x);
            let exact = geometry_at(&base, &p)?.conf_scal;
            for &h in schedule {
                let s = geometry_at(&base.with_fd_jets(FdStep::Fixed(h)), &p)?.conf_scal;
                values.push((s, 0.0));
                errors.push((s - exact).abs());
            }
        }
    }
    let orders = observed_orders(schedule, &errors);
    let mut t = Table::new(
        match parameter {
            StudyParameter::Q => "convergence_q",
            StudyParameter::HFd => "convergence_h_fd",
            StudyParameter::Rho0 => "convergence_rho0",
        },
        &["parameter", "result", "fit_residual", "error", "observed_order"],
    );
    for i in 0..schedule.len() {
        t.push(vec![Some(schedule[i]), Some(values[i].0), Some(values[i].1), Some(errors[i]), orders[i]]);
    }
    Ok(t)
}

fn run_convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let parameter = cfg.numerics.parameter.expect("validated");
    let schedule = cfg.numerics.schedule.clone().unwrap_or_else(|| default_schedule(parameter));
    if schedule.len() < 2 {
        return Err(Error::Config("convergence schedule needs at least two values".into()));
    }
    let table = convergence_study(cfg, parameter, &schedule)?;
    let col = |j: usize| -> Vec<f64> { table.rows.iter().map(|r| r[j].unwrap_or(f64::NAN)).collect() };
    let (results, errors, residuals) = (col(1), col(3), col(2));
    let mut out = Outcome::new(Value::Null);
    match parameter {
        StudyParameter::Q => {
            // monotone up to a round-off floor
            let worst = errors.windows(2).map(|w| w[1] - w[0].max(1e-10)).fold(f64::NEG_INFINITY, f64::max);
            out.assertions.push(Assertion::below("error_monotone_in_q", worst.max(0.0), 0.0));
        }
        StudyParameter::HFd => {
            let last = table.rows.last().and_then(|r| r[4]).unwrap_or(f64::NAN);
            out.assertions.push(Assertion {
                name: "fd_observed_order".into(),
                value: last,
                tolerance: 0.2,
                passed: (1.8..=2.2).contains(&last),
                kind: AssertionKind::Check,
            });
        }
        StudyParameter::Rho0 => {
            let drift = results.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            let bound = residuals.iter().copied().fold(0.0, f64::max).max(cfg.numerics.tolerances.extrapolation);
            out.assertions.push(Assertion::below("rho0_drift", drift, bound));
        }
    }
    out.results = json!({
        "parameter": parameter,
        "schedule": schedule,
        "results": results,
        "errors": errors,
    });
    out.tables.push(table);
    Ok(out)
}

fn run_probe(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.build_spec()?;
    let points = match &cfg.point {
        Some(x) => vec![EndPoint::new(x.clone())],
        None => admissible_points(&spec, &cfg.grid(&spec)?),
    };
    let records = points
        .par_iter()
        .map(|p| geometry_at(&spec, p).map(|g| (p.clone(), g.record())))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n;
    let mut cols: Vec<String> = (1..=n).map(|a| format!("x{a}")).collect();
    cols.extend(["r", "scal", "weighted_scal", "conf_scal", "lap_f", "gradnorm2_f"].map(String::from));
    let mut table = Table {
        name: "probe".into(),
        columns: cols,
        rows: Vec::new(),
    };
    for (p, g) in &records {
        let mut row: Vec<Option<f64>> = p.x.iter().map(|v| Some(*v)).collect();
        row.extend([p.r(), g.scal, g.weighted_scal, g.conf_scal, g.lap_f, g.gradnorm2_f].map(Some));
        table.push(row);
    }
    let mut out = Outcome::new(Value::Null);
    out.results = if cfg.point.is_some() {
        json!({ "point": records[0].0.x, "geometry": records[0].1 })
    } else {
        json!({
            "points": records.len(),
            "conf_scal_min": records.iter().map(|(_, g)| g.conf_scal).fold(f64::INFINITY, f64::min),
            "conf_scal_max": records.iter().map(|(_, g)| g.conf_scal).fold(f64::NEG_INFINITY, f64::max),
        })
    };
    out.tables.push(table);
    Ok(out)
}
