//! Flux integrals over coordinate spheres and their extrapolation to `ρ = ∞`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::WeightedManifoldSpec;
use crate::fields::{EndPoint, ScalarField};
use crate::jet::{Jet2Metric, Jet2Scalar};
use crate::quadrature::{default_order, SphereShell};
use crate::staticity::Perturbation;

/// `ρ_k = ρ_0 2^k`, `k = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiiSchedule {
    pub rho0: f64,
    pub k: usize,
}

impl Default for RadiiSchedule {
    fn default() -> Self {
        Self { rho0: 16.0, k: 4 }
    }
}

impl RadiiSchedule {
    pub fn new(rho0: f64, k: usize) -> Self {
        Self { rho0, k }
    }

    /// Parses `r0:K`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("radii `{s}` is not r0:K"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let rho0: f64 = a.parse().map_err(|_| bad())?;
        let k: usize = b.parse().map_err(|_| bad())?;
        if !(rho0 > 0.0 && rho0.is_finite()) {
            return Err(bad());
        }
        Ok(Self { rho0, k })
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..=self.k).map(|k| self.rho0 * 2f64.powi(k as i32)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassOptions {
    pub radii: RadiiSchedule,
    /// Polar quadrature order; `None` picks the dimension default.
    pub q: Option<usize>,
    /// Extrapolation tolerance, relative to `max(1, |value|)`.
    pub tol: f64,
}

impl Default for MassOptions {
    fn default() -> Self {
        Self {
            radii: RadiiSchedule::default(),
            q: None,
            tol: 1e-6,
        }
    }
}

impl MassOptions {
    pub fn order(&self, n: usize) -> usize {
        self.q.unwrap_or_else(|| default_order(n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassKind {
    Adm,
    Weighted,
    ComAdm(usize),
    ComWeighted(usize),
}

impl fmt::Display for MassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MassKind::Adm => write!(f, "adm"),
            MassKind::Weighted => write!(f, "weighted"),
            MassKind::ComAdm(a) => write!(f, "com_adm[{a}]"),
            MassKind::ComWeighted(a) => write!(f, "com_weighted[{a}]"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub rho: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub limit: f64,
    /// Observed `s` in `value(ρ) - limit ~ ρ^{-s}`, from the last two increments.
    pub decay_exponent: Option<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    pub kind: MassKind,
    pub value: f64,
    pub samples: Vec<Sample>,
    pub fit: Fit,
    pub tolerance: f64,
    pub converged: bool,
}

impl MassReport {
    fn from_samples(kind: MassKind, samples: Vec<Sample>, tol: f64) -> Self {
        let fit = extrapolate(&samples);
        let tolerance = tol * fit.limit.abs().max(1.0);
        Self {
            kind,
            value: fit.limit,
            samples,
            fit,
            tolerance,
            converged: fit.residual <= tolerance,
        }
    }

    pub fn ensure_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConverged {
                quantity: self.kind.to_string(),
                residual: self.fit.residual,
                tolerance: self.tolerance,
            })
        }
    }
}

/// Least-squares polynomial in `ρ_0/ρ`; returns (value at `ρ = ∞`, rms residual).
fn poly_limit(rho: &[f64], vals: &[f64], degree: usize) -> (f64, f64) {
    let scale = rho[0];
    let a = DMatrix::from_fn(rho.len(), degree + 1, |i, j| (scale / rho[i]).powi(j as i32));
    let b = DVector::from_column_slice(vals);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .expect("svd solve");
    let res = (&a * &coef - &b).norm() / (rho.len() as f64).sqrt();
    (coef[0], res)
}

/// Limit as `ρ → ∞` of sampled values.
///
/// The limit is a polynomial fit in `1/ρ` (degree up to 3). The residual is
/// the rms misfit plus the change of the limit when the innermost radius is
/// dropped.
pub fn extrapolate(samples: &[Sample]) -> Fit {
    let rho: Vec<f64> = samples.iter().map(|s| s.rho).collect();
    let vals: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let n = samples.len();
    if n == 0 {
        return Fit {
            limit: f64::NAN,
            decay_exponent: None,
            residual: f64::INFINITY,
        };
    }
    if n == 1 {
        return Fit {
            limit: vals[0],
            decay_exponent: None,
            residual: f64::INFINITY,
        };
    }
    let (limit, rms) = poly_limit(&rho, &vals, 3.min(n - 1));
    let (dropped, _) = poly_limit(&rho[1..], &vals[1..], 3.min(n - 2));
    let decay_exponent = if n >= 3 {
        let d1 = vals[n - 2] - vals[n - 3];
        let d2 = vals[n - 1] - vals[n - 2];
        let ratio = rho[n - 1] / rho[n - 2];
        (d1 != 0.0 && d2 != 0.0).then(|| (d1 / d2).abs().ln() / ratio.ln())
    } else {
        None
    };
    Fit {
        limit,
        decay_exponent,
        residual: rms + (limit - dropped).abs(),
    }
}

/// `U_i = V(∂^j h_ij - ∂_i tr h + 2∂_i φ) - h_ij ∂^j V + (tr h - 2φ) ∂_i V`
/// (flat contractions).
pub fn flux_u_jets(v: &Jet2Scalar, h: &Jet2Metric, phi: &Jet2Scalar) -> DVector<f64> {
    let n = v.dim();
    let tr = h.value.trace();
    DVector::from_fn(n, |i, _| {
        let div: f64 = (0..n).map(|j| h.d1[j][(i, j)]).sum();
        let dtr: f64 = (0..n).map(|k| h.d1[i][(k, k)]).sum();
        let hv: f64 = (0..n).map(|j| h.value[(i, j)] * v.grad[j]).sum();
        v.value * (div - dtr + 2.0 * phi.grad[i]) - hv + (tr - 2.0 * phi.value) * v.grad[i]
    })
}

/// `∂^i U_i`, expanded term by term with the product rule.
pub fn div_flux_u_jets(v: &Jet2Scalar, h: &Jet2Metric, phi: &Jet2Scalar) -> f64 {
    let n = v.dim();
    let tr = h.value.trace();
    let mut s = 0.0;
    for i in 0..n {
        let div: f64 = (0..n).map(|j| h.d1[j][(i, j)]).sum();
        let dtr: f64 = (0..n).map(|k| h.d1[i][(k, k)]).sum();
        let ddiv: f64 = (0..n).map(|j| h.d2(i, j)[(i, j)]).sum();
        let ddtr: f64 = (0..n).map(|k| h.d2(i, i)[(k, k)]).sum();
        // ∂_i [V (div_i - dtr_i + 2 ∂_i φ)]
        s += v.grad[i] * (div - dtr + 2.0 * phi.grad[i])
            + v.value * (ddiv - ddtr + 2.0 * phi.hess[(i, i)]);
        // -∂_i [h_ij ∂_j V]
        for j in 0..n {
            s -= h.d1[i][(i, j)] * v.grad[j] + h.value[(i, j)] * v.hess[(i, j)];
        }
        // ∂_i [(tr h - 2φ) ∂_i V]
        let dtr_i: f64 = (0..n).map(|k| h.d1[i][(k, k)]).sum();
        s += (dtr_i - 2.0 * phi.grad[i]) * v.grad[i] + (tr - 2.0 * phi.value) * v.hess[(i, i)];
    }
    s
}

/// The flux 1-form of a perturbation of the flat background against `V`.
pub fn flux_u(v: &dyn ScalarField, pert: &Perturbation, p: &EndPoint) -> DVector<f64> {
    flux_u_jets(&v.jet(&p.x), &pert.h.jet(&p.x), &pert.phi.jet(&p.x))
}

/// Metric jet minus the identity.
fn deviation(g: &Jet2Metric) -> Jet2Metric {
    let n = g.dim();
    Jet2Metric {
        value: &g.value - DMatrix::identity(n, n),
        d1: g.d1.clone(),
        d2: g.d2.clone(),
    }
}

fn shell(spec: &WeightedManifoldSpec, rho: f64, opts: &MassOptions) -> SphereShell {
    SphereShell::new(spec.n, rho, opts.order(spec.n))
}

fn dot(a: &DVector<f64>, nu: &[f64]) -> f64 {
    a.iter().zip(nu).map(|(a, b)| a * b).sum()
}

/// `∫_{S_ρ} (∂^j g_ij - ∂_i tr g) ν^i dS / (2(n-1)ω)`.
pub fn adm_flux(spec: &WeightedManifoldSpec, rho: f64, opts: &MassOptions) -> Result<f64> {
    let s = shell(spec, rho, opts);
    let n = spec.n;
    let one = Jet2Scalar::constant(n, 1.0);
    let zero = Jet2Scalar::zero(n);
    let flux = s.integrate(|x, nu| {
        let g = spec.eval_metric(&EndPoint::new(x.to_vec()))?;
        Ok(dot(&flux_u_jets(&one, &deviation(&g), &zero), nu))
    })?;
    Ok(flux / (2.0 * (n as f64 - 1.0) * s.omega))
}

/// `∫_{S_ρ} ∂_i f ν^i e^{-f} dS / ((n-1)ω)`.
pub fn weight_flux(spec: &WeightedManifoldSpec, rho: f64, opts: &MassOptions) -> Result<f64> {
    let s = shell(spec, rho, opts);
    let flux = s.integrate(|x, nu| {
        let f = spec.eval_weight(&EndPoint::new(x.to_vec()))?;
        Ok(dot(&f.grad, nu) * (-f.value).exp())
    })?;
    Ok(flux / ((spec.n as f64 - 1.0) * s.omega))
}

pub fn adm_mass(spec: &WeightedManifoldSpec, opts: &MassOptions) -> Result<MassReport> {
    spec.require_asymptotically_flat()?;
    let samples = opts
        .radii
        .radii()
        .into_iter()
        .map(|rho| {
            Ok(Sample {
                rho,
                value: adm_flux(spec, rho, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MassReport::from_samples(MassKind::Adm, samples, opts.tol))
}

pub fn weighted_mass(spec: &WeightedManifoldSpec, opts: &MassOptions) -> Result<MassReport> {
    spec.require_asymptotically_flat()?;
    let samples = opts
        .radii
        .radii()
        .into_iter()
        .map(|rho| {
            Ok(Sample {
                rho,
                value: adm_flux(spec, rho, opts)? + weight_flux(spec, rho, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MassReport::from_samples(MassKind::Weighted, samples, opts.tol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentreOfMassReport {
    pub weighted: bool,
    pub value: Vec<f64>,
    pub mass: MassReport,
    pub components: Vec<MassReport>,
    pub converged: bool,
}

impl CentreOfMassReport {
    pub fn ensure_converged(&self) -> Result<&Self> {
        self.mass.ensure_converged()?;
        for c in &self.components {
            c.ensure_converged()?;
        }
        Ok(self)
    }
}

/// Per-axis `∫_{S_ρ} U(x^a, g - δ, f)·ν dS / (2(n-1)ω)` (with `f` only if weighted).
fn com_fluxes(spec: &WeightedManifoldSpec, rho: f64, weighted: bool, opts: &MassOptions) -> Result<Vec<f64>> {
    let s = shell(spec, rho, opts);
    let n = spec.n;
    let flux = s.integrate_vec(n, |x, nu| {
        let p = EndPoint::new(x.to_vec());
        let h = deviation(&spec.eval_metric(&p)?);
        let phi = if weighted {
            spec.eval_weight(&p)?
        } else {
            Jet2Scalar::zero(n)
        };
        Ok((0..n)
            .map(|a| dot(&flux_u_jets(&Jet2Scalar::coordinate(x, a), &h, &phi), nu))
            .collect())
    })?;
    let norm = 2.0 * (n as f64 - 1.0) * s.omega;
    Ok(flux.into_iter().map(|v| v / norm).collect())
}

/// Centre of mass `c^a = lim ∫ U(x^a, g - δ, f)·ν dS / (2(n-1)ω m)`.
pub fn centre_of_mass(spec: &WeightedManifoldSpec, opts: &MassOptions, weighted: bool) -> Result<CentreOfMassReport> {
    if !spec.symmetry.parity_compatible {
        return Err(Error::ParityIncompatible);
    }
    let mass = if weighted {
        weighted_mass(spec, opts)?
    } else {
        adm_mass(spec, opts)?
    };
    if mass.value.abs() < 1e-8 {
        return Err(Error::ZeroMass(mass.value.abs()));
    }
    let radii = opts.radii.radii();
    let per_radius = radii
        .iter()
        .map(|&rho| com_fluxes(spec, rho, weighted, opts))
        .collect::<Result<Vec<_>>>()?;
    let components: Vec<MassReport> = (0..spec.n)
        .map(|a| {
            let samples = radii
                .iter()
                .zip(&per_radius)
                .map(|(&rho, v)| Sample {
                    rho,
                    value: v[a] / mass.value,
                })
                .collect();
            let kind = if weighted {
                MassKind::ComWeighted(a)
            } else {
                MassKind::ComAdm(a)
            };
            MassReport::from_samples(kind, samples, opts.tol)
        })
        .collect();
    let converged = mass.converged && components.iter().all(|c| c.converged);
    Ok(CentreOfMassReport {
        weighted,
        value: components.iter().map(|c| c.value).collect(),
        mass,
        components,
        converged,
    })
}

/// `c_f(g) - c_ADM(g̃)` componentwise.
pub fn check_com_conformal(spec: &WeightedManifoldSpec, opts: &MassOptions) -> Result<Vec<f64>> {
    let weighted = centre_of_mass(spec, opts, true)?;
    let pair = crate::conformal::conformal_spec(spec);
    let tilde = centre_of_mass(&pair.tilde, opts, false)?;
    Ok(weighted.value.iter().zip(&tilde.value).map(|(a, b)| a - b).collect())
}
