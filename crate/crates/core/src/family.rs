//! Built-in families of weighted asymptotically flat manifolds, their JSON
//! documents, and validated field evaluation.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fields::{
    EndPoint, FdScalar, FdStep, FdTensor, ScalarExpr, ScalarField, TensorExpr, TensorField,
};
use crate::jet::{Jet2Metric, Jet2Scalar};

/// Catalogue of weight profiles usable from JSON documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightProfile {
    Zero,
    /// `a / r^k`.
    InverseR {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "one")]
        k: f64,
    },
    /// `a * exp(-r / length)`.
    ExpDecay {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "one")]
        length: f64,
    },
    /// Smooth compactly supported bump.
    Bump {
        #[serde(default)]
        center: Option<Vec<f64>>,
        radius: f64,
        amplitude: f64,
    },
    /// Radial bump supported in `|r - radius| < width`.
    Shell {
        radius: f64,
        width: f64,
        amplitude: f64,
    },
    /// `a * x^1 / r^n`.
    Dipole {
        #[serde(default = "one")]
        a: f64,
    },
    /// `⟨w, x⟩`; not decaying, local checks only.
    Linear { w: Vec<f64> },
    /// `a * r`; not decaying, local checks only.
    RadialLinear {
        #[serde(default = "one")]
        a: f64,
    },
    Constant { c: f64 },
}

fn one() -> f64 {
    1.0
}

/// Either a bare catalogue name (`"inverse_r"`) or a full profile object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Named(String),
    Profile(WeightProfile),
}

impl WeightSpec {
    pub fn resolve(&self) -> Result<WeightProfile> {
        match self {
            Self::Profile(p) => Ok(p.clone()),
            Self::Named(name) => serde_json::from_value(json!({ "type": name }))
                .map_err(|e| Error::BadParams(format!("unknown weight profile `{name}`: {e}"))),
        }
    }
}

impl From<WeightProfile> for WeightSpec {
    fn from(p: WeightProfile) -> Self {
        Self::Profile(p)
    }
}

impl WeightProfile {
    pub fn expr(&self, n: usize) -> Result<ScalarExpr> {
        Ok(match self {
            Self::Zero => ScalarExpr::Constant(0.0),
            Self::InverseR { a, k } => ScalarExpr::inverse_power(*a, *k),
            Self::ExpDecay { a, length } => {
                if *length <= 0.0 {
                    return Err(Error::BadParams("exp_decay length must be positive".into()));
                }
                ScalarExpr::radius().exp_of(-1.0 / length).scaled(*a)
            }
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                if *radius <= 0.0 {
                    return Err(Error::BadParams("bump radius must be positive".into()));
                }
                ScalarExpr::Bump {
                    center: vec_of_dim(center.as_deref(), n, "bump center")?,
                    radius: *radius,
                    amplitude: *amplitude,
                }
            }
            Self::Shell {
                radius,
                width,
                amplitude,
            } => {
                if *width <= 0.0 || *radius <= 0.0 {
                    return Err(Error::BadParams("shell radius/width must be positive".into()));
                }
                ScalarExpr::Shell {
                    radius: *radius,
                    width: *width,
                    amplitude: *amplitude,
                }
            }
            Self::Dipole { a } => {
                ScalarExpr::Coordinate(0).times(ScalarExpr::inverse_power(*a, n as f64))
            }
            Self::Linear { w } => ScalarExpr::Linear(vec_of_dim(Some(w), n, "linear weight w")?),
            Self::RadialLinear { a } => ScalarExpr::radius().scaled(*a),
            Self::Constant { c } => ScalarExpr::Constant(*c),
        })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::InverseR { a, .. }
            | Self::ExpDecay { a, .. }
            | Self::Dipole { a }
            | Self::RadialLinear { a } => *a == 0.0,
            Self::Bump { amplitude, .. } | Self::Shell { amplitude, .. } => *amplitude == 0.0,
            Self::Linear { w } => w.iter().all(|v| *v == 0.0),
            Self::Constant { c } => *c == 0.0,
        }
    }

    pub fn is_radial(&self) -> bool {
        match self {
            Self::Bump { center, .. } => center.iter().flatten().all(|c| *c == 0.0),
            Self::Dipole { .. } | Self::Linear { .. } => self.is_zero(),
            _ => true,
        }
    }

    /// Even under `x -> -x`, or compactly supported.
    pub fn is_parity_compatible(&self) -> bool {
        match self {
            Self::Dipole { .. } | Self::Linear { .. } => self.is_zero(),
            _ => true,
        }
    }

    /// Decay order `τ` with `f = O_2(r^{-τ})`; `INFINITY` for compact support.
    pub fn decay(&self, n: usize) -> f64 {
        if self.is_zero() {
            return f64::INFINITY;
        }
        match self {
            Self::InverseR { k, .. } => *k,
            Self::Dipole { .. } => n as f64 - 1.0,
            Self::Linear { .. } | Self::RadialLinear { .. } => -1.0,
            Self::Constant { .. } => 0.0,
            _ => f64::INFINITY,
        }
    }
}

fn vec_of_dim(v: Option<&[f64]>, n: usize, what: &str) -> Result<Vec<f64>> {
    match v {
        None => Ok(vec![0.0; n]),
        Some(v) if v.len() == n => Ok(v.to_vec()),
        Some(v) => Err(Error::BadParams(format!(
            "{what} has length {}, expected {n}",
            v.len()
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Flat,
    #[serde(alias = "conformally-flat")]
    ConformallyFlat,
    #[serde(alias = "Schwarzschild")]
    Schwarzschild,
    #[serde(alias = "f-Schwarzschild", alias = "f-schwarzschild")]
    FSchwarzschild,
    #[serde(alias = "flat-with-weight")]
    FlatWithWeight,
    #[serde(alias = "perturbed-flat")]
    PerturbedFlat,
    #[serde(alias = "spherically-symmetric")]
    SphericallySymmetric,
}

/// One compactly supported term of a metric/weight perturbation:
/// `b(x) (1 + ⟨tilt, x - c⟩)` times `tensor` (for `h`) and `phi` (for `φ`),
/// with `b = (1 - |x-c|²/R²)^8` inside `B_R(c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationTerm {
    pub center: Vec<f64>,
    pub radius: f64,
    pub tensor: Vec<Vec<f64>>,
    #[serde(default)]
    pub phi: f64,
    #[serde(default)]
    pub tilt: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationDoc {
    pub terms: Vec<PerturbationTerm>,
}

pub(crate) const PERTURBATION_BUMP_POWER: i32 = 8;

impl PerturbationTerm {
    fn profile(&self, n: usize) -> Result<ScalarExpr> {
        if self.center.len() != n {
            return Err(Error::BadParams("perturbation center has wrong length".into()));
        }
        if self.radius <= 0.0 {
            return Err(Error::BadParams("perturbation radius must be positive".into()));
        }
        let bump = ScalarExpr::PolyBump {
            center: self.center.clone(),
            radius: self.radius,
            power: PERTURBATION_BUMP_POWER,
        };
        Ok(match &self.tilt {
            None => bump,
            Some(w) => {
                let w = vec_of_dim(Some(w), n, "perturbation tilt")?;
                let offset: f64 = w.iter().zip(&self.center).map(|(a, b)| a * b).sum();
                let affine = ScalarExpr::Sum(vec![
                    ScalarExpr::Constant(1.0 - offset),
                    ScalarExpr::Linear(w),
                ]);
                bump.times(affine)
            }
        })
    }

    fn tensor_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        if self.tensor.len() != n || self.tensor.iter().any(|r| r.len() != n) {
            return Err(Error::BadParams("perturbation tensor must be n x n".into()));
        }
        let m = DMatrix::from_fn(n, n, |i, j| self.tensor[i][j]);
        Ok(crate::jet::symmetrise(&m))
    }
}

impl PerturbationDoc {
    pub fn h_expr(&self, n: usize) -> Result<TensorExpr> {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                Ok(TensorExpr::ScalarTimes(
                    t.profile(n)?,
                    Box::new(TensorExpr::Constant(t.tensor_matrix(n)?)),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorExpr::Sum(terms))
    }

    pub fn phi_expr(&self, n: usize) -> Result<ScalarExpr> {
        let terms = self
            .terms
            .iter()
            .map(|t| Ok(t.profile(n)?.scaled(t.phi)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScalarExpr::Sum(terms))
    }

    /// Closed ball containing every term's support.
    pub fn support(&self, n: usize) -> Option<(Vec<f64>, f64)> {
        if self.terms.is_empty() {
            return None;
        }
        let mut center = vec![0.0; n];
        for t in &self.terms {
            for (c, v) in center.iter_mut().zip(&t.center) {
                *c += v / self.terms.len() as f64;
            }
        }
        let radius = self
            .terms
            .iter()
            .map(|t| {
                let d: f64 = t
                    .center
                    .iter()
                    .zip(&center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                d + t.radius
            })
            .fold(0.0, f64::max);
        Some((center, radius))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JetMode {
    #[default]
    Analytic,
    /// Discard analytic jets and difference point values.
    Fd { step: Option<f64> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightSpec>,
    /// Conformally flat: `u = 1 + Σ_k coeffs[k-1] r^{-k}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    /// Conformally flat: multiply the metric by `exp(2f/(n-1))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_in_metric: Option<bool>,
    /// Spherically symmetric: `A = 1 + Σ_k a[k-1] r^{-k}` (radial factor).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_coeffs: Option<Vec<f64>>,
    /// Spherically symmetric: `B = 1 + Σ_k b[k-1] r^{-k}` (tangential factor).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<Vec<f64>>>,
    /// Stated decay order; rejected if faster than the family actually decays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Radius of the excluded coordinate ball (overrides the automatic one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_min: Option<f64>,
    /// Allow weights that do not decay (pointwise checks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jets: Option<JetMode>,
}

/// Serialisable family description: `{"family": …, "n": …, "params": {…}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyDoc {
    pub family: FamilyKind,
    pub n: usize,
    #[serde(default)]
    pub params: FamilyParams,
}

impl FamilyDoc {
    pub fn new(family: FamilyKind, n: usize) -> Self {
        Self {
            family,
            n,
            params: FamilyParams::default(),
        }
    }

    pub fn with_m(mut self, m: f64) -> Self {
        self.params.m = Some(m);
        self
    }

    pub fn with_weight(mut self, w: WeightProfile) -> Self {
        self.params.weight = Some(w.into());
        self
    }

    pub fn with_center(mut self, c: Vec<f64>) -> Self {
        self.params.center = Some(c);
        self
    }

    pub fn with_coeffs(mut self, c: Vec<f64>) -> Self {
        self.params.coeffs = Some(c);
        self
    }

    pub fn with_jets(mut self, j: JetMode) -> Self {
        self.params.jets = Some(j);
        self
    }

    pub fn local(mut self) -> Self {
        self.params.local = Some(true);
        self
    }

    pub fn build(&self) -> Result<WeightedManifoldSpec> {
        make_family(self)
    }
}

/// Closed coordinate ball removed from the end; its boundary is admissible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Symmetry {
    /// Metric and weight are functions of `r` only (about the origin).
    pub spherical: bool,
    /// Fields are parity-even (or compactly supported) about some centre.
    pub parity_compatible: bool,
}

/// A weighted manifold's asymptotic end: dimension, metric, weight and decay.
#[derive(Clone, Debug)]
pub struct WeightedManifoldSpec {
    pub n: usize,
    pub metric: Arc<dyn TensorField>,
    pub weight: Arc<dyn ScalarField>,
    /// Decay order; `INFINITY` for exactly flat/compactly supported data.
    pub tau: f64,
    pub excluded: Option<ExcludedBall>,
    pub symmetry: Symmetry,
    /// Schwarzschild-type mass parameter, when the family has one.
    pub mass_parameter: Option<f64>,
    pub doc: Option<FamilyDoc>,
}

impl WeightedManifoldSpec {
    /// A spec from arbitrary fields. Jets of `metric`/`weight` are whatever
    /// those fields provide; wrap them in `FdTensor`/`FdScalar` for value-only
    /// user data.
    pub fn custom(
        n: usize,
        metric: Arc<dyn TensorField>,
        weight: Arc<dyn ScalarField>,
        tau: f64,
        excluded: Option<ExcludedBall>,
    ) -> Result<Self> {
        if n < 3 {
            return Err(Error::BadParams(format!("dimension must be >= 3, got {n}")));
        }
        Ok(Self {
            n,
            metric,
            weight,
            tau,
            excluded,
            symmetry: Symmetry::default(),
            mass_parameter: None,
            doc: None,
        })
    }

    pub fn required_decay(&self) -> f64 {
        (self.n as f64 - 2.0) / 2.0
    }

    pub fn is_asymptotically_flat(&self) -> bool {
        self.tau > self.required_decay()
    }

    pub fn require_asymptotically_flat(&self) -> Result<()> {
        if self.is_asymptotically_flat() {
            Ok(())
        } else {
            Err(Error::NotAsymptoticallyFlat {
                tau: self.tau,
                required: self.required_decay(),
            })
        }
    }

    /// Replaces the weight (and forgets the family document).
    pub fn with_weight(&self, weight: Arc<dyn ScalarField>) -> Self {
        Self {
            weight,
            doc: None,
            ..self.clone()
        }
    }

    pub fn with_metric(&self, metric: Arc<dyn TensorField>) -> Self {
        Self {
            metric,
            doc: None,
            ..self.clone()
        }
    }

    /// Same data with finite-difference jets.
    pub fn with_fd_jets(&self, step: FdStep) -> Self {
        Self {
            metric: Arc::new(FdTensor::from_field(self.metric.clone(), step)),
            weight: Arc::new(FdScalar::from_field(self.weight.clone(), step)),
            ..self.clone()
        }
    }

    /// Radius of the excluded ball about the origin, if centred there.
    pub fn excluded_radius(&self) -> f64 {
        self.excluded.as_ref().map_or(0.0, |b| b.radius)
    }

    pub fn check_point(&self, p: &EndPoint) -> Result<()> {
        if p.dim() != self.n {
            return Err(Error::BadParams(format!(
                "point has dimension {}, spec has {}",
                p.dim(),
                self.n
            )));
        }
        let singular = |c: &[f64]| {
            p.x.iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        if p.r() <= 0.0 || !p.x.iter().all(|v| v.is_finite()) {
            return Err(Error::PointExcluded {
                point: p.x.clone(),
                radius: 0.0,
            });
        }
        if let Some(ball) = &self.excluded {
            // boundary allowed, with a little slack for round-off
            if singular(&ball.center) < ball.radius * (1.0 - 1e-12) {
                return Err(Error::PointExcluded {
                    point: p.x.clone(),
                    radius: ball.radius,
                });
            }
        }
        Ok(())
    }

    pub fn eval_metric(&self, p: &EndPoint) -> Result<Jet2Metric> {
        eval_metric(self, p)
    }

    pub fn eval_weight(&self, p: &EndPoint) -> Result<Jet2Scalar> {
        eval_weight(self, p)
    }
}

/// Metric 2-jet at `p`, symmetrised and checked for positive definiteness.
pub fn eval_metric(spec: &WeightedManifoldSpec, p: &EndPoint) -> Result<Jet2Metric> {
    spec.check_point(p)?;
    let jet = spec.metric.jet(&p.x).symmetrised();
    if !jet.is_positive_definite() {
        return Err(Error::NotPositiveDefinite { point: p.x.clone() });
    }
    Ok(jet)
}

/// Weight 2-jet at `p`.
pub fn eval_weight(spec: &WeightedManifoldSpec, p: &EndPoint) -> Result<Jet2Scalar> {
    spec.check_point(p)?;
    let j = spec.weight.jet(&p.x);
    Ok(Jet2Scalar::new(j.value, j.grad, j.hess))
}

/// `c0 + Σ_k coeffs[k-1] r^{-k}`.
fn inverse_series(c0: f64, coeffs: &[f64]) -> ScalarExpr {
    ScalarExpr::InversePowers {
        c0,
        terms: coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, c)| ((k + 1) as f64, *c))
            .collect(),
    }
}

fn first_nonzero_power(coeffs: &[f64]) -> f64 {
    coeffs
        .iter()
        .position(|c| *c != 0.0)
        .map_or(f64::INFINITY, |k| (k + 1) as f64)
}

/// Largest `r > 0` where `1 + Σ c_k r^{-k}` vanishes (0 if none).
fn largest_root_of_series(coeffs: &[f64]) -> f64 {
    let u = |r: f64| 1.0 + coeffs.iter().enumerate().map(|(k, c)| c * r.powi(-(k as i32 + 1))).sum::<f64>();
    let mut hi = 1.0 + coeffs.iter().map(|c| c.abs()).sum::<f64>() * 2.0;
    let factor = 0.995;
    let mut lo = hi * factor;
    while lo > 1e-8 {
        if u(lo) <= 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if u(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return hi;
        }
        hi = lo;
        lo *= factor;
    }
    0.0
}

fn rotation_matrix(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::BadParams("rotation must be an n x n matrix".into()));
    }
    let q = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let err = (q.transpose() * &q - DMatrix::identity(n, n)).amax();
    if err > 1e-10 {
        return Err(Error::BadParams(format!(
            "rotation is not orthogonal (|Q^T Q - I| = {err:.2e})"
        )));
    }
    Ok(q)
}

/// Builds a validated spec from a family document.
pub fn make_family(doc: &FamilyDoc) -> Result<WeightedManifoldSpec> {
    let n = doc.n;
    if n < 3 {
        return Err(Error::BadParams(format!("dimension must be >= 3, got {n}")));
    }
    let p = &doc.params;
    let nf = n as f64;
    let weight = match &p.weight {
        Some(w) => w.resolve()?,
        None => WeightProfile::Zero,
    };
    let f_expr = weight.expr(n)?;
    let f_decay = weight.decay(n);

    let require_m = || -> Result<f64> {
        match p.m {
            Some(m) if m > 0.0 && m.is_finite() => Ok(m),
            Some(m) => Err(Error::BadParams(format!("mass must be positive, got {m}"))),
            None => Err(Error::BadParams("missing mass parameter m".into())),
        }
    };
    // (metric, weight, metric decay, excluded radius, metric spherical, metric even)
    let (metric, weight_expr, metric_decay, r_excl, metric_radial, metric_even): (
        TensorExpr,
        ScalarExpr,
        f64,
        f64,
        bool,
        bool,
    ) = match doc.family {
        FamilyKind::Flat => {
            if !weight.is_zero() {
                return Err(Error::BadParams(
                    "flat family has f = 0; use flat_with_weight".into(),
                ));
            }
            (TensorExpr::Identity, f_expr, f64::INFINITY, 0.0, true, true)
        }
        FamilyKind::FlatWithWeight => {
            if p.weight.is_none() {
                return Err(Error::BadParams("flat_with_weight needs a weight".into()));
            }
            (TensorExpr::Identity, f_expr, f64::INFINITY, 0.0, true, true)
        }
        FamilyKind::Schwarzschild | FamilyKind::FSchwarzschild => {
            let m = require_m()?;
            if doc.family == FamilyKind::Schwarzschild && !weight.is_zero() {
                return Err(Error::BadParams(
                    "schwarzschild has f = 0; use f_schwarzschild".into(),
                ));
            }
            let u = ScalarExpr::InversePowers {
                c0: 1.0,
                terms: vec![(nf - 2.0, m / 2.0)],
            };
            let mut factor = u.pow(4.0 / (nf - 2.0));
            if !weight.is_zero() {
                factor = f_expr.clone().exp_of(2.0 / (nf - 1.0)).times(factor);
            }
            let r0 = (m / 2.0).powf(1.0 / (nf - 2.0));
            (
                TensorExpr::conformally_flat(factor),
                f_expr,
                nf - 2.0,
                r0,
                true,
                true,
            )
        }
        FamilyKind::ConformallyFlat => {
            let coeffs = p
                .coeffs
                .clone()
                .ok_or_else(|| Error::BadParams("conformally_flat needs coeffs".into()))?;
            let u = inverse_series(1.0, &coeffs);
            let mut factor = u.pow(4.0 / (nf - 2.0));
            if p.weight_in_metric.unwrap_or(false) && !weight.is_zero() {
                factor = f_expr.clone().exp_of(2.0 / (nf - 1.0)).times(factor);
            }
            let r0 = largest_root_of_series(&coeffs);
            (
                TensorExpr::conformally_flat(factor),
                f_expr,
                first_nonzero_power(&coeffs),
                r0,
                true,
                true,
            )
        }
        FamilyKind::SphericallySymmetric => {
            let a = p.a_coeffs.clone().unwrap_or_default();
            let b = p.b_coeffs.clone().unwrap_or_default();
            if !weight.is_radial() {
                return Err(Error::BadParams(
                    "spherically_symmetric needs a radial weight".into(),
                ));
            }
            let a2 = inverse_series(1.0, &a).pow(2.0);
            let b2 = inverse_series(1.0, &b).pow(2.0);
            let diff = ScalarExpr::Sum(vec![a2, b2.clone().scaled(-1.0)]);
            let metric = TensorExpr::Sum(vec![
                TensorExpr::conformally_flat(b2),
                TensorExpr::ScalarTimes(diff, Box::new(TensorExpr::RadialProjector)),
            ]);
            let r0 = largest_root_of_series(&a).max(largest_root_of_series(&b));
            let decay = first_nonzero_power(&a).min(first_nonzero_power(&b));
            (metric, f_expr, decay, r0, true, true)
        }
        FamilyKind::PerturbedFlat => {
            let pert = p
                .perturbation
                .as_ref()
                .ok_or_else(|| Error::BadParams("perturbed_flat needs a perturbation".into()))?;
            let h = pert.h_expr(n)?;
            let phi = pert.phi_expr(n)?;
            let f = ScalarExpr::Sum(vec![phi, f_expr]);
            (
                TensorExpr::Sum(vec![TensorExpr::Identity, h]),
                f,
                f64::INFINITY,
                0.0,
                false,
                true,
            )
        }
    };

    let mut metric = metric;
    let mut weight_expr = weight_expr;
    let mut center = vec![0.0; n];
    if let Some(rows) = &p.rotation {
        let q = rotation_matrix(rows, n)?;
        metric = TensorExpr::Rotate(Box::new(metric), q.clone());
        weight_expr = weight_expr.rotated(q);
    }
    if let Some(c) = &p.center {
        center = vec_of_dim(Some(c), n, "center")?;
        metric = TensorExpr::Translate(Box::new(metric), center.clone());
        weight_expr = weight_expr.translated(center.clone());
    }
    let centred = center.iter().all(|c| *c == 0.0);

    let actual_tau = metric_decay.min(f_decay);
    let tau = match p.tau {
        Some(t) if t > actual_tau => {
            return Err(Error::BadParams(format!(
                "stated decay tau = {t} exceeds the family's decay {actual_tau}"
            )))
        }
        Some(t) => t,
        None => actual_tau,
    };
    let required = (nf - 2.0) / 2.0;
    if tau <= required && !p.local.unwrap_or(false) {
        return Err(Error::BadParams(format!(
            "decay tau = {tau} violates tau > (n-2)/2 = {required}; set \"local\": true for pointwise-only use"
        )));
    }

    let r_excl = p.r_min.unwrap_or(r_excl);
    let excluded = (r_excl > 0.0).then(|| ExcludedBall {
        center: center.clone(),
        radius: r_excl,
    });

    let symmetry = Symmetry {
        spherical: metric_radial && weight.is_radial() && centred,
        parity_compatible: metric_even && weight.is_parity_compatible(),
    };

    let (metric, weight): (Arc<dyn TensorField>, Arc<dyn ScalarField>) =
        (Arc::new(metric), Arc::new(weight_expr));
    let spec = WeightedManifoldSpec {
        n,
        metric,
        weight,
        tau,
        excluded,
        symmetry,
        mass_parameter: p.m,
        doc: Some(doc.clone()),
    };
    Ok(match p.jets.unwrap_or_default() {
        JetMode::Analytic => spec,
        JetMode::Fd { step } => spec.with_fd_jets(step.map_or(FdStep::Default, FdStep::Fixed)),
    })
}

/// Fitted exponent `s` in `max_{|x|=ρ} (|g - δ| + |f|) ~ ρ^{-s}` over `radii`.
pub fn measured_decay(spec: &WeightedManifoldSpec, radii: &[f64]) -> Result<f64> {
    let dirs = crate::quadrature::halton_directions(spec.n, 64, 0);
    let mut logs = Vec::new();
    for &rho in radii {
        let mut worst: f64 = 0.0;
        for d in &dirs {
            let x: Vec<f64> = d.iter().map(|v| v * rho).collect();
            let p = EndPoint::new(x);
            spec.check_point(&p)?;
            let g = spec.metric.value(&p.x);
            let dev = (g - DMatrix::identity(spec.n, spec.n)).amax();
            worst = worst.max(dev).max(spec.weight.value(&p.x).abs());
        }
        if worst == 0.0 {
            return Ok(f64::INFINITY);
        }
        logs.push((rho.ln(), worst.ln()));
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::fd_metric_jet;

    fn pt(x: &[f64]) -> EndPoint {
        EndPoint::new(x.to_vec())
    }

    #[test]
    fn flat_metric_is_identity_with_zero_derivatives() {
        let spec = FamilyDoc::new(FamilyKind::Flat, 3).build().unwrap();
        let j = spec.eval_metric(&pt(&[1.0, 2.0, -3.0])).unwrap();
        assert_eq!(j, Jet2Metric::identity(3));
        assert!(spec.tau.is_infinite());
    }

    #[test]
    fn schwarzschild_value_at_two() {
        let spec = FamilyDoc::new(FamilyKind::Schwarzschild, 3)
            .with_m(1.0)
            .build()
            .unwrap();
        let j = spec.eval_metric(&pt(&[2.0, 0.0, 0.0])).unwrap();
        let expected = 1.25f64.powi(4);
        assert!((&j.value - DMatrix::identity(3, 3) * expected).amax() < 1e-14);
    }

    #[test]
    fn f_schwarzschild_excludes_horizon_interior() {
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
            .with_m(2.0)
            .with_weight(WeightProfile::ExpDecay { a: 1.0, length: 1.0 })
            .build()
            .unwrap();
        assert!((spec.excluded_radius() - 1.0).abs() < 1e-15);
        let err = spec.eval_metric(&pt(&[0.5, 0.2, 0.0])).unwrap_err();
        assert!(matches!(err, Error::PointExcluded { .. }));
        // boundary is admissible
        spec.eval_metric(&pt(&[1.0, 0.0, 0.0])).unwrap();
    }

    #[test]
    fn schwarzschild_five_dimensional_horizon_radius() {
        let spec = FamilyDoc::new(FamilyKind::Schwarzschild, 5)
            .with_m(2.0)
            .build()
            .unwrap();
        assert!((spec.excluded_radius() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bad_params_are_rejected() {
        let e = FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(0.0).build();
        assert!(matches!(e, Err(Error::BadParams(_))));
        let e = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::RadialLinear { a: 1.0 })
            .build();
        assert!(matches!(e, Err(Error::BadParams(_))));
        let mut doc = FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.0);
        doc.params.tau = Some(2.0);
        assert!(matches!(doc.build(), Err(Error::BadParams(_))));
        let e = FamilyDoc::new(FamilyKind::Flat, 2).build();
        assert!(matches!(e, Err(Error::BadParams(_))));
    }

    #[test]
    fn inverse_r_weight_jet() {
        let spec = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 })
            .build()
            .unwrap();
        let p = pt(&[1.0, 0.0, 0.0]);
        let j = spec.eval_weight(&p).unwrap();
        assert!((j.value - 1.0).abs() < 1e-15);
        assert!((j.grad[0] + 1.0).abs() < 1e-15);
        assert!(j.grad[1].abs() < 1e-15 && j.grad[2].abs() < 1e-15);
        let fd = spec.with_fd_jets(FdStep::Default).eval_weight(&p).unwrap();
        assert!((fd.grad[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_and_bump_weights_vanish() {
        let spec = FamilyDoc::new(FamilyKind::Flat, 3).build().unwrap();
        assert_eq!(
            spec.eval_weight(&pt(&[1.0, 1.0, 1.0])).unwrap(),
            Jet2Scalar::zero(3)
        );
        let spec = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::Bump {
                center: None,
                radius: 1.0,
                amplitude: 2.0,
            })
            .build()
            .unwrap();
        assert_eq!(
            spec.eval_weight(&pt(&[0.0, 2.0, 0.0])).unwrap(),
            Jet2Scalar::zero(3)
        );
    }

    #[test]
    fn json_round_trip_and_named_weights() {
        let text = r#"{"family": "f_schwarzschild", "n": 3,
                       "params": {"m": 2, "weight": "inverse_r"}}"#;
        let doc: FamilyDoc = serde_json::from_str(text).unwrap();
        let spec = doc.build().unwrap();
        assert_eq!(spec.tau, 1.0);
        let text = r#"{"family": "flat_with_weight", "n": 3,
                       "params": {"weight": {"type": "bump", "center": [1, 0, 0], "radius": 0.5, "amplitude": 1}}}"#;
        let doc: FamilyDoc = serde_json::from_str(text).unwrap();
        let back: FamilyDoc = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(doc, back);
        let text = r#"{"family": "flat_with_weight", "n": 3, "params": {"weight": {"type": "dipole", "a": 0.5}}}"#;
        let spec: FamilyDoc = serde_json::from_str(text).unwrap();
        assert!(!spec.build().unwrap().symmetry.parity_compatible);
        let bad = r#"{"family": "flat_with_weight", "n": 3, "params": {"weight": "nonsense"}}"#;
        let doc: FamilyDoc = serde_json::from_str(bad).unwrap();
        assert!(doc.build().is_err());
    }

    #[test]
    fn built_in_families_have_consistent_jets() {
        let docs = vec![
            FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.0),
            FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
                .with_m(1.0)
                .with_weight(WeightProfile::Bump {
                    center: Some(vec![0.5, 1.0, 0.0]),
                    radius: 2.0,
                    amplitude: 0.5,
                }),
            FamilyDoc::new(FamilyKind::ConformallyFlat, 3).with_coeffs(vec![0.5, -0.05, 0.01]),
            FamilyDoc {
                family: FamilyKind::SphericallySymmetric,
                n: 3,
                params: FamilyParams {
                    a_coeffs: Some(vec![0.7, 0.1]),
                    b_coeffs: Some(vec![0.2]),
                    ..Default::default()
                },
            },
            FamilyDoc::new(FamilyKind::Schwarzschild, 5)
                .with_m(2.0)
                .with_center(vec![0.3, 0.0, -0.2, 0.1, 0.0]),
        ];
        for doc in docs {
            let spec = doc.build().unwrap();
            let x: Vec<f64> = (0..spec.n).map(|i| 1.3 + 0.4 * i as f64).collect();
            let exact = spec.eval_metric(&pt(&x)).unwrap();
            let fd = fd_metric_jet(|y| spec.metric.value(y), &x, 1e-4);
            assert!(
                exact.max_abs_diff(&fd) < 1e-6,
                "{:?}: {}",
                doc.family,
                exact.max_abs_diff(&fd)
            );
        }
    }

    #[test]
    fn conformally_flat_excludes_zero_of_u() {
        let spec = FamilyDoc::new(FamilyKind::ConformallyFlat, 3)
            .with_coeffs(vec![0.5, -0.3])
            .build()
            .unwrap();
        // u = 1 + 0.5/r - 0.3/r^2 vanishes at r = (-0.5 + sqrt(0.25 + 1.2))/2
        let expected = (-0.5 + (0.25f64 + 1.2).sqrt()) / 2.0;
        assert!((spec.excluded_radius() - expected).abs() < 1e-10);
    }

    #[test]
    fn decay_fit_is_at_least_stated_order() {
        let docs = vec![
            FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.0),
            FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
                .with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 }),
            FamilyDoc::new(FamilyKind::Schwarzschild, 5).with_m(2.0),
            FamilyDoc::new(FamilyKind::FlatWithWeight, 3).with_weight(WeightProfile::Dipole { a: 1.0 }),
        ];
        for doc in docs {
            let spec = doc.build().unwrap();
            let s = measured_decay(&spec, &[10.0, 20.0, 40.0]).unwrap();
            assert!(s >= spec.tau - 0.1, "{:?}: fitted {s}, tau {}", doc.family, spec.tau);
        }
    }
}
