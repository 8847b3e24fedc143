//! Evaluable scalar and symmetric-tensor fields on the asymptotic end.
//!
//! Built-in fields are small expression trees ([`ScalarExpr`], [`TensorExpr`])
//! whose jets are exact. Anything given only through point values is wrapped
//! in [`FdScalar`] / [`FdTensor`], which differentiate numerically.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::jet::{default_fd_step, fd_metric_jet, fd_scalar_jet, Jet2Metric, Jet2Scalar};

/// A point of the end chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndPoint {
    pub x: Vec<f64>,
}

impl EndPoint {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x }
    }

    pub fn r(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

impl From<&[f64]> for EndPoint {
    fn from(x: &[f64]) -> Self {
        Self { x: x.to_vec() }
    }
}

pub trait ScalarField: Send + Sync + fmt::Debug {
    fn jet(&self, x: &[f64]) -> Jet2Scalar;

    fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }
}

/// A symmetric 2-tensor field (metric or perturbation).
pub trait TensorField: Send + Sync + fmt::Debug {
    fn jet(&self, x: &[f64]) -> Jet2Metric;

    fn value(&self, x: &[f64]) -> DMatrix<f64> {
        self.jet(x).value
    }
}

/// Scalar expression with exact jets.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarExpr {
    Constant(f64),
    Coordinate(usize),
    RadiusSquared,
    /// `c0 + Σ c r^{-p}` over `(p, c)` terms.
    InversePowers { c0: f64, terms: Vec<(f64, f64)> },
    /// `⟨w, x⟩`.
    Linear(Vec<f64>),
    /// `amplitude * exp(1 - 1/(1 - |x-c|²/R²))` inside the ball, zero outside.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
    /// `(1 - |x-c|²/R²)^power` inside the ball, zero outside. `C^{power-1}`.
    PolyBump {
        center: Vec<f64>,
        radius: f64,
        power: i32,
    },
    /// Radial bump profile centred on the sphere `r = radius`.
    Shell {
        radius: f64,
        width: f64,
        amplitude: f64,
    },
    Sum(Vec<ScalarExpr>),
    Product(Box<ScalarExpr>, Box<ScalarExpr>),
    Power(Box<ScalarExpr>, f64),
    /// `exp(c * a)`.
    Exp(Box<ScalarExpr>, f64),
    Scale(Box<ScalarExpr>, f64),
    /// `a(x - shift)`.
    Translate(Box<ScalarExpr>, Vec<f64>),
    /// `a(Q^T x)`.
    Rotate(Box<ScalarExpr>, DMatrix<f64>),
}

fn bump_profile(t: f64) -> (f64, f64, f64) {
    if t >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = 1.0 - t;
    let g = (1.0 - 1.0 / s).exp();
    let g1 = -g / (s * s);
    let g2 = g / s.powi(4) - 2.0 * g / s.powi(3);
    (g, g1, g2)
}

fn minus(x: &[f64], c: &[f64]) -> Vec<f64> {
    x.iter().zip(c).map(|(a, b)| a - b).collect()
}

fn rotate_back(q: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let v = q.transpose() * DVector::from_column_slice(x);
    v.iter().copied().collect()
}

impl ScalarExpr {
    pub fn constant(c: f64) -> Self {
        Self::Constant(c)
    }

    pub fn inverse_power(a: f64, p: f64) -> Self {
        Self::InversePowers {
            c0: 0.0,
            terms: vec![(p, a)],
        }
    }

    pub fn radius() -> Self {
        Self::Power(Box::new(Self::RadiusSquared), 0.5)
    }

    pub fn times(self, other: Self) -> Self {
        Self::Product(Box::new(self), Box::new(other))
    }

    pub fn pow(self, p: f64) -> Self {
        Self::Power(Box::new(self), p)
    }

    pub fn exp_of(self, c: f64) -> Self {
        Self::Exp(Box::new(self), c)
    }

    pub fn scaled(self, c: f64) -> Self {
        Self::Scale(Box::new(self), c)
    }

    pub fn translated(self, shift: Vec<f64>) -> Self {
        Self::Translate(Box::new(self), shift)
    }

    pub fn rotated(self, q: DMatrix<f64>) -> Self {
        Self::Rotate(Box::new(self), q)
    }

    pub fn eval_jet(&self, x: &[f64]) -> Jet2Scalar {
        let n = x.len();
        match self {
            Self::Constant(c) => Jet2Scalar::constant(n, *c),
            Self::Coordinate(a) => Jet2Scalar::coordinate(x, *a),
            Self::RadiusSquared => Jet2Scalar::radius_squared(x),
            Self::InversePowers { c0, terms } => {
                let r = Jet2Scalar::radius(x);
                let rv = r.value;
                let (mut h0, mut h1, mut h2) = (*c0, 0.0, 0.0);
                for &(p, c) in terms {
                    let t = c * rv.powf(-p);
                    h0 += t;
                    h1 += -p * t / rv;
                    h2 += p * (p + 1.0) * t / (rv * rv);
                }
                r.compose(h0, h1, h2)
            }
            Self::Linear(w) => {
                let grad = DVector::from_column_slice(w);
                let value = w.iter().zip(x).map(|(a, b)| a * b).sum();
                Jet2Scalar {
                    value,
                    grad,
                    hess: DMatrix::zeros(n, n),
                }
            }
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                let y = minus(x, center);
                let t = Jet2Scalar::radius_squared(&y).scale(1.0 / (radius * radius));
                let (g, g1, g2) = bump_profile(t.value);
                t.compose(g, g1, g2).scale(*amplitude)
            }
            Self::PolyBump {
                center,
                radius,
                power,
            } => {
                let y = minus(x, center);
                let t = Jet2Scalar::radius_squared(&y).scale(1.0 / (radius * radius));
                if t.value >= 1.0 {
                    return Jet2Scalar::zero(n);
                }
                let s = 1.0 - t.value;
                let p = *power;
                let pf = p as f64;
                t.compose(
                    s.powi(p),
                    -pf * s.powi(p - 1),
                    pf * (pf - 1.0) * s.powi(p - 2),
                )
            }
            Self::Shell {
                radius,
                width,
                amplitude,
            } => {
                let r = Jet2Scalar::radius(x);
                let s = (r.value - radius) / width;
                let (g, g1, g2) = bump_profile(s * s);
                // d/dr of g(s^2) with s = (r - r_c)/w
                let ds = 1.0 / width;
                let h1 = g1 * 2.0 * s * ds;
                let h2 = (g2 * 4.0 * s * s + g1 * 2.0) * ds * ds;
                r.compose(g, h1, h2).scale(*amplitude)
            }
            Self::Sum(terms) => terms
                .iter()
                .fold(Jet2Scalar::zero(n), |acc, t| &acc + &t.eval_jet(x)),
            Self::Product(a, b) => a.eval_jet(x).times(&b.eval_jet(x)),
            Self::Power(a, p) => a.eval_jet(x).powf(*p),
            Self::Exp(a, c) => a.eval_jet(x).scale(*c).exp(),
            Self::Scale(a, c) => a.eval_jet(x).scale(*c),
            Self::Translate(a, shift) => a.eval_jet(&minus(x, shift)),
            Self::Rotate(a, q) => {
                let inner = a.eval_jet(&rotate_back(q, x));
                Jet2Scalar {
                    value: inner.value,
                    grad: q * inner.grad,
                    hess: q * inner.hess * q.transpose(),
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Coordinate(a) => x[*a],
            Self::RadiusSquared => x.iter().map(|v| v * v).sum(),
            Self::InversePowers { c0, terms } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                c0 + terms.iter().map(|&(p, c)| c * r.powf(-p)).sum::<f64>()
            }
            Self::Linear(w) => w.iter().zip(x).map(|(a, b)| a * b).sum(),
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                let y = minus(x, center);
                let t = y.iter().map(|v| v * v).sum::<f64>() / (radius * radius);
                amplitude * bump_profile(t).0
            }
            Self::PolyBump {
                center,
                radius,
                power,
            } => {
                let y = minus(x, center);
                let t = y.iter().map(|v| v * v).sum::<f64>() / (radius * radius);
                if t >= 1.0 {
                    0.0
                } else {
                    (1.0 - t).powi(*power)
                }
            }
            Self::Shell {
                radius,
                width,
                amplitude,
            } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = (r - radius) / width;
                amplitude * bump_profile(s * s).0
            }
            Self::Sum(terms) => terms.iter().map(|t| t.eval(x)).sum(),
            Self::Product(a, b) => a.eval(x) * b.eval(x),
            Self::Power(a, p) => a.eval(x).powf(*p),
            Self::Exp(a, c) => (c * a.eval(x)).exp(),
            Self::Scale(a, c) => c * a.eval(x),
            Self::Translate(a, shift) => a.eval(&minus(x, shift)),
            Self::Rotate(a, q) => a.eval(&rotate_back(q, x)),
        }
    }
}

impl ScalarField for ScalarExpr {
    fn jet(&self, x: &[f64]) -> Jet2Scalar {
        self.eval_jet(x)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

/// Symmetric-tensor expression with exact jets.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorExpr {
    Identity,
    Constant(DMatrix<f64>),
    /// `x x^T / r^2`.
    RadialProjector,
    ScalarTimes(ScalarExpr, Box<TensorExpr>),
    Sum(Vec<TensorExpr>),
    Translate(Box<TensorExpr>, Vec<f64>),
    /// `Q T(Q^T x) Q^T`.
    Rotate(Box<TensorExpr>, DMatrix<f64>),
}

impl TensorExpr {
    pub fn conformally_flat(factor: ScalarExpr) -> Self {
        Self::ScalarTimes(factor, Box::new(Self::Identity))
    }

    pub fn eval_jet(&self, x: &[f64]) -> Jet2Metric {
        let n = x.len();
        match self {
            Self::Identity => Jet2Metric::identity(n),
            Self::Constant(c) => Jet2Metric::constant(c.clone()),
            Self::RadialProjector => Jet2Metric::radial_projector(x),
            Self::ScalarTimes(s, t) => {
                let sj = s.eval_jet(x);
                match t.as_ref() {
                    Self::Identity => Jet2Metric::from_scalar(&sj, &DMatrix::identity(n, n)),
                    Self::Constant(c) => Jet2Metric::from_scalar(&sj, c),
                    other => other.eval_jet(x).scaled_by(&sj),
                }
            }
            Self::Sum(terms) => terms
                .iter()
                .fold(Jet2Metric::zero(n), |acc, t| &acc + &t.eval_jet(x)),
            Self::Translate(t, shift) => t.eval_jet(&minus(x, shift)),
            Self::Rotate(t, q) => rotate_tensor_jet(&t.eval_jet(&rotate_back(q, x)), q),
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        match self {
            Self::Identity => DMatrix::identity(n, n),
            Self::Constant(c) => c.clone(),
            Self::RadialProjector => {
                let v = DVector::from_column_slice(x);
                &v * v.transpose() / v.norm_squared()
            }
            Self::ScalarTimes(s, t) => t.eval(x) * s.eval(x),
            Self::Sum(terms) => terms
                .iter()
                .fold(DMatrix::zeros(n, n), |acc, t| acc + t.eval(x)),
            Self::Translate(t, shift) => t.eval(&minus(x, shift)),
            Self::Rotate(t, q) => q * t.eval(&rotate_back(q, x)) * q.transpose(),
        }
    }
}

/// Pushes a tensor jet at `Q^T x` forward to `x` under `T' = Q T Q^T`.
fn rotate_tensor_jet(j: &Jet2Metric, q: &DMatrix<f64>) -> Jet2Metric {
    let n = j.dim();
    let conj = |m: &DMatrix<f64>| q * m * q.transpose();
    let value = conj(&j.value);
    let d1: Vec<DMatrix<f64>> = (0..n)
        .map(|k| {
            (0..n).fold(DMatrix::zeros(n, n), |acc, c| {
                acc + conj(&j.d1[c]) * q[(k, c)]
            })
        })
        .collect();
    let mut d2 = Vec::with_capacity(n * n);
    for k in 0..n {
        for l in 0..n {
            let mut acc = DMatrix::zeros(n, n);
            for c in 0..n {
                for d in 0..n {
                    let w = q[(k, c)] * q[(l, d)];
                    if w != 0.0 {
                        acc += conj(j.d2(c, d)) * w;
                    }
                }
            }
            d2.push(acc);
        }
    }
    Jet2Metric { value, d1, d2 }
}

impl TensorField for TensorExpr {
    fn jet(&self, x: &[f64]) -> Jet2Metric {
        self.eval_jet(x)
    }

    fn value(&self, x: &[f64]) -> DMatrix<f64> {
        self.eval(x)
    }
}

/// Finite-difference step policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdStep {
    /// `max(1e-4, 1e-5 r)`.
    Default,
    Fixed(f64),
}

impl FdStep {
    pub fn at(&self, x: &[f64]) -> f64 {
        match self {
            Self::Default => default_fd_step(EndPoint::from(x).r()),
            Self::Fixed(h) => *h,
        }
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type TensorFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Scalar field known through point values only; jets by finite differences.
#[derive(Clone)]
pub struct FdScalar {
    f: Arc<ScalarFn>,
    pub step: FdStep,
}

impl FdScalar {
    pub fn from_fn<F>(f: F, step: FdStep) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            step,
        }
    }

    /// Discards the analytic jets of `inner` and differentiates its values.
    pub fn from_field(inner: Arc<dyn ScalarField>, step: FdStep) -> Self {
        Self::from_fn(move |x| inner.value(x), step)
    }
}

impl fmt::Debug for FdScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FdScalar").field("step", &self.step).finish()
    }
}

impl ScalarField for FdScalar {
    fn jet(&self, x: &[f64]) -> Jet2Scalar {
        fd_scalar_jet(|y| (self.f)(y), x, self.step.at(x))
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Tensor field known through point values only; jets by finite differences.
#[derive(Clone)]
pub struct FdTensor {
    f: Arc<TensorFn>,
    pub step: FdStep,
}

impl FdTensor {
    pub fn from_fn<F>(f: F, step: FdStep) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            step,
        }
    }

    pub fn from_field(inner: Arc<dyn TensorField>, step: FdStep) -> Self {
        Self::from_fn(move |x| inner.value(x), step)
    }
}

impl fmt::Debug for FdTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FdTensor").field("step", &self.step).finish()
    }
}

impl TensorField for FdTensor {
    fn jet(&self, x: &[f64]) -> Jet2Metric {
        fd_metric_jet(|y| (self.f)(y), x, self.step.at(x))
    }

    fn value(&self, x: &[f64]) -> DMatrix<f64> {
        (self.f)(x)
    }
}

/// `exp(c * w) * base` for scalar fields `w`, `base`.
#[derive(Clone, Debug)]
pub struct ExpWeightedScalar {
    pub base: Arc<dyn ScalarField>,
    pub weight: Arc<dyn ScalarField>,
    pub c: f64,
}

impl ScalarField for ExpWeightedScalar {
    fn jet(&self, x: &[f64]) -> Jet2Scalar {
        let e = self.weight.jet(x).scale(self.c).exp();
        e.times(&self.base.jet(x))
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.c * self.weight.value(x)).exp() * self.base.value(x)
    }
}

/// `exp(c * w) * base` for a tensor field `base`.
#[derive(Clone, Debug)]
pub struct ExpWeightedTensor {
    pub base: Arc<dyn TensorField>,
    pub weight: Arc<dyn ScalarField>,
    pub c: f64,
}

impl TensorField for ExpWeightedTensor {
    fn jet(&self, x: &[f64]) -> Jet2Metric {
        let e = self.weight.jet(x).scale(self.c).exp();
        self.base.jet(x).scaled_by(&e)
    }

    fn value(&self, x: &[f64]) -> DMatrix<f64> {
        self.base.value(x) * (self.c * self.weight.value(x)).exp()
    }
}

/// `a + t * b` for tensor fields.
#[derive(Clone, Debug)]
pub struct TensorCombination {
    pub a: Arc<dyn TensorField>,
    pub b: Arc<dyn TensorField>,
    pub t: f64,
}

impl TensorField for TensorCombination {
    fn jet(&self, x: &[f64]) -> Jet2Metric {
        &self.a.jet(x) + &self.b.jet(x).scale(self.t)
    }

    fn value(&self, x: &[f64]) -> DMatrix<f64> {
        self.a.value(x) + self.b.value(x) * self.t
    }
}

/// `a + t * b` for scalar fields.
#[derive(Clone, Debug)]
pub struct ScalarCombination {
    pub a: Arc<dyn ScalarField>,
    pub b: Arc<dyn ScalarField>,
    pub t: f64,
}

impl ScalarField for ScalarCombination {
    fn jet(&self, x: &[f64]) -> Jet2Scalar {
        &self.a.jet(x) + &self.b.jet(x).scale(self.t)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.a.value(x) + self.t * self.b.value(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_scalar(e: &ScalarExpr, x: &[f64], tol: f64) {
        let exact = e.eval_jet(x);
        let fd = fd_scalar_jet(|y| e.eval(y), x, 1e-4);
        let scale = exact.hess.amax().max(exact.value.abs()).max(1.0);
        let d = exact.max_abs_diff(&fd) / scale;
        assert!(d < tol, "{e:?} at {x:?}: {d:e}");
        assert!((exact.value - e.eval(x)).abs() < 1e-14 * scale);
    }

    #[test]
    fn scalar_expressions_have_consistent_jets() {
        let x = [0.8, -0.5, 1.3];
        let cases = vec![
            ScalarExpr::inverse_power(1.0, 1.0),
            ScalarExpr::InversePowers {
                c0: 1.0,
                terms: vec![(1.0, 0.5), (2.0, -0.1), (3.0, 0.05)],
            }
            .pow(4.0),
            ScalarExpr::Bump {
                center: vec![0.5, 0.0, 1.0],
                radius: 1.5,
                amplitude: 0.7,
            },
            ScalarExpr::PolyBump {
                center: vec![0.0, 0.0, 0.5],
                radius: 2.5,
                power: 4,
            },
            ScalarExpr::Shell {
                radius: 1.5,
                width: 0.6,
                amplitude: 2.0,
            },
            ScalarExpr::Coordinate(0).times(ScalarExpr::inverse_power(1.0, 3.0)),
            ScalarExpr::inverse_power(1.0, 1.0).exp_of(-0.5),
            ScalarExpr::inverse_power(1.0, 1.0).translated(vec![0.2, 0.1, -0.3]),
        ];
        for e in &cases {
            check_scalar(e, &x, 1e-6);
        }
    }

    #[test]
    fn rotated_scalar_matches_finite_differences() {
        let q = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let e = ScalarExpr::Coordinate(0)
            .times(ScalarExpr::inverse_power(1.0, 3.0))
            .rotated(q);
        check_scalar(&e, &[0.3, 1.1, -0.4], 1e-6);
    }

    #[test]
    fn rotated_tensor_matches_finite_differences() {
        let (c, s) = (0.6f64, 0.8f64);
        let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let base = TensorExpr::Sum(vec![
            TensorExpr::Identity,
            TensorExpr::ScalarTimes(
                ScalarExpr::inverse_power(0.5, 1.0),
                Box::new(TensorExpr::RadialProjector),
            ),
            TensorExpr::ScalarTimes(
                ScalarExpr::Coordinate(2),
                Box::new(TensorExpr::Constant(DMatrix::from_row_slice(
                    3,
                    3,
                    &[0.0, 0.1, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0],
                ))),
            ),
        ])
        .translated_for_test();
        let t = TensorExpr::Rotate(Box::new(base), q);
        let x = [0.9, 0.4, -1.2];
        let exact = t.eval_jet(&x);
        let fd = fd_metric_jet(|y| t.eval(y), &x, 1e-4);
        assert!(exact.max_abs_diff(&fd) < 1e-6);
    }

    impl TensorExpr {
        fn translated_for_test(self) -> Self {
            Self::Translate(Box::new(self), vec![0.1, -0.2, 0.05])
        }
    }

    #[test]
    fn bump_vanishes_outside_support() {
        let e = ScalarExpr::Bump {
            center: vec![0.0; 3],
            radius: 1.0,
            amplitude: 3.0,
        };
        let j = e.eval_jet(&[1.5, 0.0, 0.0]);
        assert_eq!(j, Jet2Scalar::zero(3));
    }

    #[test]
    fn fd_wrapper_reproduces_analytic_jet() {
        let e: Arc<dyn ScalarField> = Arc::new(ScalarExpr::inverse_power(1.0, 1.0));
        let fd = FdScalar::from_field(e.clone(), FdStep::Default);
        let x = [1.0, 0.0, 0.0];
        let j = fd.jet(&x);
        assert!((j.value - 1.0).abs() < 1e-15);
        assert!((j.grad[0] + 1.0).abs() < 1e-9);
        assert!(j.max_abs_diff(&e.jet(&x)) < 1e-6);
    }
}
