//! Second-order jets of scalar and symmetric 2-tensor fields in end coordinates.
//!
//! A jet stores a value together with its first and second coordinate
//! derivatives at one point. Analytic fields are assembled from a handful of
//! primitive jets (coordinates, `r`, `|x|^2`) using the product and chain
//! rules implemented here; user fields fall back to the finite-difference
//! constructors at the bottom of the module.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};

/// Value, gradient and (symmetric) Hessian of a scalar field at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2Scalar {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Jet2Scalar {
    /// Builds a jet, symmetrising the Hessian.
    pub fn new(value: f64, grad: DVector<f64>, hess: DMatrix<f64>) -> Self {
        let hess = symmetrise(&hess);
        Self { value, grad, hess }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            value,
            grad: DVector::zeros(n),
            hess: DMatrix::zeros(n, n),
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(n, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    /// The coordinate function `x^a`.
    pub fn coordinate(x: &[f64], a: usize) -> Self {
        let n = x.len();
        let mut grad = DVector::zeros(n);
        grad[a] = 1.0;
        Self {
            value: x[a],
            grad,
            hess: DMatrix::zeros(n, n),
        }
    }

    /// `|x|^2`.
    pub fn radius_squared(x: &[f64]) -> Self {
        let n = x.len();
        let v = DVector::from_column_slice(x);
        Self {
            value: v.norm_squared(),
            grad: 2.0 * &v,
            hess: DMatrix::identity(n, n) * 2.0,
        }
    }

    /// `r = |x|`; requires `x != 0`.
    pub fn radius(x: &[f64]) -> Self {
        let n = x.len();
        let v = DVector::from_column_slice(x);
        let r = v.norm();
        let nu = &v / r;
        let hess = (DMatrix::identity(n, n) - &nu * nu.transpose()) / r;
        Self {
            value: r,
            grad: nu,
            hess,
        }
    }

    /// Chain rule: jet of `h(F)` where `self` is the jet of `F` and
    /// `(h0, h1, h2)` are `h, h', h''` evaluated at `F`.
    pub fn compose(&self, h0: f64, h1: f64, h2: f64) -> Self {
        let hess = &self.grad * self.grad.transpose() * h2 + &self.hess * h1;
        Self {
            value: h0,
            grad: &self.grad * h1,
            hess,
        }
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.compose(e, e, e)
    }

    pub fn powf(&self, p: f64) -> Self {
        let v = self.value;
        self.compose(
            v.powf(p),
            p * v.powf(p - 1.0),
            p * (p - 1.0) * v.powf(p - 2.0),
        )
    }

    pub fn recip(&self) -> Self {
        self.powf(-1.0)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            value: self.value * c,
            grad: &self.grad * c,
            hess: &self.hess * c,
        }
    }

    pub fn shift(&self, c: f64) -> Self {
        Self {
            value: self.value + c,
            ..self.clone()
        }
    }

    /// Product rule.
    pub fn times(&self, other: &Self) -> Self {
        let cross = &self.grad * other.grad.transpose();
        let hess = &other.hess * self.value
            + &self.hess * other.value
            + &cross
            + cross.transpose();
        Self {
            value: self.value * other.value,
            grad: &other.grad * self.value + &self.grad * other.value,
            hess,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let dv = (self.value - other.value).abs();
        let dg = (&self.grad - &other.grad).amax();
        let dh = (&self.hess - &other.hess).amax();
        dv.max(dg).max(dh)
    }
}

impl Add for &Jet2Scalar {
    type Output = Jet2Scalar;
    fn add(self, rhs: Self) -> Jet2Scalar {
        Jet2Scalar {
            value: self.value + rhs.value,
            grad: &self.grad + &rhs.grad,
            hess: &self.hess + &rhs.hess,
        }
    }
}

impl Sub for &Jet2Scalar {
    type Output = Jet2Scalar;
    fn sub(self, rhs: Self) -> Jet2Scalar {
        Jet2Scalar {
            value: self.value - rhs.value,
            grad: &self.grad - &rhs.grad,
            hess: &self.hess - &rhs.hess,
        }
    }
}

impl Mul for &Jet2Scalar {
    type Output = Jet2Scalar;
    fn mul(self, rhs: Self) -> Jet2Scalar {
        self.times(rhs)
    }
}

impl Neg for &Jet2Scalar {
    type Output = Jet2Scalar;
    fn neg(self) -> Jet2Scalar {
        self.scale(-1.0)
    }
}

/// Value, first and second coordinate derivatives of a symmetric 2-tensor.
///
/// `d1[k]` holds `∂_k T_ij`; `d2[k * n + l]` holds `∂_k ∂_l T_ij`.
/// Used both for metrics and for metric perturbations `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2Metric {
    pub value: DMatrix<f64>,
    pub d1: Vec<DMatrix<f64>>,
    pub d2: Vec<DMatrix<f64>>,
}

impl Jet2Metric {
    pub fn zero(n: usize) -> Self {
        Self::constant(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn constant(value: DMatrix<f64>) -> Self {
        let n = value.nrows();
        Self {
            value,
            d1: vec![DMatrix::zeros(n, n); n],
            d2: vec![DMatrix::zeros(n, n); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }

    pub fn d2(&self, k: usize, l: usize) -> &DMatrix<f64> {
        &self.d2[k * self.dim() + l]
    }

    /// Enforces symmetry in `(i, j)` everywhere and in `(k, l)` for `d2`.
    pub fn symmetrised(&self) -> Self {
        let n = self.dim();
        let value = symmetrise(&self.value);
        let d1 = self.d1.iter().map(symmetrise).collect();
        let mut d2 = vec![DMatrix::zeros(n, n); n * n];
        for k in 0..n {
            for l in 0..n {
                let avg = (self.d2(k, l) + self.d2(l, k)) * 0.5;
                d2[k * n + l] = symmetrise(&avg);
            }
        }
        Self { value, d1, d2 }
    }

    /// Constant tensor times a scalar jet.
    pub fn from_scalar(s: &Jet2Scalar, c: &DMatrix<f64>) -> Self {
        let n = s.dim();
        let d1 = (0..n).map(|k| c * s.grad[k]).collect();
        let mut d2 = Vec::with_capacity(n * n);
        for k in 0..n {
            for l in 0..n {
                d2.push(c * s.hess[(k, l)]);
            }
        }
        Self {
            value: c * s.value,
            d1,
            d2,
        }
    }

    /// Product rule for `s * T`.
    pub fn scaled_by(&self, s: &Jet2Scalar) -> Self {
        let n = self.dim();
        let value = &self.value * s.value;
        let d1 = (0..n)
            .map(|k| &self.value * s.grad[k] + &self.d1[k] * s.value)
            .collect();
        let mut d2 = Vec::with_capacity(n * n);
        for k in 0..n {
            for l in 0..n {
                d2.push(
                    &self.value * s.hess[(k, l)]
                        + &self.d1[l] * s.grad[k]
                        + &self.d1[k] * s.grad[l]
                        + self.d2(k, l) * s.value,
                );
            }
        }
        Self { value, d1, d2 }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            value: &self.value * c,
            d1: self.d1.iter().map(|m| m * c).collect(),
            d2: self.d2.iter().map(|m| m * c).collect(),
        }
    }

    /// `x x^T`.
    pub fn position_outer(x: &[f64]) -> Self {
        let n = x.len();
        let v = DVector::from_column_slice(x);
        let value = &v * v.transpose();
        let e = |k: usize| {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            e
        };
        let d1 = (0..n)
            .map(|k| {
                let ek = e(k);
                &ek * v.transpose() + &v * ek.transpose()
            })
            .collect();
        let mut d2 = Vec::with_capacity(n * n);
        for k in 0..n {
            for l in 0..n {
                let (ek, el) = (e(k), e(l));
                d2.push(&ek * el.transpose() + &el * ek.transpose());
            }
        }
        Self { value, d1, d2 }
    }

    /// The radial projector `ν ν^T = x x^T / r^2`.
    pub fn radial_projector(x: &[f64]) -> Self {
        let inv_r2 = Jet2Scalar::radius_squared(x).recip();
        Self::position_outer(x).scaled_by(&inv_r2)
    }

    /// Trace against the flat metric, as a scalar jet.
    pub fn flat_trace(&self) -> Jet2Scalar {
        let n = self.dim();
        let grad = DVector::from_iterator(n, self.d1.iter().map(|m| m.trace()));
        let hess = DMatrix::from_fn(n, n, |k, l| self.d2(k, l).trace());
        Jet2Scalar {
            value: self.value.trace(),
            grad,
            hess,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m = (&self.value - &other.value).amax();
        for (a, b) in self.d1.iter().zip(&other.d1) {
            m = m.max((a - b).amax());
        }
        for (a, b) in self.d2.iter().zip(&other.d2) {
            m = m.max((a - b).amax());
        }
        m
    }

    pub fn max_d2_diff(&self, other: &Self) -> f64 {
        self.d2
            .iter()
            .zip(&other.d2)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
            && nalgebra::Cholesky::new(self.value.clone()).is_some()
    }
}

impl Add for &Jet2Metric {
    type Output = Jet2Metric;
    fn add(self, rhs: Self) -> Jet2Metric {
        Jet2Metric {
            value: &self.value + &rhs.value,
            d1: self.d1.iter().zip(&rhs.d1).map(|(a, b)| a + b).collect(),
            d2: self.d2.iter().zip(&rhs.d2).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Jet2Metric {
    type Output = Jet2Metric;
    fn sub(self, rhs: Self) -> Jet2Metric {
        Jet2Metric {
            value: &self.value - &rhs.value,
            d1: self.d1.iter().zip(&rhs.d1).map(|(a, b)| a - b).collect(),
            d2: self.d2.iter().zip(&rhs.d2).map(|(a, b)| a - b).collect(),
        }
    }
}

pub fn symmetrise(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Default finite-difference step at radius `r`.
pub fn default_fd_step(r: f64) -> f64 {
    (1e-5 * r).max(1e-4)
}

fn offset(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(k, d) in moves {
        y[k] += d;
    }
    y
}

/// Finite-difference jet of a generic value-valued map.
///
/// First derivatives use the 4th-order central stencil, second derivatives
/// the 2nd-order central stencil (4-point cross stencil for mixed terms).
fn fd_jet<T, F>(f: F, x: &[f64], h: f64) -> (T, Vec<T>, Vec<T>)
where
    F: Fn(&[f64]) -> T,
    T: Clone + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let n = x.len();
    let f0 = f(x);
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    let mut first = Vec::with_capacity(n);
    for k in 0..n {
        let p1 = f(&offset(x, &[(k, h)]));
        let m1 = f(&offset(x, &[(k, -h)]));
        let p2 = f(&offset(x, &[(k, 2.0 * h)]));
        let m2 = f(&offset(x, &[(k, -2.0 * h)]));
        let d = (p1.clone() * 8.0 - m1.clone() * 8.0 - p2 + m2) * (1.0 / (12.0 * h));
        first.push(d);
        plus.push(p1);
        minus.push(m1);
    }
    let mut second: Vec<Option<T>> = vec![None; n * n];
    for k in 0..n {
        let d = (plus[k].clone() + minus[k].clone() - f0.clone() * 2.0) * (1.0 / (h * h));
        second[k * n + k] = Some(d);
        for l in (k + 1)..n {
            let pp = f(&offset(x, &[(k, h), (l, h)]));
            let pm = f(&offset(x, &[(k, h), (l, -h)]));
            let mp = f(&offset(x, &[(k, -h), (l, h)]));
            let mm = f(&offset(x, &[(k, -h), (l, -h)]));
            let d = (pp - pm - mp + mm) * (1.0 / (4.0 * h * h));
            second[k * n + l] = Some(d.clone());
            second[l * n + k] = Some(d);
        }
    }
    let second = second.into_iter().map(|v| v.expect("filled")).collect();
    (f0, first, second)
}

/// Scalar jet from point values by finite differences with step `h`.
pub fn fd_scalar_jet<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Jet2Scalar {
    let n = x.len();
    let (v, first, second) = fd_jet(f, x, h);
    Jet2Scalar::new(
        v,
        DVector::from_vec(first),
        DMatrix::from_row_slice(n, n, &second),
    )
}

/// Symmetric-tensor jet from point values by finite differences with step `h`.
pub fn fd_metric_jet<F: Fn(&[f64]) -> DMatrix<f64>>(f: F, x: &[f64], h: f64) -> Jet2Metric {
    let (value, d1, d2) = fd_jet(f, x, h);
    Jet2Metric { value, d1, d2 }.symmetrised()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(x: &[f64]) -> f64 {
        x[0].exp() * x[1].sin() + x[2].powi(3) * x[0]
    }

    fn smooth_jet(x: &[f64]) -> Jet2Scalar {
        let (e, s, c) = (x[0].exp(), x[1].sin(), x[1].cos());
        let grad = DVector::from_vec(vec![e * s + x[2].powi(3), e * c, 3.0 * x[2] * x[2] * x[0]]);
        let hess = DMatrix::from_row_slice(
            3,
            3,
            &[
                e * s,
                e * c,
                3.0 * x[2] * x[2],
                e * c,
                -e * s,
                0.0,
                3.0 * x[2] * x[2],
                0.0,
                6.0 * x[2] * x[0],
            ],
        );
        Jet2Scalar::new(smooth(x), grad, hess)
    }

    #[test]
    fn radius_jet_matches_finite_differences() {
        let x = [0.7, -1.2, 2.1];
        let exact = Jet2Scalar::radius(&x);
        let fd = fd_scalar_jet(|y| (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt(), &x, 1e-3);
        assert!(exact.max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn product_and_chain_rule_match_finite_differences() {
        let x = [0.3, 0.4, -0.2];
        let r = Jet2Scalar::radius(&x);
        let c = Jet2Scalar::coordinate(&x, 0);
        let jet = &r.powf(-3.0) * &c;
        let jet = jet.exp();
        let fd = fd_scalar_jet(
            |y| {
                let r = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
                (y[0] / (r * r * r)).exp()
            },
            &x,
            1e-4,
        );
        let scale = jet.hess.amax().max(1.0);
        assert!(jet.max_abs_diff(&fd) / scale < 1e-5, "{}", jet.max_abs_diff(&fd));
    }

    #[test]
    fn radial_projector_matches_finite_differences() {
        let x = [1.1, -0.4, 0.9];
        let exact = Jet2Metric::radial_projector(&x);
        let fd = fd_metric_jet(
            |y| {
                let v = DVector::from_column_slice(y);
                &v * v.transpose() / v.norm_squared()
            },
            &x,
            1e-4,
        );
        assert!(exact.max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn scaled_by_matches_finite_differences() {
        let x = [1.5, 0.2, -0.7];
        let s = Jet2Scalar::radius(&x).powf(-1.0).shift(1.0).powf(4.0);
        let t = Jet2Metric::radial_projector(&x).scaled_by(&s);
        let fd = fd_metric_jet(
            |y| {
                let v = DVector::from_column_slice(y);
                let r = v.norm();
                &v * v.transpose() / (r * r) * (1.0 + 1.0 / r).powi(4)
            },
            &x,
            1e-4,
        );
        assert!(t.max_abs_diff(&fd) < 1e-5);
    }

    #[test]
    fn fd_second_derivatives_are_second_order() {
        let x = [0.2, 0.5, -0.3];
        let exact = smooth_jet(&x);
        let e1 = fd_scalar_jet(smooth, &x, 0.02).max_abs_diff(&exact);
        let e2 = fd_scalar_jet(smooth, &x, 0.01).max_abs_diff(&exact);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn symmetrisation_is_idempotent() {
        let x = [0.3, 0.9, 1.4];
        let t = fd_metric_jet(
            |y| DMatrix::from_fn(3, 3, |i, j| (y[i] * (j as f64 + 1.0)).sin()),
            &x,
            1e-3,
        );
        let once = t.symmetrised();
        assert_eq!(once, once.symmetrised());
    }
}
