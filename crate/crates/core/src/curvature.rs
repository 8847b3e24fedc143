//! Pointwise tensor calculus on the end chart.
//!
//! Conventions: `Γ^k_ij = ½ g^kl (∂_i g_jl + ∂_j g_il - ∂_l g_ij)`,
//! `Ric_ij = ∂_k Γ^k_ij - ∂_j Γ^k_ik + Γ^k_kl Γ^l_ij - Γ^k_jl Γ^l_ik`
//! (round spheres have positive curvature), `Δ = ∇_i ∇^i`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::family::WeightedManifoldSpec;
use crate::fields::EndPoint;
use crate::jet::{Jet2Metric, Jet2Scalar};

#[derive(Clone, Debug)]
pub struct GeometryJet {
    pub n: usize,
    pub metric: DMatrix<f64>,
    pub inv_metric: DMatrix<f64>,
    /// `gamma[k][(i, j)] = Γ^k_ij`.
    pub gamma: Vec<DMatrix<f64>>,
    /// `dgamma[m][k][(i, j)] = ∂_m Γ^k_ij`.
    pub(crate) dgamma: Vec<Vec<DMatrix<f64>>>,
    pub ric: DMatrix<f64>,
    pub scal: f64,
    pub f: f64,
    /// `∂_i f` (lower index).
    pub df: DVector<f64>,
    /// `∇^i f`.
    pub grad_f: DVector<f64>,
    pub hess_f: DMatrix<f64>,
    pub lap_f: f64,
    pub gradnorm2_f: f64,
    /// `R_f = R + 2Δf - |∇f|²`.
    pub weighted_scal: f64,
    /// `S_f = R_f + |∇f|²/(n-1)`.
    pub conf_scal: f64,
}

/// Christoffel symbols, their first derivatives and Ricci from a metric 2-jet.
pub(crate) fn connection(g: &Jet2Metric) -> (DMatrix<f64>, Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>, DMatrix<f64>) {
    let n = g.dim();
    let ginv = g
        .value
        .clone()
        .try_inverse()
        .expect("metric jet must be invertible");
    // ∂_m g^{kl} = -g^{ka} ∂_m g_ab g^{bl}
    let dginv: Vec<DMatrix<f64>> = (0..n).map(|m| -(&ginv * &g.d1[m] * &ginv)).collect();

    // first kind: c[l][(i,j)] = ½(∂_i g_jl + ∂_j g_il - ∂_l g_ij)
    let first_kind = |l: usize| -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            0.5 * (g.d1[i][(j, l)] + g.d1[j][(i, l)] - g.d1[l][(i, j)])
        })
    };
    let c: Vec<DMatrix<f64>> = (0..n).map(first_kind).collect();
    // ∂_m of the first-kind symbols
    let dc = |m: usize, l: usize| -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            0.5 * (g.d2(m, i)[(j, l)] + g.d2(m, j)[(i, l)] - g.d2(m, l)[(i, j)])
        })
    };
    let dcs: Vec<Vec<DMatrix<f64>>> = (0..n).map(|m| (0..n).map(|l| dc(m, l)).collect()).collect();

    let gamma: Vec<DMatrix<f64>> = (0..n)
        .map(|k| {
            let mut acc = DMatrix::zeros(n, n);
            for l in 0..n {
                acc += &c[l] * ginv[(k, l)];
            }
            acc
        })
        .collect();
    let dgamma: Vec<Vec<DMatrix<f64>>> = (0..n)
        .map(|m| {
            (0..n)
                .map(|k| {
                    let mut acc = DMatrix::zeros(n, n);
                    for l in 0..n {
                        acc += &c[l] * dginv[m][(k, l)] + &dcs[m][l] * ginv[(k, l)];
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let ric = DMatrix::from_fn(n, n, |i, j| {
        let mut s = 0.0;
        for k in 0..n {
            s += dgamma[k][k][(i, j)] - dgamma[j][k][(i, k)];
            for l in 0..n {
                s += gamma[k][(k, l)] * gamma[l][(i, j)] - gamma[k][(j, l)] * gamma[l][(i, k)];
            }
        }
        s
    });
    let ric = crate::jet::symmetrise(&ric);
    (ginv, gamma, dgamma, ric)
}

/// Covariant Hessian `∇_i∇_j u = ∂_i∂_j u - Γ^k_ij ∂_k u`.
pub fn covariant_hessian(gamma: &[DMatrix<f64>], u: &Jet2Scalar) -> DMatrix<f64> {
    let mut h = u.hess.clone();
    for (k, gk) in gamma.iter().enumerate() {
        h -= gk * u.grad[k];
    }
    crate::jet::symmetrise(&h)
}

/// Builds every geometric quantity from metric and weight jets.
pub fn geometry_from_jets(g: &Jet2Metric, f: &Jet2Scalar) -> GeometryJet {
    let n = g.dim();
    let (ginv, gamma, dgamma, ric) = connection(g);
    let scal = ginv.component_mul(&ric).sum();
    let hess_f = covariant_hessian(&gamma, f);
    let lap_f = ginv.component_mul(&hess_f).sum();
    let grad_f = &ginv * &f.grad;
    let gradnorm2_f = f.grad.dot(&grad_f);
    let weighted_scal = scal + 2.0 * lap_f - gradnorm2_f;
    let conf_scal = weighted_scal + gradnorm2_f / (n as f64 - 1.0);
    GeometryJet {
        n,
        metric: g.value.clone(),
        inv_metric: ginv,
        gamma,
        dgamma,
        ric,
        scal,
        f: f.value,
        df: f.grad.clone(),
        grad_f,
        hess_f,
        lap_f,
        gradnorm2_f,
        weighted_scal,
        conf_scal,
    }
}

pub fn geometry_at(spec: &WeightedManifoldSpec, p: &EndPoint) -> Result<GeometryJet> {
    let g = spec.eval_metric(p)?;
    let f = spec.eval_weight(p)?;
    Ok(geometry_from_jets(&g, &f))
}

impl GeometryJet {
    /// `g^ij a_i b_j`.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.inv_metric * b))
    }

    pub fn raise(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.inv_metric * a
    }

    /// `g^ik T_kl g^lj`.
    pub fn raise_both(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inv_metric * t * &self.inv_metric
    }

    pub fn trace(&self, t: &DMatrix<f64>) -> f64 {
        self.inv_metric.component_mul(t).sum()
    }

    pub fn hessian(&self, u: &Jet2Scalar) -> DMatrix<f64> {
        covariant_hessian(&self.gamma, u)
    }

    pub fn laplacian(&self, u: &Jet2Scalar) -> f64 {
        self.trace(&self.hessian(u))
    }

    /// `R + 2Δf - (n-2)/(n-1)|∇f|²`, the second expression for `S_f`.
    pub fn conf_scal_alt(&self) -> f64 {
        let n = self.n as f64;
        self.scal + 2.0 * self.lap_f - (n - 2.0) / (n - 1.0) * self.gradnorm2_f
    }

    pub fn record(&self) -> GeometryRecord {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        GeometryRecord {
            n: self.n,
            gamma: self.gamma.iter().map(mat).collect(),
            ric: mat(&self.ric),
            scal: self.scal,
            inv_metric: mat(&self.inv_metric),
            grad_f: self.grad_f.iter().copied().collect(),
            hess_f: mat(&self.hess_f),
            lap_f: self.lap_f,
            gradnorm2_f: self.gradnorm2_f,
            weighted_scal: self.weighted_scal,
            conf_scal: self.conf_scal,
        }
    }
}

/// Plain-data view of a [`GeometryJet`] for JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct GeometryRecord {
    pub n: usize,
    pub gamma: Vec<Vec<Vec<f64>>>,
    pub ric: Vec<Vec<f64>>,
    pub scal: f64,
    pub inv_metric: Vec<Vec<f64>>,
    pub grad_f: Vec<f64>,
    pub hess_f: Vec<Vec<f64>>,
    pub lap_f: f64,
    pub gradnorm2_f: f64,
    pub weighted_scal: f64,
    pub conf_scal: f64,
}

/// `S_f` as a function of the point.
#[derive(Clone, Debug)]
pub struct ConfScalField {
    spec: WeightedManifoldSpec,
}

impl ConfScalField {
    pub fn at(&self, p: &EndPoint) -> Result<f64> {
        Ok(geometry_at(&self.spec, p)?.conf_scal)
    }
}

pub fn conf_scal_field(spec: &WeightedManifoldSpec) -> ConfScalField {
    ConfScalField { spec: spec.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{FamilyDoc, FamilyKind, WeightProfile};
    use crate::fields::{ScalarExpr, TensorExpr};
    use std::sync::Arc;

    fn pt(x: &[f64]) -> EndPoint {
        EndPoint::new(x.to_vec())
    }

    #[test]
    fn flat_is_flat() {
        let spec = FamilyDoc::new(FamilyKind::Flat, 4).build().unwrap();
        let geo = geometry_at(&spec, &pt(&[1.0, -2.0, 0.5, 3.0])).unwrap();
        assert_eq!(geo.scal, 0.0);
        assert_eq!(geo.weighted_scal, 0.0);
        assert_eq!(geo.conf_scal, 0.0);
    }

    /// `R(u^{4/(n-2)} δ) = -4(n-1)/(n-2) u^{-(n+2)/(n-2)} Δ_δ u`.
    fn yamabe(u: &ScalarExpr, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let j = u.eval_jet(x);
        let lap = j.hess.trace();
        -4.0 * (n - 1.0) / (n - 2.0) * j.value.powf(-(n + 2.0) / (n - 2.0)) * lap
    }

    #[test]
    fn conformally_flat_scalar_curvature_matches_yamabe_formula() {
        for n in [3usize, 4, 5] {
            let nf = n as f64;
            let u = ScalarExpr::InversePowers {
                c0: 1.0,
                terms: vec![(1.0, 0.7), (2.0, -0.2), (nf - 2.0, 0.3)],
            };
            let g = TensorExpr::conformally_flat(u.clone().pow(4.0 / (nf - 2.0)));
            let x: Vec<f64> = (0..n).map(|i| 1.1 + 0.3 * i as f64).collect();
            let geo = geometry_from_jets(&g.eval_jet(&x), &Jet2Scalar::zero(n));
            let expect = yamabe(&u, &x);
            assert!(
                (geo.scal - expect).abs() < 1e-11 * expect.abs().max(1.0),
                "n = {n}: {} vs {expect}",
                geo.scal
            );
        }
    }

    #[test]
    fn schwarzschild_is_scalar_flat() {
        let spec = FamilyDoc::new(FamilyKind::Schwarzschild, 3)
            .with_m(1.0)
            .build()
            .unwrap();
        let geo = geometry_at(&spec, &pt(&[3.0, 0.0, 0.0])).unwrap();
        assert!(geo.scal.abs() < 1e-13);
        assert!(geo.ric.amax() > 1e-3);
    }

    #[test]
    fn round_sphere_via_stereographic_chart() {
        // 4/(1+r²)² δ is the unit sphere: R = n(n-1), Ric = (n-1) g
        for n in [3usize, 4] {
            let factor = ScalarExpr::Sum(vec![ScalarExpr::Constant(1.0), ScalarExpr::RadiusSquared])
                .pow(-2.0)
                .scaled(4.0);
            let g = TensorExpr::conformally_flat(factor).eval_jet(&vec![0.4; n]);
            let geo = geometry_from_jets(&g, &Jet2Scalar::zero(n));
            let nf = n as f64;
            assert!((geo.scal - nf * (nf - 1.0)).abs() < 1e-12);
            assert!((&geo.ric - &geo.metric * (nf - 1.0)).amax() < 1e-12);
        }
    }

    #[test]
    fn linear_weight_on_flat() {
        let spec = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::Linear { w: vec![0.6, 0.0, 0.8] })
            .local()
            .build()
            .unwrap();
        let geo = geometry_at(&spec, &pt(&[1.0, 1.0, 1.0])).unwrap();
        assert!((geo.weighted_scal + 1.0).abs() < 1e-14);
        assert!((geo.conf_scal + 0.5).abs() < 1e-14);
    }

    #[test]
    fn inverse_r_weight_on_flat() {
        let spec = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 })
            .build()
            .unwrap();
        let geo = geometry_at(&spec, &pt(&[1.0, 0.0, 0.0])).unwrap();
        assert!(geo.lap_f.abs() < 1e-14);
        assert!((geo.gradnorm2_f - 1.0).abs() < 1e-14);
        assert!((geo.conf_scal + 0.5).abs() < 1e-14);
        let fd = spec.with_fd_jets(crate::fields::FdStep::Default);
        let geo_fd = geometry_at(&fd, &pt(&[1.0, 0.0, 0.0])).unwrap();
        assert!((geo_fd.conf_scal + 0.5).abs() < 1e-6);
    }

    #[test]
    fn f_schwarzschild_has_vanishing_conf_scal() {
        for (n, w) in [
            (3, WeightProfile::InverseR { a: 0.5, k: 1.0 }),
            (3, WeightProfile::Bump { center: None, radius: 4.0, amplitude: 0.8 }),
            (5, WeightProfile::ExpDecay { a: 1.0, length: 2.0 }),
        ] {
            let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, n)
                .with_m(1.0)
                .with_weight(w)
                .build()
                .unwrap();
            let sf = conf_scal_field(&spec);
            for d in crate::quadrature::halton_directions(n, 20, 0) {
                let x: Vec<f64> = d.iter().map(|v| v * 1.7).collect();
                let geo = geometry_at(&spec, &pt(&x)).unwrap();
                assert!(geo.conf_scal.abs() < 1e-10, "{}", geo.conf_scal);
                assert!((geo.conf_scal - geo.conf_scal_alt()).abs() < 1e-12);
                assert_eq!(sf.at(&pt(&x)).unwrap(), geo.conf_scal);
            }
        }
    }

    #[test]
    fn rotation_leaves_scalars_unchanged() {
        let c = 0.6f64;
        let s = 0.8f64;
        let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let u = ScalarExpr::Sum(vec![
            ScalarExpr::Constant(1.0),
            ScalarExpr::Bump { center: vec![0.5, 0.2, 0.0], radius: 3.0, amplitude: 0.3 },
        ]);
        let g = TensorExpr::conformally_flat(u.pow(4.0));
        let f = ScalarExpr::Bump { center: vec![0.0, 0.4, 0.1], radius: 2.0, amplitude: 0.5 };
        let spec = WeightedManifoldSpec::custom(3, Arc::new(g.clone()), Arc::new(f.clone()), f64::INFINITY, None).unwrap();
        let rot = WeightedManifoldSpec::custom(
            3,
            Arc::new(TensorExpr::Rotate(Box::new(g), q.clone())),
            Arc::new(f.rotated(q.clone())),
            f64::INFINITY,
            None,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.7, -0.3, 0.5]);
        let qx = &q * &x;
        let a = geometry_at(&spec, &pt(x.as_slice())).unwrap();
        let b = geometry_at(&rot, &pt(qx.as_slice())).unwrap();
        assert!((a.scal - b.scal).abs() < 1e-10);
        assert!((a.lap_f - b.lap_f).abs() < 1e-10);
        assert!((a.gradnorm2_f - b.gradnorm2_f).abs() < 1e-10);
    }

    #[test]
    fn scalar_curvature_is_ricci_trace_and_record_serialises() {
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 4)
            .with_m(1.0)
            .with_weight(WeightProfile::InverseR { a: 1.0, k: 2.0 })
            .build()
            .unwrap();
        let geo = geometry_at(&spec, &pt(&[1.0, 0.5, -0.2, 0.3])).unwrap();
        assert!((geo.ric.clone() - geo.ric.transpose()).amax() < 1e-14);
        assert!((geo.hess_f.clone() - geo.hess_f.transpose()).amax() < 1e-14);
        assert!((geo.trace(&geo.ric) - geo.scal).abs() <= 1e-12 * geo.scal.abs().max(1.0));
        let json = serde_json::to_value(geo.record()).unwrap();
        assert_eq!(json["gamma"].as_array().unwrap().len(), 4);
    }
}
