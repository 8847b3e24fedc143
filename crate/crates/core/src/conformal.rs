//! The conformal metric `g̃ = e^{-2f/(n-1)} g` and the dictionary between
//! weighted quantities on `(g, f)` and unweighted ones on `g̃`.

use std::sync::Arc;

use crate::curvature::geometry_at;
use crate::error::Result;
use crate::family::WeightedManifoldSpec;
use crate::fields::{EndPoint, ExpWeightedScalar, ExpWeightedTensor, ScalarExpr, ScalarField};
use crate::surfaces::{self, RadialSurface};

/// `(g, f)` together with `g̃` (carried as a spec with zero weight) and `ψ = -f/(n-1)`.
#[derive(Clone, Debug)]
pub struct ConformalPair {
    pub base: WeightedManifoldSpec,
    pub tilde: WeightedManifoldSpec,
    pub psi: Arc<dyn ScalarField>,
}

impl ConformalPair {
    fn factor(&self) -> f64 {
        -2.0 / (self.base.n as f64 - 1.0)
    }
}

/// Conformal change with exponent `c = -2/(n-1)` by default; `conformal_spec_with`
/// takes any weight so the change can be undone.
pub fn conformal_spec(spec: &WeightedManifoldSpec) -> ConformalPair {
    conformal_spec_with(spec, spec.weight.clone())
}

/// `e^{-2w/(n-1)} g` for an arbitrary scalar `w`.
pub fn conformal_spec_with(spec: &WeightedManifoldSpec, w: Arc<dyn ScalarField>) -> ConformalPair {
    let n = spec.n as f64;
    let metric = Arc::new(ExpWeightedTensor {
        base: spec.metric.clone(),
        weight: w.clone(),
        c: -2.0 / (n - 1.0),
    });
    let tilde = spec
        .with_metric(metric)
        .with_weight(Arc::new(ScalarExpr::Constant(0.0)));
    let psi = Arc::new(crate::fields::ScalarCombination {
        a: Arc::new(ScalarExpr::Constant(0.0)),
        b: w,
        t: -1.0 / (n - 1.0),
    });
    ConformalPair {
        base: spec.clone(),
        tilde,
        psi,
    }
}

/// `R̃(p) - e^{2f/(n-1)} S_f(p)`.
pub fn check_conformal_scalar(spec: &WeightedManifoldSpec, p: &EndPoint) -> Result<f64> {
    let pair = conformal_spec(spec);
    let base = geometry_at(spec, p)?;
    let tilde = geometry_at(&pair.tilde, p)?;
    Ok(tilde.scal - (-pair.factor() * base.f).exp() * base.conf_scal)
}

/// `H̃(p) - e^{f/(n-1)} H_f(p)` for `p` on the sphere.
pub fn check_conformal_mean_curvature(
    spec: &WeightedManifoldSpec,
    surface: &RadialSurface,
    p: &EndPoint,
) -> Result<f64> {
    let pair = conformal_spec(spec);
    let base = surfaces::node_geometry(spec, surface, p)?;
    let tilde = surfaces::node_geometry(&pair.tilde, surface, p)?;
    let n = spec.n as f64;
    Ok(tilde.h - (base.f / (n - 1.0)).exp() * base.h_f)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AreaCheck {
    pub a_f: f64,
    pub a_tilde: f64,
    pub residual: f64,
}

/// Weighted area `∫ e^{-f} dA_g` against the `g̃`-area of the same sphere.
pub fn check_area_equality(spec: &WeightedManifoldSpec, surface: &RadialSurface) -> Result<AreaCheck> {
    let pair = conformal_spec(spec);
    let a_f = surfaces::weighted_area(spec, surface)?;
    let a_tilde = surfaces::area(&pair.tilde, surface)?;
    Ok(AreaCheck {
        a_f,
        a_tilde,
        residual: a_f - a_tilde,
    })
}

/// `u = e^{-f/(n-1)} V`.
pub fn potential_transform(v: Arc<dyn ScalarField>, spec: &WeightedManifoldSpec) -> Arc<dyn ScalarField> {
    Arc::new(ExpWeightedScalar {
        base: v,
        weight: spec.weight.clone(),
        c: -1.0 / (spec.n as f64 - 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{FamilyDoc, FamilyKind, WeightProfile};
    use crate::fields::FdStep;
    use crate::jet::Jet2Metric;

    fn pt(x: &[f64]) -> EndPoint {
        EndPoint::new(x.to_vec())
    }

    fn inverse_r_flat() -> WeightedManifoldSpec {
        FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 })
            .build()
            .unwrap()
    }

    #[test]
    fn zero_weight_is_identity() {
        let spec = FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.0).build().unwrap();
        let pair = conformal_spec(&spec);
        let x = [1.0, 0.3, -0.2];
        assert_eq!(pair.tilde.metric.jet(&x), spec.metric.jet(&x));
        assert_eq!(check_conformal_scalar(&spec, &pt(&x)).unwrap(), 0.0);
    }

    #[test]
    fn f_schwarzschild_tilde_is_schwarzschild() {
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
            .with_m(1.5)
            .with_weight(WeightProfile::Bump { center: None, radius: 3.0, amplitude: 0.7 })
            .build()
            .unwrap();
        let schw = FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.5).build().unwrap();
        let pair = conformal_spec(&spec);
        for x in [[1.0, 0.2, 0.3], [0.1, 2.0, -1.0], [5.0, 0.0, 0.0]] {
            let a = pair.tilde.metric.jet(&x);
            let b = schw.metric.jet(&x);
            assert!(a.max_abs_diff(&b) < 1e-12 && a.max_d2_diff(&b) < 1e-11);
        }
    }

    #[test]
    fn inverse_r_tilde_value() {
        let pair = conformal_spec(&inverse_r_flat());
        let v = pair.tilde.metric.value(&[1.0, 0.0, 0.0]);
        assert!((v[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((pair.psi.value(&[1.0, 0.0, 0.0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn conformal_scalar_identity() {
        let spec = inverse_r_flat();
        let r = check_conformal_scalar(&spec, &pt(&[1.0, 0.0, 0.0])).unwrap();
        assert!(r.abs() < 1e-12, "{r}");
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
            .with_m(1.0)
            .with_weight(WeightProfile::Bump { center: None, radius: 4.0, amplitude: 1.0 })
            .build()
            .unwrap();
        for d in crate::quadrature::halton_directions(3, 16, 5) {
            let x: Vec<f64> = d.iter().map(|v| v * 1.3).collect();
            assert!(check_conformal_scalar(&spec, &pt(&x)).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn fd_jets_converge_at_second_order() {
        let spec = FamilyDoc::new(FamilyKind::ConformallyFlat, 3)
            .with_coeffs(vec![0.6, 0.1])
            .with_weight(WeightProfile::ExpDecay { a: 0.8, length: 1.5 })
            .build()
            .unwrap();
        let p = pt(&[1.2, -0.7, 0.4]);
        let exact = geometry_at(&conformal_spec(&spec).tilde, &p).unwrap().scal;
        let err = |h: f64| {
            let fd = spec.with_fd_jets(FdStep::Fixed(h));
            assert!(check_conformal_scalar(&fd, &p).unwrap().abs() < 1e-10);
            (geometry_at(&conformal_spec(&fd).tilde, &p).unwrap().scal - exact).abs()
        };
        let (e1, e2) = (err(4e-3), err(2e-3));
        let order = (e1 / e2).log2();
        assert!(e2 < 1e-5 && order > 1.8, "{e1:e} {e2:e} {order}");
    }

    #[test]
    fn involution() {
        let spec = FamilyDoc::new(FamilyKind::ConformallyFlat, 3)
            .with_coeffs(vec![0.5])
            .with_weight(WeightProfile::InverseR { a: 0.7, k: 1.0 })
            .build()
            .unwrap();
        let pair = conformal_spec(&spec);
        let neg: Arc<dyn ScalarField> = Arc::new(crate::fields::ScalarCombination {
            a: Arc::new(ScalarExpr::Constant(0.0)),
            b: spec.weight.clone(),
            t: -1.0,
        });
        let back = conformal_spec_with(&pair.tilde, neg);
        let x = [2.0, -1.0, 0.5];
        let a: Jet2Metric = back.tilde.metric.jet(&x);
        let b = spec.metric.jet(&x);
        assert!(a.max_abs_diff(&b) < 1e-12 && a.max_d2_diff(&b) < 1e-12);
    }

    #[test]
    fn potential_transform_values() {
        let spec = inverse_r_flat();
        let u = potential_transform(Arc::new(ScalarExpr::Constant(1.0)), &spec);
        assert!((u.value(&[1.0, 0.0, 0.0]) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn area_equality_on_f_schwarzschild_horizon() {
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
            .with_m(2.0)
            .with_weight(WeightProfile::ExpDecay { a: 1.0, length: 1.0 })
            .build()
            .unwrap();
        let s = RadialSurface::new(3, 1.0, 24);
        let c = check_area_equality(&spec, &s).unwrap();
        let exact = 64.0 * std::f64::consts::PI;
        assert!((c.a_f / exact - 1.0).abs() < 1e-12 && c.residual.abs() < 1e-10, "{c:?}");
    }

    #[test]
    fn mean_curvature_transforms() {
        let spec = FamilyDoc::new(FamilyKind::FSchwarzschild, 3)
            .with_m(1.0)
            .with_weight(WeightProfile::InverseR { a: 0.6, k: 1.0 })
            .build()
            .unwrap();
        let s = RadialSurface::new(3, 1.7, 8);
        for x in s.shell.nodes.iter().step_by(17) {
            let r = check_conformal_mean_curvature(&spec, &s, &pt(x)).unwrap();
            assert!(r.abs() < 1e-12, "{r}");
        }
    }
}
