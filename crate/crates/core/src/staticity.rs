//! Linearisation of `(g, f) ↦ S_f e^{-f} dV_g`, its formal adjoint, and the
//! identities built on them (Michel flux, conformal static identities, trace
//! identity, f-static certificates).

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_spec, potential_transform};
use crate::curvature::{geometry_at, geometry_from_jets, GeometryJet};
use crate::error::{Error, Result};
use crate::family::{PerturbationDoc, PerturbationTerm, WeightedManifoldSpec};
use crate::fields::{EndPoint, ExpWeightedScalar, ScalarExpr, ScalarField, TensorField};
use crate::jet::{Jet2Metric, Jet2Scalar};
use crate::mass::{div_flux_u_jets, flux_u_jets};
use crate::quadrature::{BallRule, ProbeGrid, SphereShell};

/// A variation `(h, φ)` of `(g, f)`.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub h: Arc<dyn TensorField>,
    pub phi: Arc<dyn ScalarField>,
    /// Closed ball outside which `h` and `φ` vanish.
    pub support: Option<(Vec<f64>, f64)>,
}

impl Perturbation {
    pub fn from_doc(doc: &PerturbationDoc, n: usize) -> Result<Self> {
        Ok(Self {
            h: Arc::new(doc.h_expr(n)?),
            phi: Arc::new(doc.phi_expr(n)?),
            support: doc.support(n),
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            h: Arc::new(crate::fields::TensorExpr::Constant(DMatrix::zeros(n, n))),
            phi: Arc::new(ScalarExpr::Constant(0.0)),
            support: None,
        }
    }

    /// `(c h, c φ)`.
    pub fn scaled(&self, n: usize, c: f64) -> Self {
        Self {
            h: Arc::new(crate::fields::TensorCombination {
                a: Arc::new(crate::fields::TensorExpr::Constant(DMatrix::zeros(n, n))),
                b: self.h.clone(),
                t: c,
            }),
            phi: Arc::new(crate::fields::ScalarCombination {
                a: Arc::new(ScalarExpr::Constant(0.0)),
                b: self.phi.clone(),
                t: c,
            }),
            support: self.support.clone(),
        }
    }
}

/// `count` compactly supported terms with seeded random centres, radii,
/// tensors, weights and tilts; all supports lie in `B_{spread + 2}(around)`.
pub fn random_perturbation_doc(seed: u64, n: usize, around: &[f64], spread: f64) -> PerturbationDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=3);
    let terms = (0..count)
        .map(|_| {
            let center: Vec<f64> = around.iter().map(|c| c + rng.gen_range(-spread..=spread) / (n as f64).sqrt()).collect();
            let mut tensor = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i..n {
                    let v = rng.gen_range(-0.2..0.2);
                    tensor[i][j] = v;
                    tensor[j][i] = v;
                }
            }
            PerturbationTerm {
                center,
                radius: rng.gen_range(0.8..2.0),
                tensor,
                phi: rng.gen_range(-0.3..0.3),
                tilt: Some((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()),
            }
        })
        .collect();
    PerturbationDoc { terms }
}

/// `T[a][b][(i, j)] = ∇_a ∇_b h_ij` and `D[b][(i, j)] = ∇_b h_ij`.
fn covariant_derivatives(geo: &GeometryJet, h: &Jet2Metric) -> (Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>) {
    let n = geo.n;
    let gam = &geo.gamma;
    let dgam = &geo.dgamma;
    let d: Vec<DMatrix<f64>> = (0..n)
        .map(|b| {
            DMatrix::from_fn(n, n, |i, j| {
                let mut s = h.d1[b][(i, j)];
                for k in 0..n {
                    s -= gam[k][(b, i)] * h.value[(k, j)] + gam[k][(b, j)] * h.value[(i, k)];
                }
                s
            })
        })
        .collect();
    let t = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    DMatrix::from_fn(n, n, |i, j| {
                        // ∂_a D_bij
                        let mut s = h.d2(a, b)[(i, j)];
                        for k in 0..n {
                            s -= dgam[a][k][(b, i)] * h.value[(k, j)]
                                + gam[k][(b, i)] * h.d1[a][(k, j)]
                                + dgam[a][k][(b, j)] * h.value[(i, k)]
                                + gam[k][(b, j)] * h.d1[a][(i, k)];
                        }
                        for k in 0..n {
                            s -= gam[k][(a, b)] * d[k][(i, j)]
                                + gam[k][(a, i)] * d[b][(k, j)]
                                + gam[k][(a, j)] * d[b][(i, k)];
                        }
                        s
                    })
                })
                .collect()
        })
        .collect();
    (d, t)
}

/// Coefficient of `e^{-f} dV_g` in `DΦ_(g,f)(h, φ)` from jets.
pub fn dphi_jets(geo: &GeometryJet, h: &Jet2Metric, phi: &Jet2Scalar) -> f64 {
    let n = geo.n;
    let nf = n as f64;
    let gi = &geo.inv_metric;
    let (d, t) = covariant_derivatives(geo, h);
    let mut divdiv = 0.0;
    let mut lap_tr = 0.0;
    for a in 0..n {
        for b in 0..n {
            for i in 0..n {
                for j in 0..n {
                    divdiv += gi[(i, a)] * gi[(j, b)] * t[a][b][(i, j)];
                    lap_tr += gi[(a, b)] * gi[(i, j)] * t[a][b][(i, j)];
                }
            }
        }
    }
    // ∇^j h_ij - ½ ∇_i tr h, contracted with ∇^i f
    let mut mixed = 0.0;
    for i in 0..n {
        let mut div_i = 0.0;
        let mut dtr_i = 0.0;
        for j in 0..n {
            for b in 0..n {
                div_i += gi[(j, b)] * d[b][(i, j)];
            }
            for k in 0..n {
                dtr_i += gi[(j, k)] * d[i][(j, k)];
            }
        }
        mixed += (div_i - 0.5 * dtr_i) * geo.grad_f[i];
    }
    let c = (nf - 2.0) / (nf - 1.0);
    let bracket = geo.raise_both(&geo.ric) + geo.raise_both(&geo.hess_f) * 2.0
        - (&geo.grad_f * geo.grad_f.transpose()) * c;
    let h_pair = h.value.component_mul(&bracket).sum();
    let phi_terms = 2.0 * geo.laplacian(phi) - 2.0 * c * geo.inner(&geo.df, &phi.grad);
    let tr_h = geo.trace(&h.value);
    (divdiv - lap_tr) - 2.0 * mixed - h_pair + phi_terms + geo.conf_scal * (0.5 * tr_h - phi.value)
}

pub fn dphi(spec: &WeightedManifoldSpec, pert: &Perturbation, p: &EndPoint) -> Result<f64> {
    let geo = geometry_at(spec, p)?;
    Ok(dphi_jets(&geo, &pert.h.jet(&p.x), &pert.phi.jet(&p.x)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Coefficients of `e^{-f} dV_g` (the maps `F_g^*`, `F_f^*`).
    #[default]
    Dedensitised,
    /// Coefficients of coordinate Lebesgue measure (`× e^{-f} √det g`).
    Densitised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointValue {
    /// `F_g^*(V)^{ij}` (contravariant).
    pub fg: DMatrix<f64>,
    pub ff: f64,
    pub density: Density,
}

/// The two blocks of `DΦ^*_(g,f)(V)`.
pub fn adjoint_jets(geo: &GeometryJet, v: &Jet2Scalar, density: Density) -> AdjointValue {
    let n = geo.n as f64;
    let gi = &geo.inv_metric;
    let hess_v = geo.raise_both(&geo.hessian(v));
    let lap_v = geo.laplacian(v);
    let dv_df = geo.inner(&v.grad, &geo.df);
    let grad_f = &geo.grad_f;
    let fg = &hess_v - gi * lap_v + gi * dv_df
        - (geo.raise_both(&geo.ric) + geo.raise_both(&geo.hess_f) + grad_f * grad_f.transpose() / (n - 1.0))
            * v.value
        + gi * (0.5 * v.value * geo.conf_scal);
    let ff = 2.0 * lap_v - 2.0 * n / (n - 1.0) * dv_df - 2.0 / (n - 1.0) * v.value * geo.lap_f
        + 2.0 / (n - 1.0) * v.value * geo.gradnorm2_f
        - v.value * geo.conf_scal;
    let scale = match density {
        Density::Dedensitised => 1.0,
        Density::Densitised => (-geo.f).exp() * geo.metric.determinant().sqrt(),
    };
    AdjointValue {
        fg: crate::jet::symmetrise(&fg) * scale,
        ff: ff * scale,
        density,
    }
}

pub fn adjoint(spec: &WeightedManifoldSpec, v: &dyn ScalarField, p: &EndPoint, density: Density) -> Result<AdjointValue> {
    let geo = geometry_at(spec, p)?;
    Ok(adjoint_jets(&geo, &v.jet(&p.x), density))
}

/// `tr_g F_g^*(V) + (n-1)/2 F_f^*(V) + ½ V S_f`.
pub fn trace_identity_residual(spec: &WeightedManifoldSpec, v: &dyn ScalarField, p: &EndPoint) -> Result<f64> {
    let geo = geometry_at(spec, p)?;
    let vj = v.jet(&p.x);
    let adj = adjoint_jets(&geo, &vj, Density::Dedensitised);
    let n = geo.n as f64;
    let tr = geo.metric.component_mul(&adj.fg).sum();
    Ok(tr + 0.5 * (n - 1.0) * adj.ff + 0.5 * vj.value * geo.conf_scal)
}

fn require_flat_background(spec: &WeightedManifoldSpec, p: &EndPoint) -> Result<()> {
    let g = spec.eval_metric(p)?;
    let f = spec.eval_weight(p)?;
    let n = spec.n;
    let flat = g.max_abs_diff(&Jet2Metric::identity(n)) == 0.0 && f.max_abs_diff(&Jet2Scalar::zero(n)) == 0.0;
    if flat {
        Ok(())
    } else {
        Err(Error::PreconditionFailed("Michel identity is checked on the flat background with f = 0".into()))
    }
}

/// `V DΦ(h, φ) - ⟨(h, φ), DΦ^*(V)⟩ - div U(V, h, φ)` on the flat background.
pub fn michel_pointwise_residual(
    spec0: &WeightedManifoldSpec,
    pert: &Perturbation,
    v: &dyn ScalarField,
    p: &EndPoint,
) -> Result<f64> {
    require_flat_background(spec0, p)?;
    let geo = geometry_at(spec0, p)?;
    let (vj, hj, pj) = (v.jet(&p.x), pert.h.jet(&p.x), pert.phi.jet(&p.x));
    let adj = adjoint_jets(&geo, &vj, Density::Dedensitised);
    let lhs = vj.value * dphi_jets(&geo, &hj, &pj) - hj.value.component_mul(&adj.fg).sum() - pj.value * adj.ff;
    Ok(lhs - div_flux_u_jets(&vj, &hj, &pj))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IntegralCheck {
    pub flux: f64,
    pub volume: f64,
    pub residual: f64,
}

/// `∮_{∂B_R(c)} U·ν` against `∫_{B_R(c)} (V DΦ - ⟨(h, φ), DΦ^*V⟩)` on the flat background.
pub fn michel_integral_form(
    spec0: &WeightedManifoldSpec,
    pert: &Perturbation,
    v: &dyn ScalarField,
    center: &[f64],
    radius: f64,
    q: usize,
) -> Result<IntegralCheck> {
    let n = spec0.n;
    require_flat_background(spec0, &EndPoint::new(center.iter().map(|c| c + radius).collect()))?;
    let shell = SphereShell::new(n, radius, q);
    let flux = shell.integrate(|y, nu| {
        let x: Vec<f64> = y.iter().zip(center).map(|(a, b)| a + b).collect();
        let u = flux_u_jets(&v.jet(&x), &pert.h.jet(&x), &pert.phi.jet(&x));
        Ok(u.iter().zip(nu).map(|(a, b)| a * b).sum())
    })?;
    let ball = BallRule::new(center, radius, 2 * q, q);
    let volume = ball.integrate(|x| {
        let p = EndPoint::new(x.to_vec());
        let geo = geometry_at(spec0, &p)?;
        let (vj, hj, pj) = (v.jet(x), pert.h.jet(x), pert.phi.jet(x));
        let adj = adjoint_jets(&geo, &vj, Density::Dedensitised);
        Ok(vj.value * dphi_jets(&geo, &hj, &pj) - hj.value.component_mul(&adj.fg).sum() - pj.value * adj.ff)
    })?;
    Ok(IntegralCheck {
        flux,
        volume,
        residual: flux - volume,
    })
}

/// `∫ V DΦ(h,φ) e^{-f}dV_g` against `∫ (⟨h, F_g^*V⟩ + φ F_f^*V) e^{-f}dV_g` over the support ball.
pub fn adjoint_duality(
    spec: &WeightedManifoldSpec,
    pert: &Perturbation,
    v: &dyn ScalarField,
    q: usize,
) -> Result<IntegralCheck> {
    let (center, radius) = pert
        .support
        .clone()
        .ok_or_else(|| Error::PreconditionFailed("duality check needs a compactly supported perturbation".into()))?;
    let ball = BallRule::new(&center, radius, 2 * q, q);
    let both: Vec<(f64, f64)> = ball
        .nodes
        .par_iter()
        .map(|x| {
            let p = EndPoint::new(x.clone());
            let geo = geometry_at(spec, &p)?;
            let (vj, hj, pj) = (v.jet(x), pert.h.jet(x), pert.phi.jet(x));
            let dens = (-geo.f).exp() * geo.metric.determinant().sqrt();
            let adj = adjoint_jets(&geo, &vj, Density::Dedensitised);
            let lhs = vj.value * dphi_jets(&geo, &hj, &pj) * dens;
            let rhs = (hj.value.component_mul(&adj.fg).sum() + pj.value * adj.ff) * dens;
            Ok((lhs, rhs))
        })
        .collect::<Result<_>>()?;
    let lhs: f64 = both.iter().zip(&ball.weights).map(|((a, _), w)| a * w).sum();
    let rhs: f64 = both.iter().zip(&ball.weights).map(|((_, b), w)| b * w).sum();
    Ok(IntegralCheck {
        flux: rhs,
        volume: lhs,
        residual: lhs - rhs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalStaticResiduals {
    /// `Δ̃u - e^{f/(n-1)} (½ F_f^* + ½ V S_f)`.
    pub lap: f64,
    /// `∇̃²u - u R̃ic - e^{-f/(n-1)} (F_g^* + ½ F_f^* g)` (lower indices).
    pub hessric: DMatrix<f64>,
}

impl ConformalStaticResiduals {
    pub fn max_abs(&self) -> f64 {
        self.lap.abs().max(self.hessric.amax())
    }
}

pub fn conformal_static_residuals(spec: &WeightedManifoldSpec, v: Arc<dyn ScalarField>, p: &EndPoint) -> Result<ConformalStaticResiduals> {
    let n = spec.n as f64;
    let base = geometry_at(spec, p)?;
    let vj = v.jet(&p.x);
    let adj = adjoint_jets(&base, &vj, Density::Dedensitised);
    let tilde = geometry_at(&conformal_spec(spec).tilde, p)?;
    let u = potential_transform(v, spec).jet(&p.x);
    let lap = tilde.laplacian(&u) - (base.f / (n - 1.0)).exp() * 0.5 * (adj.ff + vj.value * base.conf_scal);
    let fg_lower = &base.metric * &adj.fg * &base.metric;
    let hessric = tilde.hessian(&u) - &tilde.ric * u.value
        - (fg_lower + &base.metric * (0.5 * adj.ff)) * (-base.f / (n - 1.0)).exp();
    Ok(ConformalStaticResiduals { lap, hessric })
}

/// `|T|_g = (T^{ij} T^{kl} g_ik g_jl)^{1/2}` for contravariant `T`.
fn g_norm_upper(g: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    let lowered = g * t * g;
    t.component_mul(&lowered).sum().abs().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticCertificate {
    pub fg_sup: f64,
    pub ff_sup: f64,
    pub sf_sup: f64,
    pub points: usize,
    pub certified: bool,
    pub threshold: f64,
}

pub const STATIC_THRESHOLD: f64 = 1e-6;

fn grid_points(spec: &WeightedManifoldSpec, grid: &ProbeGrid) -> Vec<EndPoint> {
    grid.points(spec.n)
        .into_iter()
        .map(EndPoint::new)
        .filter(|p| spec.check_point(p).is_ok())
        .collect()
}

/// Sup norms of `F_g^*(V)` (in `|·|_g`) and `F_f^*(V)` over the grid.
pub fn f_static_residual(spec: &WeightedManifoldSpec, v: &dyn ScalarField, grid: &ProbeGrid) -> Result<(f64, f64)> {
    let vals = grid_points(spec, grid)
        .par_iter()
        .map(|p| {
            let geo = geometry_at(spec, p)?;
            let adj = adjoint_jets(&geo, &v.jet(&p.x), Density::Dedensitised);
            Ok((g_norm_upper(&geo.metric, &adj.fg), adj.ff.abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (f64::max(a, x), f64::max(b, y))))
}

/// Sup of `|S_f|` over the grid.
pub fn s_f_vanishing_check(spec: &WeightedManifoldSpec, grid: &ProbeGrid) -> Result<f64> {
    let vals = grid_points(spec, grid)
        .par_iter()
        .map(|p| Ok(geometry_at(spec, p)?.conf_scal.abs()))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}

pub fn static_certificate(spec: &WeightedManifoldSpec, v: &dyn ScalarField, grid: &ProbeGrid) -> Result<StaticCertificate> {
    let (fg_sup, ff_sup) = f_static_residual(spec, v, grid)?;
    let sf_sup = s_f_vanishing_check(spec, grid)?;
    Ok(StaticCertificate {
        fg_sup,
        ff_sup,
        sf_sup,
        points: grid_points(spec, grid).len(),
        certified: fg_sup < STATIC_THRESHOLD && ff_sup < STATIC_THRESHOLD,
        threshold: STATIC_THRESHOLD,
    })
}

/// Catalogue of test potentials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialId {
    One,
    /// `x^{a+1}` (ids `x1`, `x2`, ...).
    Coordinate(usize),
    /// `|x|²`.
    R2,
    /// `r^{2-n}`.
    InverseR,
    /// `exp(-|x|²/8)`.
    Gaussian,
    /// `e^{f/(n-1)} u_m` with the family's mass parameter (`m = 0` if none).
    Static,
}

impl FromStr for PotentialId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "one" | "1" => Self::One,
            "r2" => Self::R2,
            "inverse_r" => Self::InverseR,
            "gaussian" => Self::Gaussian,
            "static" => Self::Static,
            _ => match s.strip_prefix('x').and_then(|a| a.parse::<usize>().ok()) {
                Some(a) if a >= 1 => Self::Coordinate(a - 1),
                _ => return Err(Error::Config(format!("unknown potential `{s}`"))),
            },
        })
    }
}

/// The five-element catalogue used for identity sweeps.
pub const IDENTITY_POTENTIALS: [PotentialId; 5] = [
    PotentialId::One,
    PotentialId::Coordinate(0),
    PotentialId::R2,
    PotentialId::InverseR,
    PotentialId::Gaussian,
];

pub fn potential_field(id: PotentialId, spec: &WeightedManifoldSpec) -> Result<Arc<dyn ScalarField>> {
    let n = spec.n;
    let nf = n as f64;
    Ok(match id {
        PotentialId::One => Arc::new(ScalarExpr::Constant(1.0)),
        PotentialId::Coordinate(a) => {
            if a >= n {
                return Err(Error::Config(format!("potential x{} needs n >= {}", a + 1, a + 1)));
            }
            let mut w = vec![0.0; n];
            w[a] = 1.0;
            Arc::new(ScalarExpr::Linear(w))
        }
        PotentialId::R2 => Arc::new(ScalarExpr::RadiusSquared),
        PotentialId::InverseR => Arc::new(ScalarExpr::inverse_power(1.0, nf - 2.0)),
        PotentialId::Gaussian => Arc::new(ScalarExpr::RadiusSquared.exp_of(-1.0 / 8.0)),
        PotentialId::Static => {
            let m = spec.mass_parameter.unwrap_or(0.0);
            let top = ScalarExpr::InversePowers {
                c0: 1.0,
                terms: vec![(nf - 2.0, -m / 2.0)],
            };
            let bottom = ScalarExpr::InversePowers {
                c0: 1.0,
                terms: vec![(nf - 2.0, m / 2.0)],
            };
            let mut um = top.times(bottom.pow(-1.0));
            if let Some(c) = spec.doc.as_ref().and_then(|d| d.params.center.clone()) {
                um = um.translated(c);
            }
            Arc::new(ExpWeightedScalar {
                base: Arc::new(um),
                weight: spec.weight.clone(),
                c: 1.0 / (nf - 1.0),
            })
        }
    })
}

/// `(g + t h, f + t φ)` as jets, for directional-derivative oracles.
pub fn perturbed_jets(spec: &WeightedManifoldSpec, pert: &Perturbation, p: &EndPoint, t: f64) -> Result<(Jet2Metric, Jet2Scalar)> {
    let g = spec.eval_metric(p)?;
    let f = spec.eval_weight(p)?;
    Ok((&g + &pert.h.jet(&p.x).scale(t), &f + &pert.phi.jet(&p.x).scale(t)))
}

/// Central difference `d/dt S_{f+tφ}(g+th) e^{-tφ} √det(g+th)/√det g` at `t = 0`.
pub fn dphi_fd(spec: &WeightedManifoldSpec, pert: &Perturbation, p: &EndPoint, t: f64) -> Result<f64> {
    let val = |s: f64| -> Result<f64> {
        let (g, f) = perturbed_jets(spec, pert, p, s)?;
        let geo = geometry_from_jets(&g, &f);
        Ok(geo.conf_scal * (-f.value).exp() * g.value.determinant().sqrt())
    };
    let g0 = spec.eval_metric(p)?;
    let f0 = spec.eval_weight(p)?;
    let dens = (-f0.value).exp() * g0.value.determinant().sqrt();
    Ok((val(t)? - val(-t)?) / (2.0 * t) / dens)
}
