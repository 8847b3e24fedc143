//! Coordinate spheres in a weighted manifold: mean curvature, weighted area,
//! f-minimal spheres, Hawking masses and the Penrose ratio.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conformal::conformal_spec;
use crate::curvature::geometry_at;
use crate::error::{Error, Result};
use crate::family::{FamilyDoc, FamilyKind, WeightProfile, WeightedManifoldSpec};
use crate::fields::EndPoint;
use crate::mass::{weighted_mass, MassOptions, MassReport};
use crate::quadrature::{ProbeGrid, SphereShell};

/// The coordinate sphere `{|x| = ρ}`.
#[derive(Clone, Debug)]
pub struct RadialSurface {
    pub rho: f64,
    pub shell: SphereShell,
}

impl RadialSurface {
    pub fn new(n: usize, rho: f64, q: usize) -> Self {
        Self {
            rho,
            shell: SphereShell::new(n, rho, q),
        }
    }
}

/// Pointwise data of a coordinate sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeGeometry {
    /// Mean curvature (divergence of the outward `g`-unit normal).
    pub h: f64,
    /// `H - ∂_ν f`.
    pub h_f: f64,
    pub dnu_f: f64,
    pub f: f64,
    /// `dA_g / dA_δ`.
    pub area_density: f64,
}

pub fn node_geometry(spec: &WeightedManifoldSpec, surface: &RadialSurface, p: &EndPoint) -> Result<NodeGeometry> {
    debug_assert!((p.r() - surface.rho).abs() <= 1e-9 * surface.rho.max(1.0));
    let n = spec.n;
    let g = spec.eval_metric(p)?;
    let f = spec.eval_weight(p)?;
    let r = p.r();
    let ginv = g.value.clone().try_inverse().ok_or_else(|| Error::NotPositiveDefinite { point: p.x.clone() })?;
    let w = DVector::from_iterator(n, p.x.iter().map(|v| v / r));
    let a = &ginv * &w;
    let lam2 = w.dot(&a);
    let lam = lam2.sqrt();
    let mut div_a = (ginv.trace() - lam2) / r;
    let mut dlam = DVector::zeros(n);
    let mut contracted_gamma = DVector::zeros(n);
    for i in 0..n {
        let dginv = -(&ginv * &g.d1[i] * &ginv);
        div_a += (dginv.row(i) * &w)[(0, 0)];
        dlam[i] = (w.dot(&(&dginv * &w)) + 2.0 * (a[i] - w[i] * w.dot(&a)) / r) / (2.0 * lam);
        // Γ^k_{ki} = ½ tr(g^{-1} ∂_i g)
        contracted_gamma[i] = 0.5 * ginv.component_mul(&g.d1[i]).sum();
    }
    let normal = &a / lam;
    let h = div_a / lam - a.dot(&dlam) / lam2 + contracted_gamma.dot(&normal);
    let dnu_f = normal.dot(&f.grad);
    Ok(NodeGeometry {
        h,
        h_f: h - dnu_f,
        dnu_f,
        f: f.value,
        area_density: g.value.determinant().sqrt() * lam,
    })
}

pub fn mean_curvature(spec: &WeightedManifoldSpec, surface: &RadialSurface, p: &EndPoint) -> Result<f64> {
    Ok(node_geometry(spec, surface, p)?.h)
}

pub fn weighted_mean_curvature(spec: &WeightedManifoldSpec, surface: &RadialSurface, p: &EndPoint) -> Result<f64> {
    Ok(node_geometry(spec, surface, p)?.h_f)
}

fn integrate_nodes<F>(spec: &WeightedManifoldSpec, surface: &RadialSurface, integrand: F) -> Result<f64>
where
    F: Fn(&NodeGeometry) -> f64 + Sync,
{
    surface.shell.integrate(|x, _| {
        let geo = node_geometry(spec, surface, &EndPoint::new(x.to_vec()))?;
        Ok(integrand(&geo))
    })
}

/// `∫ dA_g`.
pub fn area(spec: &WeightedManifoldSpec, surface: &RadialSurface) -> Result<f64> {
    integrate_nodes(spec, surface, |g| g.area_density)
}

/// `A_f = ∫ e^{-f} dA_g`.
pub fn weighted_area(spec: &WeightedManifoldSpec, surface: &RadialSurface) -> Result<f64> {
    integrate_nodes(spec, surface, |g| (-g.f).exp() * g.area_density)
}

/// `(A_f/16π)^{1/2} (1 - ∫ H_f² dA_g / 16π)`; unweighted `dA_g` in the Willmore term.
fn hawking_formula(a_f: f64, willmore: f64) -> f64 {
    (a_f / (16.0 * PI)).sqrt() * (1.0 - willmore / (16.0 * PI))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceReport {
    pub rho: f64,
    pub h_f_values: Vec<f64>,
    pub a_f: f64,
    pub a_g: f64,
    pub hawking_f: Option<f64>,
    pub penrose_rhs: f64,
}

pub fn surface_report(spec: &WeightedManifoldSpec, surface: &RadialSurface) -> Result<SurfaceReport> {
    let nodes = surface
        .shell
        .nodes
        .iter()
        .map(|x| node_geometry(spec, surface, &EndPoint::new(x.clone())))
        .collect::<Result<Vec<_>>>()?;
    let w = &surface.shell.weights;
    let a_g: f64 = nodes.iter().zip(w).map(|(g, w)| w * g.area_density).sum();
    let a_f: f64 = nodes.iter().zip(w).map(|(g, w)| w * (-g.f).exp() * g.area_density).sum();
    let willmore: f64 = nodes.iter().zip(w).map(|(g, w)| w * g.h_f * g.h_f * g.area_density).sum();
    Ok(SurfaceReport {
        rho: surface.rho,
        h_f_values: nodes.iter().map(|g| g.h_f).collect(),
        a_f,
        a_g,
        hawking_f: (spec.n == 3).then(|| hawking_formula(a_f, willmore)),
        penrose_rhs: penrose_rhs(spec.n, a_f),
    })
}

/// `½ (A_f / ω_{n-1})^{(n-2)/(n-1)}`.
pub fn penrose_rhs(n: usize, a_f: f64) -> f64 {
    let nf = n as f64;
    0.5 * (a_f / crate::quadrature::omega(n)).powf((nf - 2.0) / (nf - 1.0))
}

fn require_spherical(spec: &WeightedManifoldSpec) -> Result<()> {
    if spec.symmetry.spherical {
        Ok(())
    } else {
        Err(Error::NotSpherical)
    }
}

fn axis_point(n: usize, rho: f64) -> EndPoint {
    let mut x = vec![0.0; n];
    x[0] = rho;
    EndPoint::new(x)
}

/// `H_f` of the sphere of radius `ρ` in a spherically symmetric family.
pub fn radial_h_f(spec: &WeightedManifoldSpec, rho: f64) -> Result<f64> {
    let s = RadialSurface {
        rho,
        shell: SphereShell::new(spec.n, rho, 1),
    };
    Ok(node_geometry(spec, &s, &axis_point(spec.n, rho))?.h_f)
}

/// `A_f` of the sphere of radius `ρ` in a spherically symmetric family.
pub fn radial_weighted_area(spec: &WeightedManifoldSpec, rho: f64) -> Result<f64> {
    let s = RadialSurface {
        rho,
        shell: SphereShell::new(spec.n, rho, 1),
    };
    let g = node_geometry(spec, &s, &axis_point(spec.n, rho))?;
    Ok(crate::quadrature::omega(spec.n) * rho.powi(spec.n as i32 - 1) * (-g.f).exp() * g.area_density)
}

const SCAN_STEPS: usize = 400;

/// `|H_f| ≤ F_MINIMAL_TOL (n-1)/ρ` counts as f-minimal.
pub const F_MINIMAL_TOL: f64 = 1e-6;

/// Outermost zero of `ρ ↦ H_f(ρ)` in the bracket, scanning inward from its outer end.
/// Sign changes across a pole of `H_f` are skipped.
pub fn find_f_minimal_sphere(spec: &WeightedManifoldSpec, bracket: (f64, f64)) -> Result<f64> {
    require_spherical(spec)?;
    let (lo0, hi) = bracket;
    let lo = lo0.max(spec.excluded_radius());
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::NoSignChange { lo: lo0, hi });
    }
    let h = |r: f64| radial_h_f(spec, r);
    let is_zero = |v: f64| v.abs() < 1e-12;
    let ratio = (lo / hi).powf(1.0 / SCAN_STEPS as f64);
    let mut r_out = hi;
    let mut h_out = h(r_out)?;
    if is_zero(h_out) {
        return Ok(r_out);
    }
    for k in 1..=SCAN_STEPS {
        let r_in = if k == SCAN_STEPS { lo } else { hi * ratio.powi(k as i32) };
        let h_in = h(r_in)?;
        if !h_in.is_finite() {
            break;
        }
        if is_zero(h_in) {
            return Ok(r_in);
        }
        if h_in.signum() != h_out.signum() {
            let root = refine_root(&h, r_in, h_in, r_out, h_out)?;
            if h(root)?.abs() <= F_MINIMAL_TOL * (spec.n as f64 - 1.0) / root {
                return Ok(root);
            }
        }
        r_out = r_in;
        h_out = h_in;
    }
    Err(Error::NoSignChange { lo: lo0, hi })
}

/// Bisection to `1e-10`, then one secant step kept only if it stays inside.
fn refine_root<F>(h: &F, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    while b - a > 1e-10 {
        let mid = 0.5 * (a + b);
        let fm = h(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
            fb = fm;
        }
    }
    let secant = b - fb * (b - a) / (fb - fa);
    Ok(if secant.is_finite() && (a..=b).contains(&secant) {
        secant
    } else {
        0.5 * (a + b)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginSample {
    pub rho: f64,
    pub a_f: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OuterMinimisingReport {
    pub rho_star: f64,
    pub certified: bool,
    pub min_margin: f64,
    pub profile: Vec<MarginSample>,
}

const MARGIN_STEPS: usize = 400;

/// Sphere-competitor check: `A_f(ρ)` non-decreasing and `≥ A_f(ρ*)` for
/// `ρ* ≤ ρ ≤ max(20ρ*, 50)`.
pub fn check_f_outer_minimising(spec: &WeightedManifoldSpec, rho_star: f64) -> Result<OuterMinimisingReport> {
    require_spherical(spec)?;
    let outer = (20.0 * rho_star).max(50.0);
    let ratio = (outer / rho_star).powf(1.0 / MARGIN_STEPS as f64);
    let a_star = radial_weighted_area(spec, rho_star)?;
    let slack = 1e-10 * a_star;
    let mut profile = Vec::with_capacity(MARGIN_STEPS + 1);
    let mut monotone = true;
    let mut prev = a_star;
    for k in 0..=MARGIN_STEPS {
        let rho = rho_star * ratio.powi(k as i32);
        let a_f = if k == 0 { a_star } else { radial_weighted_area(spec, rho)? };
        if a_f < prev - slack {
            monotone = false;
        }
        prev = a_f;
        profile.push(MarginSample {
            rho,
            a_f,
            margin: a_f - a_star,
        });
    }
    let min_margin = profile.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min);
    Ok(OuterMinimisingReport {
        rho_star,
        certified: monotone && min_margin >= -slack,
        min_margin,
        profile,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HawkingMass {
    /// `m_{H,f}(Σ; g)`.
    pub weighted: f64,
    /// `m_H(Σ; g̃)`.
    pub tilde: f64,
}

pub fn weighted_hawking_mass(spec: &WeightedManifoldSpec, surface: &RadialSurface) -> Result<HawkingMass> {
    if spec.n != 3 {
        return Err(Error::WrongDimension {
            expected: "3".into(),
            got: spec.n,
        });
    }
    let weighted = surface_report(spec, surface)?.hawking_f.expect("n = 3");
    let tilde = surface_report(&conformal_spec(spec).tilde, surface)?
        .hawking_f
        .expect("n = 3");
    Ok(HawkingMass { weighted, tilde })
}

/// Smallest `S_f` over the probe grid.
pub fn sf_min_on_grid(spec: &WeightedManifoldSpec, grid: &ProbeGrid) -> Result<f64> {
    use rayon::prelude::*;
    let vals = grid
        .points(spec.n)
        .par_iter()
        .map(|x| Ok(geometry_at(spec, &EndPoint::new(x.clone()))?.conf_scal))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

/// Probe annulus used for `S_f ≥ 0` when none is configured.
pub fn default_sf_grid(rho_star: f64) -> ProbeGrid {
    ProbeGrid::annulus(rho_star, (20.0 * rho_star).max(50.0), 512)
}

/// Tolerance below which a negative `S_f` probe is treated as round-off.
pub const SF_NEGATIVE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PenroseOptions {
    pub mass: MassOptions,
    pub grid: Option<ProbeGrid>,
    pub q: Option<usize>,
}

impl PenroseOptions {
    fn order(&self, n: usize) -> usize {
        self.q.unwrap_or_else(|| self.mass.order(n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenroseReport {
    pub rho_star: f64,
    pub a_f: f64,
    pub m_f: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub h_f_at_rho_star: f64,
    pub certified_outer_minimising: bool,
    pub sf_min_on_grid: f64,
    pub mass: MassReport,
}

fn check_inequality_preconditions(
    spec: &WeightedManifoldSpec,
    rho_star: f64,
    grid: Option<&ProbeGrid>,
) -> Result<(OuterMinimisingReport, f64)> {
    let outer = check_f_outer_minimising(spec, rho_star)?;
    if !outer.certified {
        return Err(Error::PreconditionFailed(format!(
            "sphere rho = {rho_star} is not f-outer-minimising among spheres (margin {:.3e})",
            outer.min_margin
        )));
    }
    let grid = grid.cloned().unwrap_or_else(|| default_sf_grid(rho_star));
    let sf_min = sf_min_on_grid(spec, &grid)?;
    if sf_min < -SF_NEGATIVE_TOL {
        return Err(Error::PreconditionFailed(format!("S_f < 0 on the probe grid (min {sf_min:.3e})")));
    }
    Ok((outer, sf_min))
}

/// `m_f / [½ (A_f/ω)^{(n-2)/(n-1)}]` for an f-minimal, f-outer-minimising sphere.
pub fn penrose_ratio(spec: &WeightedManifoldSpec, rho_star: f64, opts: &PenroseOptions) -> Result<PenroseReport> {
    if !(3..=7).contains(&spec.n) {
        return Err(Error::WrongDimension {
            expected: "3..=7".into(),
            got: spec.n,
        });
    }
    require_spherical(spec)?;
    let h_f = radial_h_f(spec, rho_star)?;
    if h_f.abs() > F_MINIMAL_TOL * (spec.n as f64 - 1.0) / rho_star {
        return Err(Error::PreconditionFailed(format!(
            "sphere rho = {rho_star} is not f-minimal (H_f = {h_f:.3e})"
        )));
    }
    let (outer, sf_min) = check_inequality_preconditions(spec, rho_star, opts.grid.as_ref())?;
    let surface = RadialSurface::new(spec.n, rho_star, opts.order(spec.n));
    let a_f = weighted_area(spec, &surface)?;
    let mass = weighted_mass(spec, &opts.mass)?;
    let rhs = penrose_rhs(spec.n, a_f);
    Ok(PenroseReport {
        rho_star,
        a_f,
        m_f: mass.value,
        rhs,
        ratio: mass.value / rhs,
        h_f_at_rho_star: h_f,
        certified_outer_minimising: outer.certified,
        sf_min_on_grid: sf_min,
        mass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HawkingReport {
    pub rho: f64,
    pub m_h_f: f64,
    pub m_h_tilde: f64,
    pub m_f: f64,
    pub margin: f64,
    pub sf_min_on_grid: f64,
}

/// `m_f - m_{H,f}(Σ)` for an f-outer-minimising sphere.
pub fn hawking_vs_mass(spec: &WeightedManifoldSpec, rho: f64, opts: &PenroseOptions) -> Result<HawkingReport> {
    if spec.n != 3 {
        return Err(Error::WrongDimension {
            expected: "3".into(),
            got: spec.n,
        });
    }
    let (_, sf_min) = check_inequality_preconditions(spec, rho, opts.grid.as_ref())?;
    let surface = RadialSurface::new(3, rho, opts.order(3));
    let hm = weighted_hawking_mass(spec, &surface)?;
    let m_f = weighted_mass(spec, &opts.mass)?.value;
    Ok(HawkingReport {
        rho,
        m_h_f: hm.weighted,
        m_h_tilde: hm.tilde,
        m_f,
        margin: m_f - hm.weighted,
        sf_min_on_grid: sf_min,
    })
}

/// One randomly drawn spherically symmetric family that passed the admissibility filter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibleFamily {
    pub doc: FamilyDoc,
    pub rho_star: f64,
    pub sf_min: f64,
}

fn random_weight(rng: &mut ChaCha8Rng) -> WeightProfile {
    match rng.gen_range(0..4) {
        0 => WeightProfile::Zero,
        1 => WeightProfile::InverseR {
            a: rng.gen_range(-0.5..0.5),
            k: 1.0,
        },
        2 => WeightProfile::ExpDecay {
            a: rng.gen_range(-0.5..0.5),
            length: rng.gen_range(0.5..2.0),
        },
        _ => WeightProfile::Shell {
            radius: rng.gen_range(2.0..5.0),
            width: 1.0,
            amplitude: rng.gen_range(-0.3..0.3),
        },
    }
}

/// Draws one candidate: `u = 1 + c1/r + c2/r² + c3/r³` with `c1 > 0`, `c2, c3 < 0`
/// scaled as `c2 = -β c1²`, `c3 = -γ c1³` so a minimal sphere survives,
/// metric `u⁴δ` or `e^{f} u⁴δ`, and a random radial weight.
fn random_candidate(rng: &mut ChaCha8Rng) -> FamilyDoc {
    let c1: f64 = rng.gen_range(0.25..1.0);
    let coeffs = vec![
        c1,
        -rng.gen_range(0.001..0.04) * c1 * c1,
        -rng.gen_range(0.0001..0.005) * c1 * c1 * c1,
    ];
    let mut doc = FamilyDoc::new(FamilyKind::ConformallyFlat, 3)
        .with_coeffs(coeffs)
        .with_weight(random_weight(rng));
    doc.params.weight_in_metric = Some(rng.gen_bool(0.5));
    doc
}

fn admissible(doc: &FamilyDoc) -> Option<AdmissibleFamily> {
    let spec = doc.build().ok()?;
    let rho_star = find_f_minimal_sphere(&spec, (spec.excluded_radius(), 20.0)).ok()?;
    if rho_star <= spec.excluded_radius() * (1.0 + 1e-9) {
        return None;
    }
    if !check_f_outer_minimising(&spec, rho_star).ok()?.certified {
        return None;
    }
    let sf_min = sf_min_on_grid(&spec, &default_sf_grid(rho_star)).ok()?;
    (sf_min >= -SF_NEGATIVE_TOL).then(|| AdmissibleFamily {
        doc: doc.clone(),
        rho_star,
        sf_min,
    })
}

/// `count` admissible families (n = 3) drawn from a seeded generator.
pub fn random_admissible_families(seed: u64, count: usize) -> Vec<AdmissibleFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        if let Some(fam) = admissible(&random_candidate(&mut rng)) {
            out.push(fam);
        }
    }
    out
}
