//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured quantity next to its tolerance.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use wmass_core::conformal::{check_conformal_scalar, conformal_spec};
use wmass_core::curvature::geometry_at;
use wmass_core::family::{FamilyDoc, FamilyKind, WeightProfile};
use wmass_core::fields::{FdStep, ScalarExpr, ScalarField};
use wmass_core::mass::{adm_mass, centre_of_mass, weighted_mass, MassOptions};
use wmass_core::quadrature::{halton_directions, radical_inverse};
use wmass_core::runner::default_grid;
use wmass_core::staticity::{
    conformal_static_residuals, michel_integral_form, michel_pointwise_residual, potential_field, random_perturbation_doc,
    static_certificate, trace_identity_residual, Perturbation, PotentialId, IDENTITY_POTENTIALS,
};
use wmass_core::surfaces::{
    find_f_minimal_sphere, hawking_vs_mass, penrose_ratio, random_admissible_families, weighted_hawking_mass,
    PenroseOptions, RadialSurface,
};
use wmass_core::{EndPoint, WeightedManifoldSpec};

/// Written straight to stdout so the line survives test-output capture.
fn report(criterion: u32, passed: bool, detail: String) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion:>2}: {tag}  {detail}").unwrap();
}

fn f_schwarzschild(n: usize, m: f64, w: WeightProfile) -> FamilyDoc {
    FamilyDoc::new(FamilyKind::FSchwarzschild, n).with_m(m).with_weight(w)
}

/// Built-in families used by the sweep criteria.
fn families() -> Vec<(&'static str, FamilyDoc)> {
    let mut cf_in_metric = FamilyDoc::new(FamilyKind::ConformallyFlat, 3)
        .with_coeffs(vec![0.8, -0.1])
        .with_weight(WeightProfile::ExpDecay { a: 0.6, length: 1.5 });
    cf_in_metric.params.weight_in_metric = Some(true);
    let mut sph = FamilyDoc::new(FamilyKind::SphericallySymmetric, 3)
        .with_weight(WeightProfile::InverseR { a: -0.4, k: 1.0 });
    sph.params.a_coeffs = Some(vec![0.9, 0.1]);
    sph.params.b_coeffs = Some(vec![0.5, -0.05]);
    vec![
        ("f-schwarzschild n=3", f_schwarzschild(3, 1.0, WeightProfile::InverseR { a: 0.5, k: 1.0 })),
        ("f-schwarzschild n=4", f_schwarzschild(4, 2.0, WeightProfile::ExpDecay { a: 0.7, length: 2.0 })),
        (
            "flat-with-weight",
            FamilyDoc::new(FamilyKind::FlatWithWeight, 3).with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 }),
        ),
        ("conformally-flat e^f u^4", cf_in_metric),
        ("spherically-symmetric", sph),
        (
            "schwarzschild n=5 bump weight",
            FamilyDoc::new(FamilyKind::FSchwarzschild, 5)
                .with_m(1.0)
                .with_weight(WeightProfile::Bump { center: None, radius: 4.0, amplitude: 0.6 }),
        ),
    ]
}

fn grid_points(spec: &WeightedManifoldSpec, count: usize, seed: u64) -> Vec<EndPoint> {
    default_grid(spec)
        .with_seed(seed)
        .points(spec.n)
        .into_iter()
        .take(count)
        .map(EndPoint::new)
        .filter(|p| spec.check_point(p).is_ok())
        .collect()
}

fn sup_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn criterion_1() -> bool {
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64);
    for m in [0.5, 1.0, 2.0] {
        let t = Instant::now();
        let spec = FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(m).build().unwrap();
        let r = adm_mass(&spec, &MassOptions::default()).unwrap();
        let rel = (r.value - m).abs() / m;
        let secs = t.elapsed().as_secs_f64();
        ok &= rel < 1e-4 && secs < 10.0 && r.converged;
        worst = (worst.0.max(rel), worst.1.max(secs));
    }
    report(1, ok, format!("ADM mass rel err {:.2e} < 1e-4, slowest {:.2}s < 10s", worst.0, worst.1));
    ok
}

fn criterion_2() -> bool {
    let mut worst = 0.0f64;
    for a in [0.5, 1.0] {
        let spec = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
            .with_weight(WeightProfile::InverseR { a, k: 1.0 })
            .build()
            .unwrap();
        let r = weighted_mass(&spec, &MassOptions::default()).unwrap();
        worst = worst.max((r.value + a / 2.0).abs());
    }
    let ok = worst < 1e-4;
    report(2, ok, format!("|m_f + a/2| = {worst:.2e} < 1e-4"));
    ok
}

fn criterion_3() -> bool {
    let opts = MassOptions::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (_, doc) in families() {
        let spec = doc.build().unwrap();
        let mf = weighted_mass(&spec, &opts).unwrap();
        let mt = adm_mass(&conformal_spec(&spec).tilde, &opts).unwrap();
        worst = worst.max((mf.value - mt.value).abs() / mf.value.abs().max(1.0));
        count += 1;
    }
    let ok = count >= 5 && worst < 1e-4;
    report(3, ok, format!("{count} families, max |m_f(g) - m(g~)|/max(1,|m|) = {worst:.2e} < 1e-4"));
    ok
}

fn criterion_4() -> bool {
    let mut analytic = 0.0f64;
    let mut fd = 0.0f64;
    let mut order = f64::INFINITY;
    for (_, doc) in families() {
        let spec = doc.build().unwrap();
        let pts = grid_points(&spec, 1000, 1);
        analytic = analytic.max(sup_abs(
            pts.par_iter().map(|p| check_conformal_scalar(&spec, p).unwrap()).collect::<Vec<_>>(),
        ));
        let fd_spec = spec.with_fd_jets(FdStep::Default);
        fd = fd.max(sup_abs(
            pts.par_iter().map(|p| check_conformal_scalar(&fd_spec, p).unwrap()).collect::<Vec<_>>(),
        ));
        // FD jets against analytic ones for the conformal scalar curvature
        let tilde = conformal_spec(&spec).tilde;
        let near: Vec<&EndPoint> = pts.iter().filter(|p| p.r() < 2.5 * default_grid(&spec).r_min).take(20).collect();
        let err = |h: f64| {
            let fd_tilde = conformal_spec(&spec.with_fd_jets(FdStep::Fixed(h))).tilde;
            sup_abs(near.iter().map(|p| {
                geometry_at(&fd_tilde, p).unwrap().scal - geometry_at(&tilde, p).unwrap().scal
            }))
        };
        let tilde_fd = conformal_spec(&fd_spec).tilde;
        fd = fd.max(sup_abs(near.iter().map(|p| {
            geometry_at(&tilde_fd, p).unwrap().scal - geometry_at(&tilde, p).unwrap().scal
        })));
        let (e1, e2) = (err(4e-3), err(2e-3));
        if e2 > 1e-13 {
            order = order.min((e1 / e2).log2());
        }
    }
    let ok = analytic < 1e-8 && fd < 1e-5 && order >= 1.8;
    report(
        4,
        ok,
        format!("analytic sup {analytic:.2e} < 1e-8, FD sup {fd:.2e} < 1e-5, observed order {order:.2} >= 1.8"),
    );
    ok
}

fn criterion_5() -> bool {
    let flat = FamilyDoc::new(FamilyKind::Flat, 3).build().unwrap();
    let vs: Vec<Arc<dyn ScalarField>> = ["one", "x1", "x2", "x3"]
        .iter()
        .map(|s| potential_field(s.parse().unwrap(), &flat).unwrap())
        .collect();
    let pointwise = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let pert = Perturbation::from_doc(&random_perturbation_doc(seed, 3, &[0.0; 3], 1.0), 3).unwrap();
            let (c, r) = pert.support.clone().unwrap();
            let mut worst = 0.0f64;
            for (i, d) in halton_directions(3, 10, seed).into_iter().enumerate() {
                let s = r * radical_inverse(i as u64 + 1, 5);
                let x: Vec<f64> = c.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                for v in &vs {
                    let res = michel_pointwise_residual(&flat, &pert, v.as_ref(), &EndPoint::new(x.clone())).unwrap();
                    worst = worst.max(res.abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    let mut integral = 0.0f64;
    for seed in 0..4u64 {
        let pert = Perturbation::from_doc(&random_perturbation_doc(seed, 3, &[0.0; 3], 1.0), 3).unwrap();
        let (c, r) = pert.support.clone().unwrap();
        for v in &vs {
            for radius in [r + 0.5, 0.6 * r] {
                let chk = michel_integral_form(&flat, &pert, v.as_ref(), &c, radius, 32).unwrap();
                integral = integral.max(chk.residual.abs() / chk.flux.abs().max(1.0));
            }
        }
    }
    let ok = pointwise < 1e-8 && integral < 1e-6;
    report(
        5,
        ok,
        format!("100 perturbations x 4 V: pointwise sup {pointwise:.2e} < 1e-8, flux vs volume {integral:.2e} < 1e-6"),
    );
    ok
}

fn criterion_6() -> bool {
    let mut worst = 0.0f64;
    let mut docs: Vec<FamilyDoc> = families().into_iter().map(|(_, d)| d).collect();
    docs.push(FamilyDoc::new(FamilyKind::Flat, 3));
    docs.push(FamilyDoc::new(FamilyKind::Schwarzschild, 4).with_m(1.0));
    for doc in docs {
        let spec = doc.build().unwrap();
        let pts = grid_points(&spec, 1000, 2);
        for id in IDENTITY_POTENTIALS {
            let v = potential_field(id, &spec).unwrap();
            let s = sup_abs(
                pts.par_iter()
                    .map(|p| trace_identity_residual(&spec, v.as_ref(), p).unwrap())
                    .collect::<Vec<_>>(),
            );
            worst = worst.max(s);
        }
    }
    let ok = worst < 1e-9;
    report(6, ok, format!("trace identity sup {worst:.2e} < 1e-9"));
    ok
}

fn criterion_7() -> bool {
    let spec = f_schwarzschild(3, 1.0, WeightProfile::Bump { center: None, radius: 5.0, amplitude: 0.7 })
        .build()
        .unwrap();
    let stat = potential_field(PotentialId::Static, &spec).unwrap();
    let mut cases: Vec<(WeightedManifoldSpec, Arc<dyn ScalarField>)> = vec![(spec, stat)];
    let nonstatic = [
        FamilyDoc::new(FamilyKind::FlatWithWeight, 3).with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 }),
        FamilyDoc::new(FamilyKind::ConformallyFlat, 4)
            .with_coeffs(vec![0.0, 0.6, 0.0, -0.1])
            .with_weight(WeightProfile::ExpDecay { a: 0.8, length: 1.5 }),
    ];
    for doc in nonstatic {
        let s = doc.build().unwrap();
        for v in [Arc::new(ScalarExpr::RadiusSquared.exp_of(-1.0 / 8.0)) as Arc<dyn ScalarField>, Arc::new(ScalarExpr::RadiusSquared)] {
            cases.push((s.clone(), v));
        }
    }
    let mut worst = 0.0f64;
    for (spec, v) in &cases {
        // relative to the size of the terms at large r for growing V
        let pts = grid_points(spec, 300, 3);
        let s = pts
            .par_iter()
            .map(|p| {
                let scale = v.value(&p.x).abs().max(1.0);
                conformal_static_residuals(spec, v.clone(), p).unwrap().max_abs() / scale
            })
            .reduce(|| 0.0, f64::max);
        worst = worst.max(s);
    }
    let ok = worst < 1e-7;
    report(7, ok, format!("conformal static identities sup {worst:.2e} < 1e-7 ({} cases)", cases.len()));
    ok
}

fn criterion_8() -> bool {
    let mut worst = 0.0f64;
    let mut all_certified = true;
    for n in [3, 5] {
        for m in [1.0, 2.0] {
            for w in [WeightProfile::InverseR { a: 0.5, k: 2.0 }, WeightProfile::ExpDecay { a: -0.6, length: 1.5 }] {
                let spec = f_schwarzschild(n, m, w).build().unwrap();
                let v = potential_field(PotentialId::Static, &spec).unwrap();
                let c = static_certificate(&spec, v.as_ref(), &default_grid(&spec)).unwrap();
                all_certified &= c.certified;
                worst = worst.max(c.fg_sup).max(c.ff_sup);
            }
        }
    }
    let fw = FamilyDoc::new(FamilyKind::FlatWithWeight, 3)
        .with_weight(WeightProfile::InverseR { a: 1.0, k: 1.0 })
        .build()
        .unwrap();
    let v = potential_field(PotentialId::Static, &fw).unwrap();
    let c = static_certificate(&fw, v.as_ref(), &default_grid(&fw)).unwrap();
    let ok = all_certified && worst < 1e-6 && !c.certified && c.sf_sup > 1e-6;
    report(
        8,
        ok,
        format!(
            "f-Schwarzschild sup residual {worst:.2e} < 1e-6; flat-with-weight rejected = {}, sup |S_f| = {:.2e}",
            !c.certified, c.sf_sup
        ),
    );
    ok
}

fn criterion_9_and_10() -> (bool, bool) {
    let opts = PenroseOptions::default();
    let mut eq_worst = 0.0f64;
    let mut hm_worst = 0.0f64;
    for n in [3, 5] {
        for m in [1.0, 2.0] {
            let spec = f_schwarzschild(n, m, WeightProfile::ExpDecay { a: 0.5, length: 1.0 }).build().unwrap();
            let rho = find_f_minimal_sphere(&spec, (0.1, 10.0)).unwrap();
            let rep = penrose_ratio(&spec, rho, &opts).unwrap();
            eq_worst = eq_worst.max((rep.ratio - 1.0).abs());
            if n == 3 {
                let hm = weighted_hawking_mass(&spec, &RadialSurface::new(3, rho, 12)).unwrap();
                hm_worst = hm_worst.max((hm.weighted - m).abs());
            }
        }
    }
    let fams = random_admissible_families(2024, 50);
    let results: Vec<(f64, f64)> = fams
        .par_iter()
        .map(|f| {
            let spec = f.doc.build().unwrap();
            let p = penrose_ratio(&spec, f.rho_star, &opts).unwrap();
            let h = hawking_vs_mass(&spec, f.rho_star, &opts).unwrap();
            (p.ratio, h.margin)
        })
        .collect();
    let min_ratio = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let min_margin = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let ok9 = eq_worst < 1e-3 && fams.len() >= 50 && min_ratio >= 1.0 - 1e-3;
    report(
        9,
        ok9,
        format!(
            "equality |ratio - 1| = {eq_worst:.2e} < 1e-3; {} random families, min ratio {min_ratio:.4} >= 0.999",
            fams.len()
        ),
    );

    // equivalence on 20 surfaces: five families, four radii each
    let mut equiv = 0.0f64;
    let mut surfaces = 0;
    for f in fams.iter().take(5) {
        let spec = f.doc.build().unwrap();
        for k in 0..4 {
            let s = RadialSurface::new(3, f.rho_star * 1.5f64.powi(k), 12);
            let hm = weighted_hawking_mass(&spec, &s).unwrap();
            equiv = equiv.max((hm.weighted - hm.tilde).abs());
            surfaces += 1;
        }
    }
    let ok10 = hm_worst < 1e-3 && surfaces >= 20 && equiv < 1e-6 && min_margin >= -1e-3;
    report(
        10,
        ok10,
        format!(
            "horizon |m_H,f - m| = {hm_worst:.2e} < 1e-3; {surfaces} surfaces |m_H,f - m_H(g~)| = {equiv:.2e} < 1e-6; min margin {min_margin:.2e} >= -1e-3"
        ),
    );
    (ok9, ok10)
}

fn criterion_11() -> bool {
    let opts = MassOptions::default();
    let cases = [
        FamilyDoc::new(FamilyKind::Schwarzschild, 3).with_m(1.0).with_center(vec![0.3, -0.5, 0.2]),
        f_schwarzschild(3, 2.0, WeightProfile::InverseR { a: 0.5, k: 1.0 }).with_center(vec![-0.4, 0.1, 0.7]),
        f_schwarzschild(4, 1.0, WeightProfile::ExpDecay { a: 0.4, length: 1.0 }).with_center(vec![0.2, 0.2, -0.3, 0.1]),
    ];
    let mut recover = 0.0f64;
    let mut equality = 0.0f64;
    for doc in cases {
        let spec = doc.build().unwrap();
        let c = doc.params.center.clone().unwrap();
        let cf = centre_of_mass(&spec, &opts, true).unwrap();
        let ct = centre_of_mass(&conformal_spec(&spec).tilde, &opts, false).unwrap();
        recover = recover.max(sup_abs(cf.value.iter().zip(&c).map(|(a, b)| a - b)));
        equality = equality.max(sup_abs(cf.value.iter().zip(&ct.value).map(|(a, b)| a - b)));
    }
    let ok = recover < 1e-3 && equality < 1e-3;
    report(11, ok, format!("translation error {recover:.2e} < 1e-3, c_f(g) - c(g~) = {equality:.2e} < 1e-3"));
    ok
}

#[test]
fn acceptance_criteria() {
    let start = Instant::now();
    let mut results = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    let (c9, c10) = criterion_9_and_10();
    results.push(c9);
    results.push(c10);
    results.push(criterion_11());
    let passed = results.iter().filter(|&&b| b).count();
    writeln!(
        std::io::stdout().lock(),
        "acceptance: {passed}/{} criteria pass in {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    )
    .unwrap();
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
