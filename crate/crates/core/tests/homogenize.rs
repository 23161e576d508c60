mod common;

use std::f64::consts::PI;

use common::{golden, rel};
use perfhom::geometry::{HoleShape, Nowhere, PerforationField, Point};
use perfhom::homogenize::{
    build_domain, convergence_study, error_report, prepare_correctors, residual_diagnostic, solve_eps_problem,
    two_scale_approx, CorrectorChoice, Level, MacroProblem, SourceTerm, StudyPlan,
};

fn small_plan(field: PerforationField, source: SourceTerm) -> StudyPlan {
    StudyPlan {
        field,
        levels: vec![
            Level { eps_inv: 4, cells: 64 },
            Level { eps_inv: 8, cells: 64 },
            Level { eps_inv: 16, cells: 64 },
        ],
        window_radius: 3,
        ..StudyPlan::golden(source)
    }
}

fn plain() -> PerforationField {
    PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25))
}

#[test]
fn fluid_areas() {
    let p = MacroProblem::unit(SourceTerm::Constant(1.0), 4).unwrap();
    let exact = 1.0 - PI / 16.0;
    // The product weights carry an O(h) area error.
    let coarse = build_domain(&p, &plain(), 64).unwrap().fluid_area();
    let periodic = build_domain(&p, &plain(), 128).unwrap();
    let fine = periodic.fluid_area();
    assert!((fine - exact).abs() < 4e-3, "{fine}");
    assert!((fine - exact).abs() < 0.6 * (coarse - exact).abs(), "{coarse} {fine}");
    let defect = build_domain(&p, &PerforationField::golden(), 128).unwrap();
    let eps = p.eps();
    let gap = periodic.fluid_area() - defect.fluid_area();
    assert!(
        (gap - PI * (0.32f64.powi(2) - 0.0625) * eps * eps).abs() < 1e-4,
        "{gap}"
    );
    let empty = build_domain(&p, &Nowhere, 16).unwrap();
    assert!((empty.fluid_area() - 1.0).abs() < 1e-14);
}

#[test]
fn zero_source_and_maximum_principle() {
    let p = MacroProblem::unit(SourceTerm::Constant(0.0), 4).unwrap();
    let d = build_domain(&p, &PerforationField::golden(), 64).unwrap();
    let u = solve_eps_problem(&d, &SourceTerm::Constant(0.0)).unwrap().u;
    assert!(u.values().iter().all(|&v| v == 0.0));
    let f = SourceTerm::Constant(1.0);
    let u = solve_eps_problem(&d, &f).unwrap().u;
    assert!(u.min() >= -1e-12);
    // u_ε ≈ ε² w f with max w ≈ 0.083.
    assert!(u.max() < p.eps() * p.eps());
}

#[test]
fn small_golden_study() {
    let report = convergence_study(&small_plan(PerforationField::golden(), SourceTerm::default_bump())).unwrap();
    let rows = &report.rows;
    assert_eq!(rows.len(), 3);
    // ||g_ε|| approaches its limit like ε²: the ε w Δf part is orthogonal
    // to ∇w·∇f at leading order.
    let g: Vec<f64> = rows.iter().map(|r| r.g_eps_l2).collect();
    assert!(g[0] - g[2] > 3.0 * (g[1] - g[2]) && g[1] > g[2], "{g:?}");
    let h1 = report.slope("h1_err").unwrap();
    let l2 = report.slope("l2_err").unwrap();
    assert!((1.7..=2.5).contains(&h1), "{h1}");
    assert!((2.6..=3.5).contains(&l2), "{l2}");
}

#[test]
fn solution_norm_scales_like_eps_squared() {
    // Periodic holes; with the golden defect the pair (1/4, 1/8) is still
    // preasymptotic (ratio 3.35).
    let f = SourceTerm::default_bump();
    let norms: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&e| {
            let p = MacroProblem::unit(f, e).unwrap();
            let d = build_domain(&p, &plain(), 32).unwrap();
            solve_eps_problem(&d, &f).unwrap().u.norms().l2
        })
        .collect();
    for pair in norms.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((3.5..=4.5).contains(&ratio), "{norms:?}");
    }
}

#[test]
fn residual_source_is_bounded() {
    let f = SourceTerm::default_bump();
    let field = PerforationField::golden();
    let set = prepare_correctors(&field, 64, 3).unwrap();
    let g: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&e| {
            let p = MacroProblem::unit(f, e).unwrap();
            residual_diagnostic(&build_domain(&p, &field, 64).unwrap(), &f, &set.full).unwrap()
        })
        .collect();
    let (lo, hi) = g
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!((hi - lo) / hi < 0.25, "{g:?}");
    let zero = MacroProblem::unit(SourceTerm::Constant(0.0), 8).unwrap();
    let d = build_domain(&zero, &field, 64).unwrap();
    assert_eq!(
        residual_diagnostic(&d, &SourceTerm::Constant(0.0), &set.full).unwrap(),
        0.0
    );
}

#[test]
fn two_scale_approximation_scales_like_eps_squared() {
    let f = SourceTerm::default_bump();
    let set = prepare_correctors(&PerforationField::golden(), 64, 2).unwrap();
    let norm = |eps_inv: usize| {
        let p = MacroProblem::unit(f, eps_inv).unwrap();
        let d = build_domain(&p, &PerforationField::golden(), 64).unwrap();
        two_scale_approx(&d, &f, &set.full).unwrap().norms().l2
    };
    let ratio = norm(4) / norm(8);
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn periodic_field_makes_choices_coincide() {
    let mut plan = small_plan(plain(), SourceTerm::default_bump());
    plan.coupling = true;
    let full = convergence_study(&plan).unwrap();
    for row in &full.rows {
        assert_eq!(row.err, row.err_per);
        let (root, ratio) = row.coupling.unwrap();
        assert!(root > 0.0);
        assert!(ratio <= 1.0 + 1e-6, "{ratio}");
    }
    plan.choice = CorrectorChoice::PeriodicOnly;
    plan.coupling = false;
    let per = convergence_study(&plan).unwrap();
    assert_eq!(per.to_csv(), full.to_csv());
}

#[test]
fn golden_error_triple_at_eps_one_eighth() {
    let f = SourceTerm::default_bump();
    let field = PerforationField::golden();
    let set = prepare_correctors(&field, 128, 4).unwrap();
    let p = MacroProblem::unit(f, 8).unwrap();
    let d = build_domain(&p, &field, 128).unwrap();
    let u = solve_eps_problem(&d, &f).unwrap().u;
    let e = error_report(&u, &two_scale_approx(&d, &f, &set.full).unwrap(), &d).unwrap();
    assert!(rel(e.l2, golden("error_l2_eps8")) < 2e-2, "{e:?}");
    assert!(rel(e.h1, golden("error_h1_eps8")) < 2e-2, "{e:?}");
    assert!(rel(e.linf, golden("error_linf_eps8")) < 2e-2, "{e:?}");
}
