mod common;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{golden, rel};
use perfhom::geometry::{Everywhere, HoleShape, Nowhere, PerforationField, Point};
use perfhom::grid::{classify_nodes, CartesianGrid, Classification};
use perfhom::homogenize::{build_domain, MacroProblem, Rect, SourceTerm};
use perfhom::poincare::{
    certify, check_box_constant, eps_scaling_study, rayleigh_min, Constraint, PoincareError, EIGEN_TOL,
};

fn inscribed_square(r: f64, scale: f64) -> Rect {
    let half = scale * r / std::f64::consts::SQRT_2;
    Rect::new(0.5 - half, 0.5 - half, 0.5 + half, 0.5 + half)
}

#[test]
fn dirichlet_square_eigenvalue() {
    let cls = Classification::all_fluid(CartesianGrid::unit_square(256).unwrap());
    let r = rayleigh_min(&cls, Constraint::Outer).unwrap();
    assert!(rel(r.lambda_min, 2.0 * PI * PI) < 5e-3, "{}", r.lambda_min);
    assert!(r.residual <= EIGEN_TOL);
    assert!((r.poincare_constant * r.lambda_min - 1.0).abs() < 1e-14);
}

#[test]
fn perforated_cell_eigenvalue_matches_reference() {
    let field = PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25));
    let cls = classify_nodes(&CartesianGrid::periodic_cell(128).unwrap(), &field.periodic_region()).unwrap();
    let r = rayleigh_min(&cls, Constraint::Holes).unwrap();
    assert!(rel(r.lambda_min, golden("cell_lambda")) < 1e-2, "{}", r.lambda_min);
    // Single-signed ground state.
    let max = r.eigenvector.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sign = r.eigenvector.iter().copied().sum::<f64>().signum();
    assert!(r.eigenvector.iter().all(|v| v * sign >= -1e-6 * max));
}

#[test]
fn fully_constrained_has_no_free_nodes() {
    let cls = classify_nodes(&CartesianGrid::unit_square(16).unwrap(), &Everywhere).unwrap();
    assert!(matches!(
        rayleigh_min(&cls, Constraint::HolesAndOuter),
        Err(PoincareError::NoFreeNodes)
    ));
}

#[test]
fn box_constant_examples() {
    let disk = HoleShape::disk(Point::new(0.5, 0.5), 0.3);
    let full = check_box_constant(&disk, inscribed_square(0.3, 1.0), 128).unwrap();
    assert!((full.bound - 2.0 / 0.18).abs() < 1e-12);
    assert!(full.pass, "{full:?}");
    let half = check_box_constant(&disk, inscribed_square(0.3, 0.5), 128).unwrap();
    assert!((half.bound - 4.0 * full.bound).abs() < 1e-9);
    assert!(half.pass);
    assert_eq!(half.measured, full.measured);
    let all = check_box_constant(&Everywhere, Rect::unit(), 32).unwrap();
    assert_eq!(all.measured, 0.0);
    assert!(all.pass);
}

#[test]
fn larger_holes_lower_the_constant() {
    let problem = MacroProblem::unit(SourceTerm::Constant(0.0), 4).unwrap();
    let base = HoleShape::disk(Point::new(0.5, 0.5), 0.25);
    let mut constants = Vec::new();
    for shape in [base.with_radii_offset(-0.05), base, base.with_radii_offset(0.05)] {
        let d = build_domain(&problem, &PerforationField::periodic(shape), 32).unwrap();
        constants.push(
            rayleigh_min(&d.cls, Constraint::HolesAndOuter)
                .unwrap()
                .poincare_constant,
        );
    }
    assert!(
        constants[0] > constants[1] && constants[1] > constants[2],
        "{constants:?}"
    );
}

#[test]
fn rayleigh_certificate_on_perforated_domain() {
    let problem = MacroProblem::unit(SourceTerm::Constant(0.0), 4).unwrap();
    let d = build_domain(&problem, &PerforationField::golden(), 32).unwrap();
    let r = rayleigh_min(&d.cls, Constraint::HolesAndOuter).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let worst = certify(&d.cls, Constraint::HolesAndOuter, &r, 100, &mut rng);
    assert!(worst <= 1.0 + 1e-9, "{worst}");
}

#[test]
fn scaling_study_flags_missing_perforation() {
    let r = eps_scaling_study(&Nowhere, Rect::unit(), Point::new(0.5, 0.5), &[2, 4], 16, 1).unwrap();
    assert!(!r.perforated);
    assert!(!r.pass());
    assert!(r.to_csv().contains("# SKIP"));
    // Without holes the constant is Ω's own, so C_ε grows like ε^-2.
    assert!(r.rows[1].c_eps > 3.0 * r.rows[0].c_eps);
}

#[test]
fn scaling_study_on_periodic_holes() {
    let field = PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25));
    let r = eps_scaling_study(&field, Rect::unit(), Point::new(0.5, 0.5), &[2, 4, 8], 16, 2).unwrap();
    assert!(r.perforated);
    assert!(r.pass(), "{}", r.to_csv());
    let again = eps_scaling_study(&field, Rect::unit(), Point::new(0.5, 0.5), &[8, 4, 2], 16, 1).unwrap();
    assert_eq!(r.to_csv(), again.to_csv());
    assert!(matches!(
        eps_scaling_study(&field, Rect::unit(), Point::new(0.5, 0.5), &[2], 8, 1),
        Err(PoincareError::Homogenize(_))
    ));
}
