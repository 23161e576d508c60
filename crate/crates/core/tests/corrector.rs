mod common;

use std::sync::Arc;

use common::{golden, rel};
use perfhom::corrector::{
    build_initializer, solve_defect_corrector, solve_periodic_corrector, wellposedness_checks, CompositeCorrector,
    WellPosednessPlan,
};
use perfhom::geometry::{CellIndex, HoleShape, PerforationField, Point};
use perfhom::grid::read_field;

#[test]
fn periodic_maximum_matches_reference() {
    let per = solve_periodic_corrector(&PerforationField::golden().pattern, 128).unwrap();
    assert!(rel(per.max(), golden("periodic_max")) < 5e-3, "{}", per.max());
    assert!(per.residual_max <= 1e-8);
}

#[test]
fn golden_defect_matches_reference() {
    let field = PerforationField::golden();
    let per = solve_periodic_corrector(&field.pattern, 128).unwrap();
    let d = solve_defect_corrector(&field, &per, 2).unwrap();
    assert!(rel(d.tilde_l2(), golden("tilde_l2")) < 1e-2, "{}", d.tilde_l2());
    let e = d.energy(&field, &per);
    assert!(rel(e.total(), golden("energy_total")) < 1e-2, "{e:?}");
    assert!(rel(e.gradient, golden("energy_gradient")) < 1e-2, "{e:?}");
    let init = build_initializer(&field, &per, &d.window).unwrap();
    assert!(e.total() <= d.window.energy(&field, &per, &init.values).total());
    assert!(2.0 * e.gradient <= init.bound);
}

#[test]
fn override_equal_to_pattern_is_no_defect() {
    let pattern = HoleShape::disk(Point::new(0.5, 0.5), 0.25);
    let field = PerforationField::periodic(pattern).with_override(CellIndex::new(1, -1), pattern);
    let per = solve_periodic_corrector(&pattern, 64).unwrap();
    let d = solve_defect_corrector(&field, &per, 2).unwrap();
    assert!(d.tilde_linf() <= 1e-10);
}

#[test]
fn small_window_wellposedness() {
    let plan = WellPosednessPlan {
        base_radius: 1,
        mid_radius: 2,
        far_radius: 3,
        trials: 50,
        ..WellPosednessPlan::default()
    };
    let w = wellposedness_checks(&PerforationField::golden(), &plan).unwrap();
    for v in w.corrector.iter().chain(std::iter::once(&w.sup_norms)) {
        assert!(v.pass, "{v}");
    }
}

#[test]
fn solves_are_deterministic_and_dumps_round_trip() {
    let field = PerforationField::golden();
    let per = Arc::new(solve_periodic_corrector(&field.pattern, 64).unwrap());
    let a = solve_defect_corrector(&field, &per, 1).unwrap();
    let b = solve_defect_corrector(&field, &per, 1).unwrap();
    assert_eq!(a.w, b.w);
    let mut text = Vec::new();
    a.field().write_text(&mut text).unwrap();
    let (_, h, nx, ny, values) = read_field(text.as_slice()).unwrap();
    assert_eq!((nx, ny), (a.grid().nx, a.grid().ny));
    assert_eq!(h, a.grid().h);
    assert_eq!(values, a.w);

    let w = CompositeCorrector::new(field.clone(), per.clone(), Some(Arc::new(a)));
    // Inside the enlarged hole but outside the periodic one.
    assert_eq!(w.sample(Point::new(0.5 + 0.3, 0.5)), 0.0);
    assert!(w.lattice(64 * 5 + 3, 7) == per.lattice(3, 7));
}
