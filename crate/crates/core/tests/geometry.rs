use std::f64::consts::PI;

use proptest::prelude::*;

use perfhom::geometry::{
    dist_to_cell_boundary, min_cell_clearance, minimal_alpha, shape_regularity_verdicts, symmetric_difference_area,
    symmetric_difference_sum, symmetric_difference_tail, CellIndex, DecayRule, HoleShape, PerforationField, Point,
    ShapeRegularityPlan,
};

fn decay_field(amplitude: f64, ratio: f64) -> PerforationField {
    PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25)).with_decay(DecayRule { amplitude, ratio })
}

#[test]
fn golden_closed_forms() {
    let g = PerforationField::golden();
    assert!((minimal_alpha(&g, CellIndex::ORIGIN) - 0.07).abs() < 1e-15);
    assert_eq!(minimal_alpha(&g, CellIndex::new(1, 0)), 0.0);
    assert_eq!(dist_to_cell_boundary(&g, CellIndex::ORIGIN).unwrap(), 0.18);
    assert_eq!(min_cell_clearance(&g, 3).unwrap(), 0.18);
    let area = symmetric_difference_area(&g, CellIndex::ORIGIN);
    assert!((area - PI * (0.32f64.powi(2) - 0.0625)).abs() < 1e-14);
}

#[test]
fn golden_shape_regularity_checks_pass() {
    let v = shape_regularity_verdicts(
        &PerforationField::golden(),
        &decay_field(0.05, 0.5),
        &ShapeRegularityPlan::default(),
    )
    .unwrap();
    assert_eq!(v.len(), 3);
    for check in &v {
        assert!(check.pass, "{check}");
    }
    assert_eq!(v[1].measured, 0.25);
}

#[test]
fn short_windows_do_not_reach_the_cauchy_limit() {
    // With the window ending at 16 the remainder is about 1.7e-4.
    let plan = ShapeRegularityPlan {
        cauchy_from: 8,
        cauchy_to: 16,
        ..ShapeRegularityPlan::default()
    };
    let v = shape_regularity_verdicts(&PerforationField::golden(), &decay_field(0.05, 0.5), &plan).unwrap();
    assert!(!v[0].pass);
}

#[test]
fn decay_tail_matches_longer_partial_sums() {
    let f = decay_field(0.05, 0.5);
    let s16 = symmetric_difference_sum(&f, 16);
    let s48 = symmetric_difference_sum(&f, 48);
    let tail16 = symmetric_difference_tail(&f, 16);
    // The shell bound is exact for concentric disks.
    assert!((s48 - s16 - tail16).abs() < 1e-12, "{} {}", s48 - s16, tail16);
    assert!(symmetric_difference_tail(&f, 48) < 1e-12);
}

#[test]
fn periodic_field_has_no_tail() {
    let f = PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25));
    assert_eq!(symmetric_difference_sum(&f, 5), 0.0);
    assert_eq!(symmetric_difference_tail(&f, 5), 0.0);
}

#[test]
fn tail_counts_overrides_outside_the_window() {
    let far = CellIndex::new(6, -2);
    let f = PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25))
        .with_override(far, HoleShape::disk(Point::new(0.5, 0.5), 0.3));
    let area = PI * (0.09 - 0.0625);
    assert!((symmetric_difference_tail(&f, 5) - area).abs() < 1e-14);
    assert_eq!(symmetric_difference_tail(&f, 6), 0.0);
    assert!((symmetric_difference_sum(&f, 6) - area).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tail_decreases_with_the_window(a in 0.0f64..0.2, t in 0.05f64..0.9, k in 1i64..20) {
        let f = decay_field(a, t);
        prop_assert!(symmetric_difference_tail(&f, k + 1) <= symmetric_difference_tail(&f, k));
    }

    #[test]
    fn nested_ellipse_difference_is_area_gap(a in 0.1f64..0.3, b in 0.1f64..0.3, d in 0.0f64..0.1, rot in 0.0f64..3.0) {
        let pattern = HoleShape::ellipse(Point::new(0.5, 0.5), a, b, rot);
        let f = PerforationField::periodic(pattern).with_override(CellIndex::ORIGIN, pattern.with_radii_offset(d));
        let exact = PI * ((a + d) * (b + d) - a * b);
        prop_assert!((symmetric_difference_area(&f, CellIndex::ORIGIN) - exact).abs() < 1e-12);
    }
}
