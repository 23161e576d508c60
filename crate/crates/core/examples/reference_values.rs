//! Regenerates `tests/data/golden.txt`: fine-grid reference values that the
//! integration tests compare coarser pipeline runs against.
//!
//! cargo run --release -p perfhom --example reference_values > crates/core/tests/data/golden.txt

use std::sync::Arc;

use perfhom::corrector::{
    solve_defect_corrector, solve_periodic_corrector, solve_periodic_corrector_with, CompositeCorrector,
};
use perfhom::geometry::PerforationField;
use perfhom::grid::{classify_nodes, CartesianGrid};
use perfhom::homogenize::{build_domain, error_report, solve_eps_problem, two_scale_approx, MacroProblem, SourceTerm};
use perfhom::poincare::{rayleigh_min, Constraint};

fn main() {
    let golden = PerforationField::golden();
    let pattern = golden.pattern;
    println!("# Reference values for the golden configuration: unit cell with a");
    println!("# centered disk r = 0.25, one enlarged disk r = 0.32 in cell (0, 0).");
    println!("# Each entry: key value, preceded by how it was produced.");

    let p256 = solve_periodic_corrector_with(&pattern, 256, 1e-11).unwrap().max();
    let p512 = solve_periodic_corrector_with(&pattern, 512, 1e-11).unwrap().max();
    println!(
        "# max w^per, n = 512 solve (relative tolerance 1e-11) with Richardson extrapolation from n = 256 (p = 2)"
    );
    println!("periodic_max {:.12e}", p512 + (p512 - p256) / 3.0);

    let per = Arc::new(solve_periodic_corrector(&pattern, 256).unwrap());
    let defect = solve_defect_corrector(&golden, &per, 4).unwrap();
    println!("# ||w~||_L2 on the window, R = 4, n = 256 per cell (w~ decays ~100x per ring,");
    println!("# so rings beyond R = 4 change the norm below 1e-8)");
    println!("tilde_l2 {:.12e}", defect.tilde_l2());
    let e = defect.energy(&golden, &per);
    println!("# J(minimizer) = gradient + boundary - source, same solve");
    println!("energy_total {:.12e}", e.total());
    println!("energy_gradient {:.12e}", e.gradient);
    drop(defect);
    drop(per);

    let per = Arc::new(solve_periodic_corrector(&pattern, 256).unwrap());
    let defect = Arc::new(solve_defect_corrector(&golden, &per, 4).unwrap());
    let w = CompositeCorrector::new(golden.clone(), per, Some(defect));
    let f = SourceTerm::default_bump();
    let problem = MacroProblem::unit(f, 8).unwrap();
    let domain = build_domain(&problem, &golden, 256).unwrap();
    let u = solve_eps_problem(&domain, &f).unwrap().u;
    let approx = two_scale_approx(&domain, &f, &w).unwrap();
    let err = error_report(&u, &approx, &domain).unwrap();
    println!("# error norms of u_eps - eps^2 w(x/eps) f at eps = 1/8, h = eps/256, full corrector");
    println!("error_l2_eps8 {:.12e}", err.l2);
    println!("error_h1_eps8 {:.12e}", err.h1);
    println!("error_linf_eps8 {:.12e}", err.linf);
    drop((u, approx, domain, w));

    let cell = classify_nodes(
        &CartesianGrid::periodic_cell(512).unwrap(),
        &PerforationField::periodic(pattern),
    )
    .unwrap();
    let r = rayleigh_min(&cell, Constraint::Holes).unwrap();
    println!("# smallest eigenvalue on the periodic cell minus the r = 0.25 disk, n = 512");
    println!("cell_lambda {:.12e}", r.lambda_min);
}
