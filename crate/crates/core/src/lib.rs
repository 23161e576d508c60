//! Homogenization of the Poisson equation in perforated domains with
//! localized defects: geometry, embedded-boundary discretization, correctors,
//! two-scale error studies and Poincaré constants.

use std::fmt;

pub mod corrector;
pub mod geometry;
pub mod grid;
pub mod homogenize;
pub mod poincare;
pub mod solver;
pub mod suite;

pub use corrector::{
    solve_defect_corrector, solve_periodic_corrector, solve_periodic_corrector_with, CompositeCorrector,
    CorrectorError, DefectCorrector, Energy, PeriodicCorrector,
};
pub use geometry::{CellIndex, DecayRule, GeometryError, HoleShape, PerforationField, Point, Region};
pub use grid::{BoundaryMode, CartesianGrid, Classification, GridError, Norms, ScalarField};
pub use homogenize::{
    convergence_study, ConvergenceReport, CorrectorChoice, HomogenizeError, Level, MacroProblem, Rect, SourceTerm,
    StudyPlan,
};
pub use poincare::{rayleigh_min, Constraint, PoincareError, RayleighResult, ScalingReport};
pub use solver::{SolverError, SparseOperator};

/// Outcome of one named check: `PASS|FAIL name measured expected`.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub measured: f64,
    pub expected: String,
    pub pass: bool,
}

impl Verdict {
    pub fn new(name: &str, measured: f64, expected: String, pass: bool) -> Self {
        Verdict {
            name: name.to_string(),
            measured,
            expected,
            pass,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {:.6e} {}", self.name, self.measured, self.expected)
    }
}

/// A numbered acceptance criterion made of one or more checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: String,
    pub checks: Vec<Verdict>,
}

impl Criterion {
    pub fn new(id: u8, name: &str, checks: Vec<Verdict>) -> Self {
        Criterion {
            id,
            name: name.to_string(),
            checks,
        }
    }

    /// A criterion that could not be evaluated, e.g. after a solver failure.
    pub fn failed(id: u8, name: &str, reason: &str) -> Self {
        Criterion::new(
            id,
            name,
            vec![Verdict::new(reason, f64::NAN, "evaluated".into(), false)],
        )
    }

    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|v| v.pass)
    }
}

/// `PASS|FAIL name measured expected` with the checks packed as
/// `check=value` and `check:bound` lists.
impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass() { "PASS" } else { "FAIL" };
        let measured: Vec<String> = self
            .checks
            .iter()
            .map(|v| format!("{}={:.6e}", v.name, v.measured))
            .collect();
        let expected: Vec<String> = self
            .checks
            .iter()
            .map(|v| format!("{}:{}", v.name, v.expected))
            .collect();
        write!(
            f,
            "{tag} {}_{} {} {}",
            self.id,
            self.name,
            measured.join(";"),
            expected.join(";")
        )
    }
}
