//! Poincaré constants as reciprocal smallest eigenvalues of the discrete
//! Dirichlet form: the box bound `d/|R|` for functions vanishing on a set
//! that contains a box, and the ε² scaling on perforated domains.
//!
//! The pencil is `K v = λ M v` with `K` the edge form of the `H¹` seminorm
//! and `M` the diagonal quadrature weights, so `λ` is exactly the minimum
//! of the discrete Rayleigh quotient `|v|²_{H¹} / ||v||²_{L²}`.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{GeometryError, Point, Region};
use crate::grid::{classify_nodes, edge_form_matrix, quadrature_weights, CartesianGrid, Classification, GridError};
use crate::homogenize::{build_domain, run_jobs, HomogenizeError, MacroProblem, Rect, SourceTerm, MIN_CELLS_PER_EPS};
use crate::solver::{bicgstab, solve_with, SolveOptions, SolverError, SparseOperator};
use crate::Verdict;

/// Outer iteration cap (inverse iteration plus Rayleigh quotient steps).
pub const MAX_OUTER: usize = 200;
/// Eigenpair residual target, relative to `λ ||v||`.
pub const EIGEN_TOL: f64 = 1e-8;
/// Slack on the box bound for discretization error.
pub const BOX_SLACK: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PoincareError {
    #[error("no free nodes: every node is constrained")]
    NoFreeNodes,
    #[error("no constrained nodes: the Rayleigh quotient is not bounded below away from 0")]
    NoConstraint,
    #[error("eigen iteration did not converge in {iterations} steps (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("eigenvector changes sign (min/max {ratio:.3e}); not the ground state")]
    NotGroundState { ratio: f64 },
    #[error("box [{lo:?}, {hi:?}] is not inside the constrained set")]
    BoxNotInside { lo: Point, hi: Point },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Homogenize(Box<HomogenizeError>),
}

impl From<HomogenizeError> for PoincareError {
    fn from(e: HomogenizeError) -> Self {
        PoincareError::Homogenize(Box::new(e))
    }
}

/// Which nodes are held at zero besides the solid ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    /// Zero on the holes; the outer boundary is free (natural closure) or
    /// periodic.
    Holes,
    /// Zero on the outer boundary of a non-periodic grid.
    Outer,
    /// Zero on holes and on the outer boundary: `H¹₀(Ω_ε)`.
    HolesAndOuter,
}

impl Constraint {
    fn outer(self) -> bool {
        matches!(self, Constraint::Outer | Constraint::HolesAndOuter)
    }
}

#[derive(Clone, Debug)]
pub struct RayleighResult {
    pub lambda_min: f64,
    pub poincare_constant: f64,
    pub iterations: usize,
    /// `||M⁻¹Kv - λv||_M / (λ ||v||_M)`.
    pub residual: f64,
    pub free_nodes: usize,
    /// Eigenvector on the full grid, zero at constrained nodes, `||v||_M = 1`
    /// and nonnegative.
    pub eigenvector: Vec<f64>,
}

/// Free-node mask for a constraint.
pub fn free_mask(cls: &Classification, constraint: Constraint) -> Vec<bool> {
    (0..cls.len())
        .map(|k| !cls.is_solid(k) && !(constraint.outer() && cls.grid.is_outer(k)))
        .collect()
}

fn has_constraint(cls: &Classification, constraint: Constraint) -> bool {
    let outer = constraint.outer() && (0..cls.len()).any(|k| cls.grid.is_outer(k));
    // A hole shows up as a cut arm on some fluid node (or as solid nodes).
    outer || cls.solid_count() > 0
}

fn m_norm(x: &[f64], m: &[f64]) -> f64 {
    x.iter().zip(m).map(|(a, b)| a * a * b).sum::<f64>().sqrt()
}

fn rayleigh(k: &SparseOperator, m: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
    k.matvec(x, scratch);
    let num: f64 = x.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum();
    num / m_norm(x, m).powi(2)
}

/// Relative residual `||M⁻¹(Kx - ρMx)||_M / (ρ ||x||_M)`.
fn eigen_residual(k: &SparseOperator, m: &[f64], x: &[f64], rho: f64, scratch: &mut [f64]) -> f64 {
    k.matvec(x, scratch);
    let r: f64 = scratch
        .iter()
        .zip(x)
        .zip(m)
        .map(|((kx, xi), mi)| {
            let ri = kx - rho * mi * xi;
            ri * ri / mi
        })
        .sum();
    r.sqrt() / (rho * m_norm(x, m))
}

fn normalize(x: &mut [f64], m: &[f64]) {
    let n = m_norm(x, m);
    let sign = if x.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    x.iter_mut().for_each(|v| *v *= sign / n);
}

/// Smallest eigenvalue of the discrete `-Δ` on the fluid nodes of `cls`
/// with the given zero constraint. Inverse iteration from a deterministic
/// start (a `sin·sin` profile when the outer boundary is constrained, all
/// ones otherwise) settles on the ground-state band, then Rayleigh quotient
/// steps with inexact solves sharpen the pair to `EIGEN_TOL`.
pub fn rayleigh_min(cls: &Classification, constraint: Constraint) -> Result<RayleighResult, PoincareError> {
    let free = free_mask(cls, constraint);
    if !free.iter().any(|&f| f) {
        return Err(PoincareError::NoFreeNodes);
    }
    if !has_constraint(cls, constraint) {
        return Err(PoincareError::NoConstraint);
    }
    let (kmat, nodes) = edge_form_matrix(cls, &free);
    let weights = quadrature_weights(cls);
    let m: Vec<f64> = nodes.iter().map(|&k| weights[k]).collect();
    drop(weights);
    let grid = &cls.grid;
    let (w, h) = grid.extent();
    let mut x: Vec<f64> = nodes
        .iter()
        .map(|&k| {
            if constraint.outer() {
                let p = grid.point(k) - grid.origin;
                (std::f64::consts::PI * p.x / w).sin() * (std::f64::consts::PI * p.y / h).sin()
            } else {
                1.0
            }
        })
        .collect();
    normalize(&mut x, &m);
    let mut scratch = vec![0.0; x.len()];
    let mut rho = rayleigh(&kmat, &m, &x, &mut scratch);
    let mut residual = eigen_residual(&kmat, &m, &x, rho, &mut scratch);
    let mut it = 0;
    let opts = SolveOptions {
        tol: 1e-10,
        max_iter: None,
    };
    // Near convergence the shifted solve stagnates along the eigenvector it
    // is amplifying; past this cap more iterations do not change the direction.
    let shifted_opts = SolveOptions {
        tol: 1e-10,
        max_iter: Some(((5.0 * (nodes.len() as f64).sqrt()) as usize).max(200)),
    };

    // Inverse iteration until the Rayleigh quotient settles.
    while it < MAX_OUTER && residual > EIGEN_TOL {
        it += 1;
        let b: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a * b).collect();
        let sol = solve_with(
            &kmat,
            &b,
            Some(&x),
            SolveOptions {
                tol: 1e-8,
                max_iter: None,
            },
        )?;
        x = sol.x;
        normalize(&mut x, &m);
        let next = rayleigh(&kmat, &m, &x, &mut scratch);
        residual = eigen_residual(&kmat, &m, &x, next, &mut scratch);
        let settled = (rho - next).abs() <= 1e-4 * next;
        rho = next;
        if settled || it >= 20 {
            break;
        }
    }

    // Rayleigh quotient iteration; the shifted system is nearly singular
    // by design, so partial solves are accepted.
    while it < MAX_OUTER && residual > EIGEN_TOL {
        it += 1;
        let shifted = kmat.minus_diagonal(rho, &m);
        let b: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a * b).collect();
        let y = match bicgstab(&shifted, &b, Some(&x), shifted_opts) {
            Ok(sol) => sol.x,
            Err(SolverError::Breakdown { .. }) => solve_with(&kmat, &b, Some(&x), opts)?.x,
            Err(e) => return Err(e.into()),
        };
        if y.iter().any(|v| !v.is_finite()) || m_norm(&y, &m) == 0.0 {
            break;
        }
        x = y;
        normalize(&mut x, &m);
        rho = rayleigh(&kmat, &m, &x, &mut scratch);
        residual = eigen_residual(&kmat, &m, &x, rho, &mut scratch);
    }
    if residual > EIGEN_TOL {
        return Err(PoincareError::NotConverged {
            iterations: it,
            residual,
        });
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-6 * max {
        return Err(PoincareError::NotGroundState { ratio: min / max });
    }
    let mut eigenvector = vec![0.0; cls.len()];
    for (&k, &v) in nodes.iter().zip(&x) {
        eigenvector[k] = v;
    }
    Ok(RayleighResult {
        lambda_min: rho,
        poincare_constant: 1.0 / rho,
        iterations: it,
        residual,
        free_nodes: nodes.len(),
        eigenvector,
    })
}

/// Worst ratio `||v||²_{L²} / (C |v|²_{H¹})` over `samples` random fields
/// vanishing on the constrained nodes. Fields are the eigenvector plus
/// noise at log-uniform amplitudes, so the check probes both the minimizer's
/// neighbourhood and rough fields. Rayleigh minimality means the ratio
/// never exceeds 1.
pub fn certify<G: Rng>(
    cls: &Classification,
    constraint: Constraint,
    result: &RayleighResult,
    samples: usize,
    rng: &mut G,
) -> f64 {
    let free = free_mask(cls, constraint);
    let (kmat, nodes) = edge_form_matrix(cls, &free);
    let weights = quadrature_weights(cls);
    let m: Vec<f64> = nodes.iter().map(|&k| weights[k]).collect();
    let base: Vec<f64> = nodes.iter().map(|&k| result.eigenvector[k]).collect();
    let mut scratch = vec![0.0; nodes.len()];
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let amp = 10f64.powf(rng.random_range(-4.0..1.0));
        let v: Vec<f64> = base.iter().map(|b| b + amp * rng.random_range(-1.0..1.0)).collect();
        let q = rayleigh(&kmat, &m, &v, &mut scratch);
        worst = worst.max(1.0 / (result.poincare_constant * q));
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxCheck {
    /// `d / |R|`.
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
}

/// Measures the Poincaré constant of `Q ∖ U` on the unit cell (zero on `U`,
/// natural closure on `∂Q`) at `n` intervals per side and compares it with
/// `d/|R|` for a box `R ⊂ U`, allowing `BOX_SLACK` for discretization.
pub fn check_box_constant(u: &dyn Region, boxed: Rect, n: usize) -> Result<BoxCheck, PoincareError> {
    let samples = 64;
    for j in 0..=samples {
        for i in 0..=samples {
            let p = Point::new(
                boxed.x0 + boxed.width() * i as f64 / samples as f64,
                boxed.y0 + boxed.height() * j as f64 / samples as f64,
            );
            if u.signed_distance(p) > 1e-12 {
                return Err(PoincareError::BoxNotInside {
                    lo: Point::new(boxed.x0, boxed.y0),
                    hi: Point::new(boxed.x1, boxed.y1),
                });
            }
        }
    }
    let bound = 2.0 / boxed.area();
    let cls = classify_nodes(&CartesianGrid::unit_square(n)?, u)?;
    let measured = match rayleigh_min(&cls, Constraint::Holes) {
        Ok(r) => r.poincare_constant,
        // v = 0 is the only admissible field.
        Err(PoincareError::NoFreeNodes) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(BoxCheck {
        bound,
        measured,
        pass: measured <= bound * (1.0 + BOX_SLACK),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub eps: f64,
    pub lambda_min: f64,
    pub poincare_constant: f64,
    /// `C_ε = poincare_constant / ε²`.
    pub c_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// `max C_ε / min C_ε`.
    pub spread: f64,
    /// False when `Ω_ε` has no holes at all; the ε² scaling then does not apply.
    pub perforated: bool,
}

impl BoxCheck {
    pub fn verdict(&self, name: &str) -> Verdict {
        Verdict::new(
            name,
            self.measured,
            format!("<={:.6e}", self.bound * (1.0 + BOX_SLACK)),
            self.pass,
        )
    }
}

pub const SCALING_CSV_HEADER: &str = "epsilon,lambda_min,poincare_constant,c_eps";
/// Largest admissible `max C_ε / min C_ε`.
pub const SCALING_SPREAD: f64 = 2.0;

impl ScalingReport {
    pub fn pass(&self) -> bool {
        self.perforated && self.spread <= SCALING_SPREAD
    }

    pub fn verdict(&self, name: &str) -> Verdict {
        Verdict::new(name, self.spread, format!("<={SCALING_SPREAD}"), self.pass())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCALING_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.10e},{:.10e},{:.10e},{:.10e}",
                r.eps, r.lambda_min, r.poincare_constant, r.c_eps
            );
        }
        if self.perforated {
            let verdict = if self.pass() { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "# {verdict} spread {:.6} limit {SCALING_SPREAD}", self.spread);
        } else {
            let _ = writeln!(out, "# SKIP no perforation, scaling lemma inapplicable");
        }
        out
    }
}

/// `C_ε` on `Ω_ε` with zero data on holes and on `∂Ω`, `h = ε/cells`.
/// `holes` is given in cell coordinates; its cell `(0, 0)` lands on the
/// ε-cell containing `anchor`.
pub fn eps_scaling_study<R: Region + ?Sized>(
    holes: &R,
    omega: Rect,
    anchor: Point,
    eps_inv: &[usize],
    cells: usize,
    jobs: usize,
) -> Result<ScalingReport, PoincareError> {
    if cells < MIN_CELLS_PER_EPS {
        return Err(HomogenizeError::Resolution(cells).into());
    }
    let mut levels = eps_inv.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let results = run_jobs(levels.len(), jobs, |i| -> Result<(ScalingRow, bool), PoincareError> {
        let problem = MacroProblem::new(omega, SourceTerm::Constant(0.0), levels[i], anchor)?;
        let domain = build_domain(&problem, holes, cells)?;
        let perforated = domain.cls.solid_count() > 0;
        let r = rayleigh_min(&domain.cls, Constraint::HolesAndOuter)?;
        let eps = problem.eps();
        Ok((
            ScalingRow {
                eps,
                lambda_min: r.lambda_min,
                poincare_constant: r.poincare_constant,
                c_eps: r.poincare_constant / (eps * eps),
            },
            perforated,
        ))
    });
    let mut rows = Vec::new();
    let mut perforated = true;
    for r in results {
        let (row, p) = r?;
        perforated &= p;
        rows.push(row);
    }
    let max = rows.iter().map(|r| r.c_eps).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.c_eps).fold(f64::INFINITY, f64::min);
    Ok(ScalingReport {
        rows,
        spread: max / min,
        perforated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Everywhere, HoleShape, Nowhere};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_square_dirichlet() {
        let cls = Classification::all_fluid(CartesianGrid::unit_square(64).unwrap());
        let r = rayleigh_min(&cls, Constraint::Outer).unwrap();
        let exact = 2.0 * std::f64::consts::PI.powi(2);
        assert!((r.lambda_min - exact).abs() / exact < 5e-3, "{}", r.lambda_min);
        assert!(r.residual <= EIGEN_TOL);
    }

    #[test]
    fn degenerate_constraints() {
        let cls = classify_nodes(&CartesianGrid::unit_square(16).unwrap(), &Everywhere).unwrap();
        assert!(matches!(
            rayleigh_min(&cls, Constraint::Holes),
            Err(PoincareError::NoFreeNodes)
        ));
        let cls = classify_nodes(&CartesianGrid::unit_square(16).unwrap(), &Nowhere).unwrap();
        assert!(matches!(
            rayleigh_min(&cls, Constraint::Holes),
            Err(PoincareError::NoConstraint)
        ));
    }

    #[test]
    fn certificate_never_beats_minimum() {
        let disk = HoleShape::disk(Point::new(0.5, 0.5), 0.3);
        let cls = classify_nodes(&CartesianGrid::unit_square(32).unwrap(), &disk).unwrap();
        let r = rayleigh_min(&cls, Constraint::Holes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let worst = certify(&cls, Constraint::Holes, &r, 100, &mut rng);
        assert!(worst <= 1.0 + 1e-9, "{worst}");
        assert!(worst > 0.9);
    }

    #[test]
    fn box_outside_hole_is_rejected() {
        let disk = HoleShape::disk(Point::new(0.5, 0.5), 0.3);
        let r = check_box_constant(&disk, Rect::new(0.1, 0.1, 0.4, 0.4), 32);
        assert!(matches!(r, Err(PoincareError::BoxNotInside { .. })));
    }
}
