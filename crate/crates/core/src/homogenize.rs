//! The ε-problem `-Δu_ε = f` on the perforated domain `Ω_ε`, its two-scale
//! approximant `ε² w(x/ε) f(x)`, error norms and convergence studies.
//!
//! Macro grids are lattice-exact: with `h = ε/n` every node maps to a node
//! of the cell-resolution-`n` corrector, so the approximant is a nodewise
//! product and never interpolates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::corrector::{solve_defect_corrector, solve_periodic_corrector, CompositeCorrector, CorrectorError};
use crate::geometry::{CellIndex, PerforationField, Point, Region};
use crate::grid::{
    assemble_laplacian, classify_nodes, h1_seminorm_sq, h1_seminorm_sq_with, l2_norm_sq, quadrature_weights,
    CartesianGrid, Classification, Dir, GridError, Norms, ScalarField,
};
use crate::poincare::{rayleigh_min, Constraint, PoincareError};
use crate::solver::{solve_with, SolveOptions, SolverError};
use crate::Verdict;

/// Coarsest admissible resolution: `h <= ε/16`.
pub const MIN_CELLS_PER_EPS: usize = 16;
/// Only levels with `h <= ε/64` enter the fitted slopes.
pub const RATE_CELLS_PER_EPS: usize = 64;

#[derive(Debug, Error)]
pub enum HomogenizeError {
    #[error("resolution guard: h = ε/{0} is coarser than ε/{MIN_CELLS_PER_EPS}")]
    Resolution(usize),
    #[error("invalid macro problem: {0}")]
    Problem(String),
    #[error("corrector resolution {corrector} does not match ε/h = {macro_cells}")]
    ResolutionMismatch { corrector: usize, macro_cells: usize },
    #[error("rate fit needs at least two positive samples: {0}")]
    Fit(String),
    #[error("study needs at least {needed} levels with h <= ε/{RATE_CELLS_PER_EPS}, found {found}")]
    Levels { needed: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Poincare(#[from] PoincareError),
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Rect::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Distance from `p` to the boundary, negative outside.
    pub fn inner_distance(&self, p: Point) -> f64 {
        (p.x - self.x0).min(self.x1 - p.x).min(p.y - self.y0).min(self.y1 - p.y)
    }
}

/// Right-hand side of the macro problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceTerm {
    /// `A exp(1 - 1/(1 - |x-c|²/ρ²))` inside the disk of radius `ρ`, else 0.
    Bump {
        center: Point,
        radius: f64,
        amplitude: f64,
    },
    Constant(f64),
}

impl SourceTerm {
    pub fn default_bump() -> Self {
        SourceTerm::Bump {
            center: Point::new(0.5, 0.5),
            radius: 0.35,
            amplitude: 1.0,
        }
    }

    fn bump_s(center: Point, radius: f64, p: Point) -> f64 {
        (p - center).dot(p - center) / (radius * radius)
    }

    pub fn value(&self, p: Point) -> f64 {
        match *self {
            SourceTerm::Constant(c) => c,
            SourceTerm::Bump {
                center,
                radius,
                amplitude,
            } => {
                let s = Self::bump_s(center, radius, p);
                if s >= 1.0 {
                    0.0
                } else {
                    amplitude * (1.0 - 1.0 / (1.0 - s)).exp()
                }
            }
        }
    }

    pub fn gradient(&self, p: Point) -> Point {
        match *self {
            SourceTerm::Constant(_) => Point::new(0.0, 0.0),
            SourceTerm::Bump { center, radius, .. } => {
                let s = Self::bump_s(center, radius, p);
                if s >= 1.0 {
                    return Point::new(0.0, 0.0);
                }
                let q = 1.0 - s;
                // df/ds = -f/q², ∇s = 2(x-c)/ρ²
                (p - center) * (-2.0 * self.value(p) / (q * q * radius * radius))
            }
        }
    }

    pub fn laplacian(&self, p: Point) -> f64 {
        match *self {
            SourceTerm::Constant(_) => 0.0,
            SourceTerm::Bump { center, radius, .. } => {
                let s = Self::bump_s(center, radius, p);
                if s >= 1.0 {
                    return 0.0;
                }
                let q = 1.0 - s;
                let f = self.value(p);
                // f'' |∇s|² + f' Δs with f'' = f (1 - 2q)/q⁴, |∇s|² = 4s/ρ², Δs = 4/ρ²
                4.0 * f / (radius * radius) * (s * (1.0 - 2.0 * q) / q.powi(4) - 1.0 / (q * q))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            SourceTerm::Constant(c) => c == 0.0,
            SourceTerm::Bump { amplitude, .. } => amplitude == 0.0,
        }
    }
}

/// `-Δu_ε = f` on `Ω_ε`, `u_ε = 0` on holes and on `∂Ω`, with `ε = 1/eps_inv`.
/// The field's cell `(0, 0)` is placed on the ε-cell containing `anchor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroProblem {
    pub omega: Rect,
    pub source: SourceTerm,
    pub eps_inv: usize,
    pub anchor: Point,
}

impl MacroProblem {
    pub fn new(omega: Rect, source: SourceTerm, eps_inv: usize, anchor: Point) -> Result<Self, HomogenizeError> {
        let p = MacroProblem {
            omega,
            source,
            eps_inv,
            anchor,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit square, default bump, defect anchored at the bump center.
    pub fn unit(source: SourceTerm, eps_inv: usize) -> Result<Self, HomogenizeError> {
        MacroProblem::new(Rect::unit(), source, eps_inv, Point::new(0.5, 0.5))
    }

    pub fn validate(&self) -> Result<(), HomogenizeError> {
        if self.eps_inv == 0 {
            return Err(HomogenizeError::Problem("1/ε must be a positive integer".into()));
        }
        let m = self.eps_inv as f64;
        let o = &self.omega;
        if !(o.width() > 0.0 && o.height() > 0.0) {
            return Err(HomogenizeError::Problem("Ω is empty".into()));
        }
        for v in [o.x0, o.y0, o.x1, o.y1] {
            if (v * m - (v * m).round()).abs() > 1e-9 {
                return Err(HomogenizeError::Problem(format!(
                    "Ω corner {v} is not on the ε-lattice"
                )));
            }
        }
        if let SourceTerm::Bump { center, radius, .. } = self.source {
            if !(radius > 0.0) || o.inner_distance(center) <= radius {
                return Err(HomogenizeError::Problem(
                    "bump support must lie strictly inside Ω".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.eps_inv as f64
    }

    /// Integer shift with `y = x/ε - shift`.
    pub fn shift(&self) -> (i64, i64) {
        let m = self.eps_inv as f64;
        ((self.anchor.x * m).floor() as i64, (self.anchor.y * m).floor() as i64)
    }

    pub fn with_source(&self, source: SourceTerm) -> Self {
        MacroProblem { source, ..*self }
    }

    pub fn with_eps_inv(&self, eps_inv: usize) -> Self {
        MacroProblem { eps_inv, ..*self }
    }

    /// `N(f) = ||f||_∞ + ||∇f||_{L²(Ω)} + ||Δf||_{L²(Ω)}` by midpoint
    /// quadrature with `samples²` points.
    pub fn source_norm(&self, samples: usize) -> f64 {
        let o = &self.omega;
        let (dx, dy) = (o.width() / samples as f64, o.height() / samples as f64);
        let (mut sup, mut grad, mut lap) = (0.0f64, 0.0, 0.0);
        for j in 0..samples {
            for i in 0..samples {
                let p = Point::new(o.x0 + (i as f64 + 0.5) * dx, o.y0 + (j as f64 + 0.5) * dy);
                let g = self.source.gradient(p);
                sup = sup.max(self.source.value(p).abs());
                grad += g.dot(g) * dx * dy;
                lap += self.source.laplacian(p).powi(2) * dx * dy;
            }
        }
        sup + grad.sqrt() + lap.sqrt()
    }
}

/// A cell-coordinate region seen at scale ε: `p ∈ S` iff `p/ε - shift ∈ R`.
pub struct ScaledRegion<'a, R: ?Sized> {
    pub inner: &'a R,
    pub eps_inv: f64,
    pub shift: (i64, i64),
}

impl<R: Region + ?Sized> Region for ScaledRegion<'_, R> {
    fn signed_distance(&self, p: Point) -> f64 {
        let y = Point::new(
            p.x * self.eps_inv - self.shift.0 as f64,
            p.y * self.eps_inv - self.shift.1 as f64,
        );
        self.inner.signed_distance(y) / self.eps_inv
    }
}

/// Classified grid of `Ω_ε` with `h = ε/cells`.
#[derive(Clone, Debug)]
pub struct MacroDomain {
    pub problem: MacroProblem,
    pub cells: usize,
    pub cls: Arc<Classification>,
    pub weights: Vec<f64>,
    lattice_offset: (i64, i64),
}

impl MacroDomain {
    pub fn grid(&self) -> &CartesianGrid {
        &self.cls.grid
    }

    pub fn h(&self) -> f64 {
        self.cls.grid.h
    }

    pub fn eps(&self) -> f64 {
        self.problem.eps()
    }

    /// Corrector lattice index of node `k`; the cell variable is
    /// `y = (ix, iy) / cells`.
    pub fn lattice(&self, k: usize) -> (i64, i64) {
        let (i, j) = self.cls.grid.ij(k);
        (i as i64 + self.lattice_offset.0, j as i64 + self.lattice_offset.1)
    }

    /// Cell-coordinate point of node `k`.
    pub fn cell_point(&self, k: usize) -> Point {
        let (ix, iy) = self.lattice(k);
        let n = self.cells as f64;
        Point::new(ix as f64 / n, iy as f64 / n)
    }

    /// Nodes whose cell variable lies in the closed cell `k`.
    pub fn in_cell(&self, node: usize, cell: CellIndex) -> bool {
        let (ix, iy) = self.lattice(node);
        let n = self.cells as i64;
        let (lo_x, lo_y) = (cell.i * n, cell.j * n);
        (lo_x..=lo_x + n).contains(&ix) && (lo_y..=lo_y + n).contains(&iy)
    }

    pub fn fluid_area(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn node_count(&self) -> usize {
        self.cls.len()
    }
}

/// Classifies the grid of `Ω` at `h = ε/cells` against the scaled holes;
/// the outer boundary carries Dirichlet data.
pub fn build_domain<R: Region + ?Sized>(
    problem: &MacroProblem,
    field: &R,
    cells: usize,
) -> Result<MacroDomain, HomogenizeError> {
    problem.validate()?;
    if cells < MIN_CELLS_PER_EPS {
        return Err(HomogenizeError::Resolution(cells));
    }
    let m = problem.eps_inv;
    let per_unit = (m * cells) as f64;
    let h = 1.0 / per_unit;
    let o = &problem.omega;
    let nx = (o.width() * per_unit).round() as usize;
    let ny = (o.height() * per_unit).round() as usize;
    let grid = CartesianGrid::rectangle(Point::new(o.x0, o.y0), h, nx, ny)?;
    let shift = problem.shift();
    let region = ScaledRegion {
        inner: field,
        eps_inv: m as f64,
        shift,
    };
    let cls = classify_nodes(&grid, &region)?;
    let weights = quadrature_weights(&cls);
    let n = cells as i64;
    let lattice_offset = (
        (o.x0 * per_unit).round() as i64 - shift.0 * n,
        (o.y0 * per_unit).round() as i64 - shift.1 * n,
    );
    Ok(MacroDomain {
        problem: *problem,
        cells,
        cls: Arc::new(cls),
        weights,
        lattice_offset,
    })
}

#[derive(Clone, Debug)]
pub struct EpsSolution {
    pub u: ScalarField,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the assembled Shortley–Weller system with zero hole and outer data.
pub fn solve_eps_problem(domain: &MacroDomain, f: &SourceTerm) -> Result<EpsSolution, HomogenizeError> {
    let cls = &domain.cls;
    let asm = assemble_laplacian(cls)?;
    let source: Vec<f64> = (0..cls.len()).map(|k| f.value(cls.grid.point(k))).collect();
    let rhs = asm.rhs_homogeneous(&source);
    drop(source);
    let sol = solve_with(&asm.matrix, &rhs, None, SolveOptions::default())?;
    let values = asm.scatter(&sol.x, &|_| 0.0);
    Ok(EpsSolution {
        u: ScalarField::new(cls.clone(), values)?,
        iterations: sol.iterations,
        residual: sol.residual,
    })
}

fn check_resolution(domain: &MacroDomain, w: &CompositeCorrector) -> Result<(), HomogenizeError> {
    if w.n() != domain.cells {
        return Err(HomogenizeError::ResolutionMismatch {
            corrector: w.n(),
            macro_cells: domain.cells,
        });
    }
    Ok(())
}

/// `ε² w(x/ε) f(x)` at every fluid node.
pub fn two_scale_approx(
    domain: &MacroDomain,
    f: &SourceTerm,
    w: &CompositeCorrector,
) -> Result<ScalarField, HomogenizeError> {
    check_resolution(domain, w)?;
    let eps2 = domain.eps() * domain.eps();
    let values = (0..domain.node_count())
        .map(|k| {
            if domain.cls.is_solid(k) {
                return 0.0;
            }
            let (ix, iy) = domain.lattice(k);
            eps2 * w.lattice(ix, iy) * f.value(domain.grid().point(k))
        })
        .collect();
    Ok(ScalarField::new(domain.cls.clone(), values)?)
}

/// Norms of `u - approx` on `Ω_ε` when both vanish on the hole boundaries.
pub fn error_report(u: &ScalarField, approx: &ScalarField, domain: &MacroDomain) -> Result<Norms, HomogenizeError> {
    let diff = u.sub(approx)?;
    Ok(crate::grid::norms(&domain.cls, &domain.weights, diff.values()))
}

/// Value of `ε² w(b/ε) f(b)` at a hole crossing `b`. Zero when `b` lies on
/// the corrector's own holes; otherwise (a periodic corrector meeting an
/// enlarged defect hole) the corrector's interpolated value.
pub fn approx_trace(domain: &MacroDomain, f: &SourceTerm, w: &CompositeCorrector, b: Point) -> f64 {
    let eps = domain.eps();
    let (sx, sy) = domain.problem.shift();
    let y = Point::new(b.x / eps - sx as f64, b.y / eps - sy as f64);
    if w.field.signed_distance(y).abs() <= TRACE_TOL {
        return 0.0;
    }
    eps * eps * w.sample(y) * f.value(b)
}

/// Crossing points are located to `1e-10 h`; anything this close to the
/// corrector's hole boundary counts as on it (cell units).
const TRACE_TOL: f64 = 1e-8;

/// Norms of `u - ε² w(·/ε) f` with the approximant's own trace on the hole
/// boundaries of `Ω_ε`.
pub fn error_report_traced(
    u: &ScalarField,
    approx: &ScalarField,
    domain: &MacroDomain,
    f: &SourceTerm,
    w: &CompositeCorrector,
) -> Result<Norms, HomogenizeError> {
    let diff = u.sub(approx)?;
    let trace = |_: usize, b: Point| -approx_trace(domain, f, w, b);
    Ok(Norms {
        l2: l2_norm_sq(&domain.weights, diff.values()).sqrt(),
        h1: h1_seminorm_sq_with(&domain.cls, diff.values(), &trace).sqrt(),
        linf: crate::grid::linf_norm(&domain.cls, diff.values()),
    })
}

/// `||ε² w̃(·/ε) f||_{H¹(Ω_ε)}` (full norm), with the trace `-w^per` of `w̃`
/// on hole boundaries that cut into the periodic fluid region.
pub fn tilde_h1(domain: &MacroDomain, f: &SourceTerm, w: &CompositeCorrector) -> Result<f64, HomogenizeError> {
    check_resolution(domain, w)?;
    let eps = domain.eps();
    let eps2 = eps * eps;
    let grid = domain.grid();
    let shift = domain.problem.shift();
    let to_cell = |p: Point| Point::new(p.x / eps - shift.0 as f64, p.y / eps - shift.1 as f64);
    let values: Vec<f64> = (0..domain.node_count())
        .map(|k| {
            if domain.cls.is_solid(k) {
                return 0.0;
            }
            let (ix, iy) = domain.lattice(k);
            eps2 * w.tilde_lattice(ix, iy) * f.value(grid.point(k))
        })
        .collect();
    let trace = |_: usize, b: Point| -eps2 * w.per.value_at(to_cell(b)) * f.value(b);
    let h1 = if w.defect.is_some() {
        h1_seminorm_sq_with(&domain.cls, &values, &trace)
    } else {
        h1_seminorm_sq(&domain.cls, &values)
    };
    Ok((l2_norm_sq(&domain.weights, &values) + h1).sqrt())
}

/// `max |d|` over fluid nodes whose cell variable lies in the closed cell `cell`.
pub fn linf_in_cell(domain: &MacroDomain, d: &[f64], cell: CellIndex) -> f64 {
    (0..domain.node_count())
        .filter(|&k| !domain.cls.is_solid(k) && domain.in_cell(k, cell))
        .map(|k| d[k].abs())
        .fold(0.0, f64::max)
}

/// Derivative along one axis at node `k` from unequal arms; a hole crossing
/// carries value 0 and a missing neighbour falls back to a one-sided difference.
fn axis_derivative(cls: &Classification, u: &[f64], k: usize, plus: Dir, minus: Dir) -> f64 {
    let grid = &cls.grid;
    let arms = cls.arms(k);
    let side = |dir: Dir| -> Option<(f64, f64)> {
        let nb = grid.neighbor(k, dir)?;
        let t = arms[dir.index()];
        Some(if t < 1.0 { (t, 0.0) } else { (1.0, u[nb]) })
    };
    let u0 = u[k];
    let h = grid.h;
    match (side(plus), side(minus)) {
        (Some((a, ua)), Some((b, ub))) => (b * b * (ua - u0) + a * a * (u0 - ub)) / (a * b * (a + b) * h),
        (Some((a, ua)), None) => (ua - u0) / (a * h),
        (None, Some((b, ub))) => (u0 - ub) / (b * h),
        (None, None) => 0.0,
    }
}

/// `||g_ε||_{L²(Ω_ε)}` for `g_ε = 2 ∇_y w(x/ε)·∇f + ε w(x/ε) Δf`, the
/// residual source of `-Δφ_ε = ε g_ε`. `∇_y w` uses arm-aware differences
/// of the sampled corrector.
pub fn residual_diagnostic(
    domain: &MacroDomain,
    f: &SourceTerm,
    w: &CompositeCorrector,
) -> Result<f64, HomogenizeError> {
    check_resolution(domain, w)?;
    let cls = &domain.cls;
    let eps = domain.eps();
    let sampled: Vec<f64> = (0..cls.len())
        .map(|k| {
            if cls.is_solid(k) {
                0.0
            } else {
                let (ix, iy) = domain.lattice(k);
                w.lattice(ix, iy)
            }
        })
        .collect();
    let mut acc = 0.0;
    for k in 0..cls.len() {
        if cls.is_solid(k) || domain.weights[k] == 0.0 {
            continue;
        }
        let p = cls.grid.point(k);
        let grad_f = f.gradient(p);
        let lap_f = f.laplacian(p);
        if grad_f.dot(grad_f) == 0.0 && lap_f == 0.0 {
            continue;
        }
        // ∇_y w = ε ∇_x [w(x/ε)]
        let gx = eps * axis_derivative(cls, &sampled, k, Dir::East, Dir::West);
        let gy = eps * axis_derivative(cls, &sampled, k, Dir::North, Dir::South);
        let g = 2.0 * (gx * grad_f.x + gy * grad_f.y) + eps * sampled[k] * lap_f;
        acc += domain.weights[k] * g * g;
    }
    Ok(acc.sqrt())
}

/// Least-squares line through `(log ε, log e)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest `|log e - fit|`.
    pub max_residual: f64,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit, HomogenizeError> {
    if pairs.len() < 2 {
        return Err(HomogenizeError::Fit(format!("{} samples", pairs.len())));
    }
    if let Some(&(e, v)) = pairs.iter().find(|&&(e, v)| !(e > 0.0 && v > 0.0)) {
        return Err(HomogenizeError::Fit(format!("nonpositive sample ({e}, {v})")));
    }
    let pts: Vec<(f64, f64)> = pairs.iter().map(|&(e, v)| (e.ln(), v.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(HomogenizeError::Fit("all ε values coincide".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).abs())
        .fold(0.0, f64::max);
    Ok(RateFit {
        slope,
        intercept,
        max_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrectorChoice {
    Full,
    PeriodicOnly,
}

/// One refinement level: `ε = 1/eps_inv`, `h = ε/cells`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Level {
    pub eps_inv: usize,
    pub cells: usize,
}

/// Everything a convergence study needs.
#[derive(Clone, Debug)]
pub struct StudyPlan {
    pub field: PerforationField,
    pub omega: Rect,
    pub source: SourceTerm,
    pub anchor: Point,
    pub levels: Vec<Level>,
    pub window_radius: i64,
    pub choice: CorrectorChoice,
    pub jobs: usize,
    /// Also measure the Poincaré constant of each `Ω_ε` and check
    /// `||φ||_{L²} <= sqrt(C) |φ|_{H¹}`. Expensive.
    pub coupling: bool,
}

impl StudyPlan {
    /// Golden defect field, default bump, ε ∈ {1/8, 1/16, 1/32} on the
    /// ladder h = ε/128, ε/128, ε/64.
    pub fn golden(source: SourceTerm) -> Self {
        StudyPlan {
            field: PerforationField::golden(),
            omega: Rect::unit(),
            source,
            anchor: Point::new(0.5, 0.5),
            levels: vec![
                Level { eps_inv: 8, cells: 128 },
                Level {
                    eps_inv: 16,
                    cells: 128,
                },
                Level { eps_inv: 32, cells: 64 },
            ],
            window_radius: 4,
            choice: CorrectorChoice::Full,
            jobs: 1,
            coupling: false,
        }
    }

    pub fn problem(&self, eps_inv: usize) -> Result<MacroProblem, HomogenizeError> {
        MacroProblem::new(self.omega, self.source, eps_inv, self.anchor)
    }

    fn sorted_levels(&self) -> Vec<Level> {
        let mut levels = self.levels.clone();
        levels.sort();
        levels.dedup();
        levels
    }
}

/// Periodic and full correctors at one cell resolution.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub full: CompositeCorrector,
    pub periodic: CompositeCorrector,
}

impl CorrectorSet {
    pub fn choose(&self, choice: CorrectorChoice) -> &CompositeCorrector {
        match choice {
            CorrectorChoice::Full => &self.full,
            CorrectorChoice::PeriodicOnly => &self.periodic,
        }
    }
}

pub fn prepare_correctors(field: &PerforationField, n: usize, radius: i64) -> Result<CorrectorSet, HomogenizeError> {
    let per = Arc::new(solve_periodic_corrector(&field.pattern, n)?);
    let defect = if field.defects.is_empty() {
        None
    } else {
        Some(Arc::new(solve_defect_corrector(field, &per, radius)?))
    };
    Ok(CorrectorSet {
        full: CompositeCorrector::new(field.clone(), per.clone(), defect),
        periodic: CompositeCorrector::periodic_only(per),
    })
}

/// Correctors for every resolution a plan uses, keyed by cell resolution.
pub type CorrectorCache = BTreeMap<usize, CorrectorSet>;

pub fn prepare_for(plan: &StudyPlan) -> Result<CorrectorCache, HomogenizeError> {
    let mut cache = CorrectorCache::new();
    for level in plan.sorted_levels() {
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(level.cells) {
            slot.insert(prepare_correctors(&plan.field, level.cells, plan.window_radius)?);
        }
    }
    Ok(cache)
}

/// Measurements at one ε.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub h: f64,
    pub cells: usize,
    pub err: Norms,
    pub err_per: Norms,
    /// Periodic-only `L∞` error over the scaled defect cell `ε(Q_0 + shift)`.
    pub linf_defect_cell: f64,
    /// Same with the chosen corrector.
    pub linf_defect_cell_chosen: f64,
    pub tilde_h1: f64,
    pub g_eps_l2: f64,
    pub u_l2: f64,
    pub iterations: usize,
    /// `sqrt(C_ε)` and the ratio `||φ||_{L²} / (sqrt(C_ε) |φ|_{H¹})`.
    pub coupling: Option<(f64, f64)>,
}

pub const CSV_HEADER: &str =
    "epsilon,h,l2_err,h1_err,linf_err,l2_err_per,h1_err_per,linf_err_per,linf_defect_cell,tilde_h1,g_eps_l2";

/// Columns that receive a fitted slope.
pub const RATE_COLUMNS: [&str; 8] = [
    "l2_err",
    "h1_err",
    "linf_err",
    "l2_err_per",
    "h1_err_per",
    "linf_err_per",
    "linf_defect_cell",
    "tilde_h1",
];

impl ConvergenceRow {
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "l2_err" => self.err.l2,
            "h1_err" => self.err.h1,
            "linf_err" => self.err.linf,
            "l2_err_per" => self.err_per.l2,
            "h1_err_per" => self.err_per.h1,
            "linf_err_per" => self.err_per.linf,
            "linf_defect_cell" => self.linf_defect_cell,
            "tilde_h1" => self.tilde_h1,
            "g_eps_l2" => self.g_eps_l2,
            "u_l2" => self.u_l2,
            _ => return None,
        })
    }

    pub fn rate_eligible(&self) -> bool {
        self.cells >= RATE_CELLS_PER_EPS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub choice: CorrectorChoice,
    /// Sorted by decreasing ε.
    pub rows: Vec<ConvergenceRow>,
    /// Slope per rate column; `None` when a value is not positive.
    pub slopes: Vec<(&'static str, Option<RateFit>)>,
}

impl ConvergenceReport {
    pub fn from_rows(choice: CorrectorChoice, mut rows: Vec<ConvergenceRow>) -> Result<Self, HomogenizeError> {
        rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        let eligible: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.rate_eligible()).collect();
        if eligible.len() < 2 {
            return Err(HomogenizeError::Levels {
                needed: 2,
                found: eligible.len(),
            });
        }
        let slopes = RATE_COLUMNS
            .iter()
            .map(|&name| {
                let pairs: Vec<(f64, f64)> = eligible.iter().map(|r| (r.eps, r.column(name).unwrap())).collect();
                (name, fit_rate(&pairs).ok())
            })
            .collect();
        Ok(ConvergenceReport { choice, rows, slopes })
    }

    /// Rows with `e = c ε^rate` in every column; used to check the plumbing.
    pub fn synthetic(eps_inv: &[usize], c: f64, rate: f64) -> Result<Self, HomogenizeError> {
        let rows = eps_inv
            .iter()
            .map(|&m| {
                let eps = 1.0 / m as f64;
                let e = c * eps.powf(rate);
                let norms = Norms { l2: e, h1: e, linf: e };
                ConvergenceRow {
                    eps,
                    h: eps / RATE_CELLS_PER_EPS as f64,
                    cells: RATE_CELLS_PER_EPS,
                    err: norms,
                    err_per: norms,
                    linf_defect_cell: e,
                    linf_defect_cell_chosen: e,
                    tilde_h1: e,
                    g_eps_l2: e,
                    u_l2: e,
                    iterations: 0,
                    coupling: None,
                }
            })
            .collect();
        ConvergenceReport::from_rows(CorrectorChoice::Full, rows)
    }

    pub fn slope(&self, name: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, f)| f.map(|f| f.slope))
    }

    pub fn fit(&self, name: &str) -> Option<RateFit> {
        self.slopes.iter().find(|(n, _)| *n == name).and_then(|(_, f)| *f)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let cols = [
                r.eps,
                r.h,
                r.err.l2,
                r.err.h1,
                r.err.linf,
                r.err_per.l2,
                r.err_per.h1,
                r.err_per.linf,
                r.linf_defect_cell,
                r.tilde_h1,
                r.g_eps_l2,
            ];
            let line: Vec<String> = cols.iter().map(|v| format!("{v:.10e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        for (name, fit) in &self.slopes {
            match fit {
                Some(f) => {
                    let _ = writeln!(
                        out,
                        "# slope {name} {:.6} intercept {:.6} max_residual {:.3e}",
                        f.slope, f.intercept, f.max_residual
                    );
                }
                None => {
                    let _ = writeln!(out, "# slope {name} n/a");
                }
            }
        }
        out
    }
}

fn run_level(plan: &StudyPlan, level: Level, set: &CorrectorSet) -> Result<ConvergenceRow, HomogenizeError> {
    let problem = plan.problem(level.eps_inv)?;
    let domain = build_domain(&problem, &plan.field, level.cells)?;
    let sol = solve_eps_problem(&domain, &plan.source)?;
    let chosen = set.choose(plan.choice);
    let approx = two_scale_approx(&domain, &plan.source, chosen)?;
    let approx_per = two_scale_approx(&domain, &plan.source, &set.periodic)?;
    let err = error_report_traced(&sol.u, &approx, &domain, &plan.source, chosen)?;
    let err_per = error_report_traced(&sol.u, &approx_per, &domain, &plan.source, &set.periodic)?;
    let diff = sol.u.sub(&approx)?;
    let diff_per = sol.u.sub(&approx_per)?;
    drop(approx);
    drop(approx_per);
    let coupling = if plan.coupling {
        let ray = rayleigh_min(&domain.cls, Constraint::HolesAndOuter)?;
        let root = ray.poincare_constant.sqrt();
        let ratio = if err.h1 > 0.0 { err.l2 / (root * err.h1) } else { 0.0 };
        Some((root, ratio))
    } else {
        None
    };
    Ok(ConvergenceRow {
        eps: problem.eps(),
        h: domain.h(),
        cells: level.cells,
        err,
        err_per,
        linf_defect_cell: linf_in_cell(&domain, diff_per.values(), CellIndex::ORIGIN),
        linf_defect_cell_chosen: linf_in_cell(&domain, diff.values(), CellIndex::ORIGIN),
        tilde_h1: tilde_h1(&domain, &plan.source, &set.full)?,
        g_eps_l2: residual_diagnostic(&domain, &plan.source, &set.full)?,
        u_l2: sol.u.norms().l2,
        iterations: sol.iterations,
        coupling,
    })
}

/// Runs every level (concurrently when `plan.jobs > 1`) and fits slopes.
pub fn convergence_study(plan: &StudyPlan) -> Result<ConvergenceReport, HomogenizeError> {
    let cache = prepare_for(plan)?;
    convergence_study_with(plan, &cache)
}

pub fn convergence_study_with(plan: &StudyPlan, cache: &CorrectorCache) -> Result<ConvergenceReport, HomogenizeError> {
    let levels = plan.sorted_levels();
    if levels.len() < 3 {
        return Err(HomogenizeError::Levels {
            needed: 3,
            found: levels.len(),
        });
    }
    for level in &levels {
        plan.problem(level.eps_inv)?;
        if level.cells < MIN_CELLS_PER_EPS {
            return Err(HomogenizeError::Resolution(level.cells));
        }
        if !cache.contains_key(&level.cells) {
            return Err(HomogenizeError::ResolutionMismatch {
                corrector: 0,
                macro_cells: level.cells,
            });
        }
    }
    let results = run_jobs(levels.len(), plan.jobs, |i| {
        run_level(plan, levels[i], &cache[&levels[i].cells])
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    ConvergenceReport::from_rows(plan.choice, rows)
}

/// Evaluates `job(0..count)` on up to `jobs` scoped threads; results keep
/// their index order.
pub fn run_jobs<T: Send>(count: usize, jobs: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = jobs.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = job(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

/// Slope window check: `lo <= slope <= hi`.
fn slope_verdict(name: &str, report: &ConvergenceReport, column: &str, lo: f64, hi: f64) -> Verdict {
    let s = report.slope(column).unwrap_or(f64::NAN);
    Verdict::new(name, s, format!("[{lo},{hi}]"), (lo..=hi).contains(&s))
}

/// Full-corrector rate checks: `H¹` slope near 2, `L²` and `L∞` near 3.
pub fn rate_verdicts(report: &ConvergenceReport) -> Vec<Verdict> {
    vec![
        slope_verdict("h1_slope_full", report, "h1_err", 1.7, 2.3),
        slope_verdict("l2_slope_full", report, "l2_err", 2.6, 3.4),
        slope_verdict("linf_slope_full", report, "linf_err", 2.6, 3.4),
    ]
}

/// Periodic-only comparison: the defect-cell `L∞` error decays like ε²
/// and stays above `0.2 c ε²` for the geometric-mean fit `c`, while the
/// global `H¹` slope moves by at most 0.2.
pub fn dichotomy_verdicts(report: &ConvergenceReport) -> Vec<Verdict> {
    let cell = slope_verdict("defect_cell_linf_slope_periodic", report, "linf_defect_cell", 1.7, 2.3);
    let eligible: Vec<&ConvergenceRow> = report.rows.iter().filter(|r| r.rate_eligible()).collect();
    let logs: Vec<f64> = eligible
        .iter()
        .map(|r| (r.linf_defect_cell / (r.eps * r.eps)).ln())
        .collect();
    let c = (logs.iter().sum::<f64>() / logs.len().max(1) as f64).exp();
    let worst = eligible
        .iter()
        .map(|r| r.linf_defect_cell / (c * r.eps * r.eps))
        .fold(f64::INFINITY, f64::min);
    let floor = Verdict::new("defect_cell_linf_floor_periodic", worst, ">=0.2".into(), worst >= 0.2);
    let a = report.slope("h1_err").unwrap_or(f64::NAN);
    let b = report.slope("h1_err_per").unwrap_or(f64::NAN);
    let shift = (a - b).abs();
    let h1 = Verdict::new("h1_slope_shift_periodic", shift, "<=0.2".into(), shift <= 0.2);
    vec![cell, floor, h1]
}

/// Constant-source run: the boundary layer limits the `H¹` slope to 3/2.
pub fn boundary_layer_verdict(report: &ConvergenceReport) -> Verdict {
    slope_verdict("h1_slope_constant_source", report, "h1_err", 1.2, 1.8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HoleShape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let f = SourceTerm::default_bump();
        let d = 1e-5;
        for p in [Point::new(0.6, 0.55), Point::new(0.3, 0.4), Point::new(0.5, 0.76)] {
            let gx = (f.value(p + Point::new(d, 0.0)) - f.value(p - Point::new(d, 0.0))) / (2.0 * d);
            let gy = (f.value(p + Point::new(0.0, d)) - f.value(p - Point::new(0.0, d))) / (2.0 * d);
            let g = f.gradient(p);
            assert!(close(g.x, gx, 1e-6) && close(g.y, gy, 1e-6), "{g:?} vs ({gx}, {gy})");
            let dd = 1e-4;
            let lap = [(dd, 0.0), (-dd, 0.0), (0.0, dd), (0.0, -dd)]
                .iter()
                .map(|&(a, b)| f.value(p + Point::new(a, b)))
                .sum::<f64>()
                - 4.0 * f.value(p);
            assert!(close(f.laplacian(p), lap / (dd * dd), 1e-5));
        }
        assert_eq!(f.value(Point::new(0.5, 0.5)), 1.0);
        assert_eq!(f.value(Point::new(0.9, 0.5)), 0.0);
        assert_eq!(f.laplacian(Point::new(0.1, 0.1)), 0.0);
    }

    #[test]
    fn fit_rate_examples() {
        let f = fit_rate(&[(0.5, 0.25), (0.25, 1.0 / 16.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        let f = fit_rate(&[(0.5, 0.125), (0.25, 1.0 / 64.0)]).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12);
        let f = fit_rate(&[(0.5, 0.3), (0.25, 0.3), (0.125, 0.3)]).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(fit_rate(&[(0.5, 0.0), (0.25, 1.0)]).is_err());
        assert!(fit_rate(&[(0.5, 1.0)]).is_err());
    }

    #[test]
    fn synthetic_report_has_exact_slopes() {
        let r = ConvergenceReport::synthetic(&[8, 16, 32], 0.7, 2.0).unwrap();
        for (_, fit) in &r.slopes {
            let fit = fit.unwrap();
            assert!((fit.slope - 2.0).abs() < 1e-12);
            assert!(fit.max_residual < 1e-12);
        }
        let csv = r.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(
            csv.lines().filter(|l| l.starts_with("# slope")).count(),
            RATE_COLUMNS.len()
        );
    }

    #[test]
    fn problem_validation() {
        assert!(MacroProblem::unit(SourceTerm::default_bump(), 8).is_ok());
        let wide = SourceTerm::Bump {
            center: Point::new(0.5, 0.5),
            radius: 0.5,
            amplitude: 1.0,
        };
        assert!(MacroProblem::unit(wide, 8).is_err());
        assert!(MacroProblem::new(
            Rect::new(0.0, 0.0, 1.1, 1.0),
            SourceTerm::Constant(1.0),
            4,
            Point::new(0.5, 0.5)
        )
        .is_err());
        let p = MacroProblem::unit(SourceTerm::Constant(1.0), 8).unwrap();
        assert_eq!(p.shift(), (4, 4));
        let field = PerforationField::periodic(HoleShape::disk(Point::new(0.5, 0.5), 0.25));
        assert!(matches!(
            build_domain(&p, &field, 8),
            Err(HomogenizeError::Resolution(8))
        ));
    }

    #[test]
    fn run_jobs_keeps_order() {
        let out = run_jobs(7, 3, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        assert_eq!(run_jobs(3, 1, |i| i + 1), vec![1, 2, 3]);
    }
}
