//! Correctors: the periodic cell problem `-Δw^per = 1`, the defect corrector
//! `w = w^per + w̃` on a truncated window of cells, and the diagnostics built
//! on them (energy, weak residual, admissible initializer, sup norms).
//!
//! Cell coordinates are used throughout; the window grid has the same
//! spacing `1/n` as the periodic cell so that `w̃ = w - w^per` is a nodewise
//! difference.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{
    dist_to_cell_boundary, minimal_alpha, CellIndex, GeometryError, HoleShape, PerforationField, Point, Region,
    INTERFACE_TOL,
};
use crate::grid::{
    assemble_laplacian, classify_nodes, gradient_sup, h1_bilinear, h1_seminorm_sq, h1_seminorm_sq_masked,
    h1_seminorm_sq_with, l2_norm_sq, quadrature_weights, CartesianGrid, Classification, Dir, GridError, ScalarField,
};
use crate::solver::{solve_with, SolveOptions, SolverError};
use crate::Verdict;

/// Relative residual used for corrector solves.
pub const CORRECTOR_TOL: f64 = 1e-12;
pub const MIN_CELL_RESOLUTION: usize = 64;
/// Parameter samples per hole boundary for the `Γ1` quadrature.
pub const GAMMA1_SAMPLES: usize = 720;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("cell resolution {0} is below the minimum of {MIN_CELL_RESOLUTION}")]
    Resolution(usize),
    #[error("post-solve residual {0:.3e} exceeds 1e-8")]
    Residual(f64),
    #[error("window radius must be at least 1, got {0}")]
    Window(i64),
    #[error("cut-off ramp in cell {cell} has width {width:.3e} < 2h = {min:.3e}")]
    UnresolvedRamp { cell: CellIndex, width: f64, min: f64 },
    #[error("trial function {index} is not admissible: {reason}")]
    InvalidTrial { index: usize, reason: String },
    #[error("resolutions differ: periodic n = {periodic}, requested n = {requested}")]
    ResolutionMismatch { periodic: usize, requested: usize },
}

/// Solution of the periodic cell problem on `n x n` nodes.
#[derive(Clone, Debug)]
pub struct PeriodicCorrector {
    pub pattern: HoleShape,
    pub n: usize,
    pub field: ScalarField,
    pub iterations: usize,
    /// `max |(-Δ_h w^per) - 1|` over the unknowns after the solve.
    pub residual_max: f64,
}

impl PeriodicCorrector {
    pub fn grid(&self) -> &CartesianGrid {
        self.field.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    /// Value at lattice point `(ix, iy) / n`, periodically wrapped.
    pub fn lattice(&self, ix: i64, iy: i64) -> f64 {
        let n = self.n as i64;
        let i = ix.rem_euclid(n) as usize;
        let j = iy.rem_euclid(n) as usize;
        self.field.values()[j * self.n + i]
    }

    /// Bilinear sample of the periodic extension; zero on the closed hole.
    pub fn value_at(&self, y: Point) -> f64 {
        let local = Point::new(y.x - y.x.floor(), y.y - y.y.floor());
        if self.pattern.signed_distance(local) <= INTERFACE_TOL {
            return 0.0;
        }
        self.grid().bilinear(self.values(), local).unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.field.max()
    }

    pub fn gradient_sup(&self) -> f64 {
        gradient_sup(&self.field.domain, self.values())
    }

    /// `∫_{Q∖O} w^per`.
    pub fn integral(&self) -> f64 {
        let w = quadrature_weights(&self.field.domain);
        w.iter().zip(self.values()).map(|(a, b)| a * b).sum()
    }

    /// `∫_{Q∖O} |∇w^per|²` in edge form.
    pub fn dirichlet_energy(&self) -> f64 {
        h1_seminorm_sq(&self.field.domain, self.values())
    }
}

/// Solves `-Δw^per = 1` on the periodic cell with `w^per = 0` on the hole.
pub fn solve_periodic_corrector(pattern: &HoleShape, n: usize) -> Result<PeriodicCorrector, CorrectorError> {
    solve_periodic_corrector_with(pattern, n, CORRECTOR_TOL)
}

/// As [`solve_periodic_corrector`] with a custom relative solver tolerance;
/// fine cells (n >= 512) stagnate just above `1e-12` in double precision.
pub fn solve_periodic_corrector_with(
    pattern: &HoleShape,
    n: usize,
    tol: f64,
) -> Result<PeriodicCorrector, CorrectorError> {
    if n < MIN_CELL_RESOLUTION {
        return Err(CorrectorError::Resolution(n));
    }
    let field = PerforationField::periodic(*pattern);
    field.validate()?;
    let grid = CartesianGrid::periodic_cell(n)?;
    let cls = classify_nodes(&grid, &field.periodic_region())?;
    let asm = assemble_laplacian(&cls)?;
    let ones = vec![1.0; grid.len()];
    let b = asm.rhs_homogeneous(&ones);
    let sol = solve_with(&asm.matrix, &b, None, SolveOptions { tol, max_iter: None })?;
    let r = asm.matrix.apply(&sol.x);
    let residual_max = r.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    if residual_max > 1e-8 {
        return Err(CorrectorError::Residual(residual_max));
    }
    let values = asm.scatter(&sol.x, &|_| 0.0);
    Ok(PeriodicCorrector {
        pattern: *pattern,
        n,
        field: ScalarField::new(Arc::new(cls), values)?,
        iterations: sol.iterations,
        residual_max,
    })
}

/// The truncated window `[-R, R+1]^2` of cells, classified against the full
/// perforation, together with `w^per` sampled on its nodes.
#[derive(Clone, Debug)]
pub struct Window {
    pub radius: i64,
    pub n: usize,
    pub domain: Arc<Classification>,
    /// `w^per` at every node (zero inside the periodic holes).
    pub per_values: Vec<f64>,
    /// Node lies in `O^per`.
    pub per_solid: Vec<bool>,
    pub weights: Vec<f64>,
}

impl Window {
    pub fn new(field: &PerforationField, per: &PeriodicCorrector, radius: i64) -> Result<Self, CorrectorError> {
        if radius < 1 {
            return Err(CorrectorError::Window(radius));
        }
        let n = per.n;
        let cells = (2 * radius + 1) as usize;
        let h = 1.0 / n as f64;
        let origin = Point::new(-radius as f64, -radius as f64);
        let grid = CartesianGrid::rectangle(origin, h, cells * n, cells * n)?;
        let cls = classify_nodes(&grid, field)?;
        let per_values: Vec<f64> = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.ij(k);
                per.lattice(i as i64, j as i64)
            })
            .collect();
        let per_cls = &per.field.domain;
        let per_solid = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.ij(k);
                per_cls.is_solid((j % n) * n + i % n)
            })
            .collect();
        let weights = quadrature_weights(&cls);
        Ok(Window {
            radius,
            n,
            domain: Arc::new(cls),
            per_values,
            per_solid,
            weights,
        })
    }

    pub fn grid(&self) -> &CartesianGrid {
        &self.domain.grid
    }

    /// Lattice offset of node `(0, 0)`.
    pub fn offset(&self) -> i64 {
        self.radius * self.n as i64
    }

    /// Node holding lattice point `(ix, iy)`, if inside the window.
    pub fn node_of_lattice(&self, ix: i64, iy: i64) -> Option<usize> {
        let (i, j) = (ix + self.offset(), iy + self.offset());
        let g = self.grid();
        if i < 0 || j < 0 || i >= g.nx as i64 || j >= g.ny as i64 {
            None
        } else {
            Some(g.index(i as usize, j as usize))
        }
    }

    /// Cell containing node `k` (faces belong to the cell above/right).
    pub fn cell_of(&self, k: usize) -> CellIndex {
        let (i, j) = self.grid().ij(k);
        let n = self.n as i64;
        CellIndex::new(
            (i as i64).div_euclid(n) - self.radius,
            (j as i64).div_euclid(n) - self.radius,
        )
    }

    /// `g̃` at node `k`: 1 on `O^per ∖ O`, -1 on `O ∖ O^per`, else 0.
    pub fn g_tilde(&self, k: usize) -> f64 {
        match (self.per_solid[k], self.domain.is_solid(k)) {
            (true, false) => 1.0,
            (false, true) => -1.0,
            _ => 0.0,
        }
    }

    /// Points of `Γ1` inside the window with arc-length weights and the unit
    /// normal pointing out of the periodic hole.
    pub fn gamma1_samples(&self, field: &PerforationField) -> Vec<(Point, Point, f64)> {
        let mut out = Vec::new();
        for k in CellIndex::window(self.radius) {
            if !field.is_perturbed(k) {
                continue;
            }
            let per = field.periodic_hole_at(k);
            let hole = field.hole_at(k);
            let dt = 2.0 * PI / GAMMA1_SAMPLES as f64;
            for s in 0..GAMMA1_SAMPLES {
                let t = s as f64 * dt;
                let (b, nu) = per.boundary_point(t);
                if hole.signed_distance(b) > INTERFACE_TOL {
                    out.push((b, nu, per.speed(t) * dt));
                }
            }
        }
        out
    }

    /// `∫_{Γ1} ∂w^per/∂n|_ext v`, with `n` the exterior normal of the
    /// perforated region (pointing into the periodic hole). The normal
    /// derivative is the one-sided quadratic difference from distances
    /// `2h` and `4h`, far enough out that bilinear samples of `w^per` avoid
    /// solid nodes.
    pub fn gamma1_term(&self, field: &PerforationField, per: &PeriodicCorrector, v: &[f64]) -> f64 {
        let s = 2.0 * self.grid().h;
        self.gamma1_samples(field)
            .into_iter()
            .map(|(b, nu, ds)| {
                let f1 = per.value_at(b + nu * s);
                let f2 = per.value_at(b + nu * (2.0 * s));
                let outward = (4.0 * f1 - f2) / (2.0 * s);
                let vb = self.grid().bilinear(v, b).unwrap_or(0.0);
                -outward * vb * ds
            })
            .sum()
    }

    /// `∫_{R²∖O} g̃ v`.
    pub fn source_term(&self, v: &[f64]) -> f64 {
        (0..v.len())
            .filter(|&k| self.per_solid[k] && !self.domain.is_solid(k))
            .map(|k| self.weights[k] * v[k])
            .sum()
    }

    /// Boundary closure of `w̃` on `∂O`: `-w^per` at the crossing point.
    fn tilde_trace<'a>(&'a self, per: &'a PeriodicCorrector) -> impl Fn(usize, Point) -> f64 + 'a {
        move |_, b| -per.value_at(b)
    }

    /// The three terms of the energy of `w̃` (given at every window node).
    pub fn energy(&self, field: &PerforationField, per: &PeriodicCorrector, tilde: &[f64]) -> Energy {
        let gradient = 0.5 * h1_seminorm_sq_with(&self.domain, tilde, &self.tilde_trace(per));
        Energy {
            gradient,
            boundary: self.gamma1_term(field, per, tilde),
            source: self.source_term(tilde),
        }
    }

    /// `max_v |∫∇w̃·∇v + ∫_{Γ1} ∂_n w^per v - ∫ g̃ v| / ||v||_{H¹}` over the
    /// trials, each a list of `(node, value)` pairs.
    pub fn weak_residual(
        &self,
        field: &PerforationField,
        per: &PeriodicCorrector,
        tilde: &[f64],
        trials: &[Vec<(usize, f64)>],
    ) -> Result<f64, CorrectorError> {
        let mut v = vec![0.0; self.domain.len()];
        let mut worst = 0.0f64;
        for (index, trial) in trials.iter().enumerate() {
            for &(k, val) in trial {
                if val == 0.0 {
                    continue;
                }
                if k >= v.len() {
                    return Err(CorrectorError::InvalidTrial {
                        index,
                        reason: format!("node {k} outside the window"),
                    });
                }
                if self.domain.is_solid(k) || self.grid().is_outer(k) {
                    return Err(CorrectorError::InvalidTrial {
                        index,
                        reason: format!("nonzero at node {k} on a hole or on the window edge"),
                    });
                }
                v[k] = val;
            }
            let norm = (h1_seminorm_sq(&self.domain, &v) + l2_norm_sq(&self.weights, &v)).sqrt();
            if norm > 0.0 {
                let a = h1_bilinear(&self.domain, tilde, &v, &self.tilde_trace(per));
                let r = a + self.gamma1_term(field, per, &v) - self.source_term(&v);
                worst = worst.max(r.abs() / norm);
            }
            for &(k, _) in trial {
                if k < v.len() {
                    v[k] = 0.0;
                }
            }
        }
        Ok(worst)
    }

    /// Up to `count` nodal hat functions at nodes whose five-point stencil is
    /// regular in both the perturbed and the periodic geometry and lies in
    /// the window interior, spread evenly over the eligible nodes.
    pub fn interior_hats(&self, count: usize) -> Vec<Vec<(usize, f64)>> {
        let g = self.grid();
        let regular = |k: usize| {
            !self.domain.is_solid(k) && !self.domain.is_cut(k) && !g.is_outer(k) && {
                Dir::ALL.iter().all(|&d| {
                    let nb = g.neighbor(k, d).unwrap();
                    !self.domain.is_solid(nb) && !self.domain.is_cut(nb) && self.per_solid[nb] == self.per_solid[k]
                })
            }
        };
        let eligible: Vec<usize> = (0..g.len()).filter(|&k| regular(k)).collect();
        if eligible.is_empty() || count == 0 {
            return Vec::new();
        }
        let step = (eligible.len() / count).max(1);
        eligible
            .iter()
            .step_by(step)
            .take(count)
            .map(|&k| vec![(k, 1.0)])
            .collect()
    }
}

/// Terms of `J(w̃) = ½∫|∇w̃|² + ∫_{Γ1} ∂_n w^per w̃ - ∫ g̃ w̃`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy {
    pub gradient: f64,
    pub boundary: f64,
    pub source: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.gradient + self.boundary - self.source
    }
}

#[derive(Clone, Debug, Default)]
pub struct DefectOptions {
    pub tol: Option<f64>,
    /// Initial iterate for `w` at every window node (default `w^per`).
    pub initial: Option<Vec<f64>>,
    /// Source per window node replacing `g = 1`.
    pub source: Option<Vec<f64>>,
}

/// `w` on the window with `w = 0` on every hole and `w = w^per` on the
/// window edge.
#[derive(Clone, Debug)]
pub struct DefectCorrector {
    pub window: Window,
    pub w: Vec<f64>,
    /// `w - w^per` at every node; equals `-w^per` inside `O`.
    pub tilde: Vec<f64>,
    pub iterations: usize,
}

pub fn solve_defect_corrector(
    field: &PerforationField,
    per: &PeriodicCorrector,
    radius: i64,
) -> Result<DefectCorrector, CorrectorError> {
    solve_defect_corrector_with(field, per, radius, &DefectOptions::default())
}

pub fn solve_defect_corrector_with(
    field: &PerforationField,
    per: &PeriodicCorrector,
    radius: i64,
    opts: &DefectOptions,
) -> Result<DefectCorrector, CorrectorError> {
    field.validate()?;
    let window = Window::new(field, per, radius)?;
    let asm = assemble_laplacian(&window.domain)?;
    let len = window.domain.len();
    let source = match &opts.source {
        Some(s) if s.len() != len => {
            return Err(GridError::LengthMismatch {
                expected: len,
                found: s.len(),
            }
            .into())
        }
        Some(s) => s.clone(),
        None => vec![1.0; len],
    };
    let outer = |k: usize| window.per_values[k];
    let b = asm.rhs(&source, &|_| 0.0, &outer);
    let x0 = match &opts.initial {
        Some(v) if v.len() != len => {
            return Err(GridError::LengthMismatch {
                expected: len,
                found: v.len(),
            }
            .into())
        }
        Some(v) => asm.gather(v),
        None => asm.gather(&window.per_values),
    };
    let sol = solve_with(
        &asm.matrix,
        &b,
        Some(&x0),
        SolveOptions {
            tol: opts.tol.unwrap_or(CORRECTOR_TOL),
            max_iter: None,
        },
    )?;
    let w = asm.scatter(&sol.x, &outer);
    let tilde = w.iter().zip(&window.per_values).map(|(a, b)| a - b).collect();
    Ok(DefectCorrector {
        window,
        w,
        tilde,
        iterations: sol.iterations,
    })
}

impl DefectCorrector {
    pub fn radius(&self) -> i64 {
        self.window.radius
    }

    pub fn n(&self) -> usize {
        self.window.n
    }

    pub fn grid(&self) -> &CartesianGrid {
        self.window.grid()
    }

    pub fn field(&self) -> ScalarField {
        ScalarField::new(self.window.domain.clone(), self.w.clone()).expect("window sizes agree")
    }

    /// `w̃` restricted to `R² ∖ O`.
    pub fn tilde_field(&self) -> ScalarField {
        ScalarField::new(self.window.domain.clone(), self.tilde.clone()).expect("window sizes agree")
    }

    pub fn tilde_l2(&self) -> f64 {
        l2_norm_sq(&self.window.weights, &self.tilde).sqrt()
    }

    pub fn tilde_linf(&self) -> f64 {
        self.tilde_field().norms().linf
    }

    /// `|w̃|_{H¹(R²∖O)}` with the trace `-w^per` on `∂O`.
    pub fn tilde_h1(&self, per: &PeriodicCorrector) -> f64 {
        h1_seminorm_sq_with(&self.window.domain, &self.tilde, &self.window.tilde_trace(per)).sqrt()
    }

    /// `||w̃||_{H¹}` over the cells with `|k|_inf = ring`.
    pub fn ring_h1(&self, per: &PeriodicCorrector, ring: i64) -> f64 {
        let mask = |k: usize| self.window.cell_of(k).linf() == ring;
        let semi = h1_seminorm_sq_masked(&self.window.domain, &self.tilde, &self.window.tilde_trace(per), &mask);
        let l2: f64 = (0..self.tilde.len())
            .filter(|&k| mask(k))
            .map(|k| self.window.weights[k] * self.tilde[k] * self.tilde[k])
            .sum();
        (semi + l2).sqrt()
    }

    pub fn energy(&self, field: &PerforationField, per: &PeriodicCorrector) -> Energy {
        self.window.energy(field, per, &self.tilde)
    }

    pub fn weak_residual(
        &self,
        field: &PerforationField,
        per: &PeriodicCorrector,
        trials: &[Vec<(usize, f64)>],
    ) -> Result<f64, CorrectorError> {
        self.window.weak_residual(field, per, &self.tilde, trials)
    }
}

/// Quintic smoothstep `6t⁵ - 15t⁴ + 10t³` on `[0, 1]`; its slope is at most
/// `15/8`.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

pub const SMOOTHSTEP_MAX_SLOPE: f64 = 15.0 / 8.0;

/// An admissible element of the minimization space: `-χ_k w^per` around
/// every perturbed hole.
#[derive(Clone, Debug)]
pub struct Initializer {
    /// Values at every window node, `-w^per` inside `O`.
    pub values: Vec<f64>,
    /// Ramp width per perturbed cell.
    pub widths: Vec<(CellIndex, f64)>,
    /// `||∇φ||²_{L²(R²∖O)}`.
    pub gradient_sq: f64,
    /// `Σ_k (|χ'|_∞ sup|w^per| / ε_k + ||∇w^per||_∞)² |band_k|` over the
    /// ramp bands.
    pub bound: f64,
}

/// `χ_k = 1` on `O_k`, ramping to 0 across the band of width
/// `ε_k = min(α_k, δ_k / 2)` outside it.
pub fn build_initializer(
    field: &PerforationField,
    per: &PeriodicCorrector,
    window: &Window,
) -> Result<Initializer, CorrectorError> {
    let h = window.grid().h;
    let grid = window.grid();
    let mut values = vec![0.0; window.domain.len()];
    let mut widths = Vec::new();
    let grad_per = per.gradient_sup();
    let mut bound = 0.0;
    for k in CellIndex::window(window.radius) {
        if !field.is_perturbed(k) {
            continue;
        }
        let width = minimal_alpha(field, k).min(0.5 * dist_to_cell_boundary(field, k)?);
        if width < 2.0 * h {
            return Err(CorrectorError::UnresolvedRamp {
                cell: k,
                width,
                min: 2.0 * h,
            });
        }
        widths.push((k, width));
        let hole = field.hole_at(k);
        let n = window.n as i64;
        let off = window.offset();
        let (lo_i, lo_j) = ((k.i * n + off) as usize, (k.j * n + off) as usize);
        let mut band_area = 0.0;
        let mut band_sup = 0.0f64;
        for j in lo_j..=lo_j + window.n {
            for i in lo_i..=lo_i + window.n {
                let node = grid.index(i, j);
                let sd = hole.signed_distance(grid.point(node));
                let chi = if sd <= 0.0 { 1.0 } else { 1.0 - smoothstep(sd / width) };
                if chi > 0.0 {
                    values[node] = -chi * window.per_values[node];
                }
                if sd > 0.0 && sd < width {
                    band_area += window.weights[node];
                    band_sup = band_sup.max(window.per_values[node].abs());
                }
            }
        }
        bound += (SMOOTHSTEP_MAX_SLOPE * band_sup / width + grad_per).powi(2) * band_area;
    }
    // Nodes inside holes carry the trace value.
    for (node, v) in values.iter_mut().enumerate() {
        if window.domain.is_solid(node) {
            *v = -window.per_values[node];
        }
    }
    let gradient_sq = h1_seminorm_sq_with(&window.domain, &values, &window.tilde_trace(per));
    Ok(Initializer {
        values,
        widths,
        gradient_sq,
        bound,
    })
}

/// `w = w^per + w̃` as a function of the cell variable.
#[derive(Clone, Debug)]
pub struct CompositeCorrector {
    pub field: PerforationField,
    pub per: Arc<PeriodicCorrector>,
    pub defect: Option<Arc<DefectCorrector>>,
}

impl CompositeCorrector {
    pub fn new(field: PerforationField, per: Arc<PeriodicCorrector>, defect: Option<Arc<DefectCorrector>>) -> Self {
        CompositeCorrector { field, per, defect }
    }

    /// Only the periodic corrector, sampled against its own periodic holes.
    pub fn periodic_only(per: Arc<PeriodicCorrector>) -> Self {
        CompositeCorrector {
            field: PerforationField::periodic(per.pattern),
            per,
            defect: None,
        }
    }

    pub fn n(&self) -> usize {
        self.per.n
    }

    /// Exact nodal value at lattice point `(ix, iy) / n`.
    pub fn lattice(&self, ix: i64, iy: i64) -> f64 {
        if let Some(d) = &self.defect {
            if let Some(k) = d.window.node_of_lattice(ix, iy) {
                return d.w[k];
            }
        }
        self.per.lattice(ix, iy)
    }

    /// `w̃` at lattice point `(ix, iy) / n`; zero outside the window.
    pub fn tilde_lattice(&self, ix: i64, iy: i64) -> f64 {
        match &self.defect {
            Some(d) => d.window.node_of_lattice(ix, iy).map_or(0.0, |k| d.tilde[k]),
            None => 0.0,
        }
    }

    /// Bilinear sample at `y`: zero in a hole, window field inside the
    /// window, periodic extension outside it.
    pub fn sample(&self, y: Point) -> f64 {
        if self.field.contains(y) {
            return 0.0;
        }
        if let Some(d) = &self.defect {
            if let Some(v) = d.grid().bilinear(&d.w, y) {
                return v;
            }
        }
        self.per.value_at(y)
    }

    /// `||w||_∞` and the largest discrete gradient over the window plus one
    /// periodic cell.
    pub fn sup_norm_report(&self) -> SupNorms {
        let mut w = self.per.max().max(0.0);
        let mut grad = self.per.gradient_sup();
        if let Some(d) = &self.defect {
            w = w.max(d.w.iter().fold(0.0f64, |a, b| a.max(b.abs())));
            grad = grad.max(gradient_sup(&d.window.domain, &d.w));
        }
        SupNorms { w, grad }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupNorms {
    pub w: f64,
    pub grad: f64,
}

/// Resolution, window radii and thresholds for [`wellposedness_checks`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WellPosednessPlan {
    pub n: usize,
    /// Sup norms are compared between `base_radius` and `far_radius`,
    /// `||w̃||_{L²}` between `mid_radius` and `far_radius`.
    pub base_radius: i64,
    pub mid_radius: i64,
    pub far_radius: i64,
    pub trials: usize,
    pub zero_limit: f64,
    pub growth_limit: f64,
    pub residual_limit: f64,
    pub sup_limit: f64,
}

impl Default for WellPosednessPlan {
    fn default() -> Self {
        WellPosednessPlan {
            n: 64,
            base_radius: 4,
            mid_radius: 6,
            far_radius: 8,
            trials: 200,
            zero_limit: 1e-10,
            growth_limit: 0.01,
            residual_limit: 1e-6,
            sup_limit: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WellPosedness {
    /// Zero defect, window growth, energy ordering, weak residual.
    pub corrector: Vec<Verdict>,
    /// Sup norms of `w` and `∇w` under window doubling.
    pub sup_norms: Verdict,
}

fn relative_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Solves the defect corrector of `field` on three windows and checks the
/// no-defect limit, window-growth stability, `J(w̃) <= J(initializer)`, the
/// weak residual on interior hats and the sup-norm report.
pub fn wellposedness_checks(
    field: &PerforationField,
    plan: &WellPosednessPlan,
) -> Result<WellPosedness, CorrectorError> {
    let per = solve_periodic_corrector(&field.pattern, plan.n)?;
    let plain = PerforationField::periodic(field.pattern);
    let zero = solve_defect_corrector(&plain, &per, plan.base_radius.min(2))?.tilde_linf();

    let per = Arc::new(per);
    let sup =
        |d: DefectCorrector| CompositeCorrector::new(field.clone(), per.clone(), Some(Arc::new(d))).sup_norm_report();
    let base = sup(solve_defect_corrector(field, &per, plan.base_radius)?);
    let mid = solve_defect_corrector(field, &per, plan.mid_radius)?.tilde_l2();
    let far = solve_defect_corrector(field, &per, plan.far_radius)?;

    let growth = relative_change(mid, far.tilde_l2());
    let j_min = far.energy(field, &per).total();
    let j_init = far
        .window
        .energy(field, &per, &build_initializer(field, &per, &far.window)?.values)
        .total();
    let residual = far.weak_residual(field, &per, &far.window.interior_hats(plan.trials))?;
    let far_sup = sup(far);
    let sup_change = relative_change(base.w, far_sup.w).max(relative_change(base.grad, far_sup.grad));

    Ok(WellPosedness {
        corrector: vec![
            Verdict::new(
                "no_defect_tilde_linf",
                zero,
                format!("<={:e}", plan.zero_limit),
                zero <= plan.zero_limit,
            ),
            Verdict::new(
                "window_growth_tilde_l2",
                growth,
                format!("<{}", plan.growth_limit),
                growth < plan.growth_limit,
            ),
            Verdict::new(
                "energy_below_initializer",
                j_min - j_init,
                "<=0".into(),
                j_min <= j_init,
            ),
            Verdict::new(
                "weak_residual",
                residual,
                format!("<={:e}", plan.residual_limit),
                residual <= plan.residual_limit,
            ),
        ],
        sup_norms: Verdict::new(
            "sup_norm_window_doubling",
            sup_change,
            format!("<={}", plan.sup_limit),
            sup_change <= plan.sup_limit,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(r: f64) -> HoleShape {
        HoleShape::disk(Point::new(0.5, 0.5), r)
    }

    #[test]
    fn resolution_guard() {
        assert!(matches!(
            solve_periodic_corrector(&centered(0.25), 32),
            Err(CorrectorError::Resolution(32))
        ));
    }

    #[test]
    fn periodic_symmetry_and_residual() {
        let per = solve_periodic_corrector(&centered(0.25), 64).unwrap();
        assert!(per.residual_max <= 1e-8);
        let n = per.n as i64;
        for j in 0..n {
            for i in 0..n {
                let v = per.lattice(i, j);
                assert!((v - per.lattice(n - i, j)).abs() < 1e-9);
                assert!((v - per.lattice(j, i)).abs() < 1e-9);
            }
        }
        assert!(per.field.min() >= 0.0);
    }

    #[test]
    fn sampling_rules() {
        let per = Arc::new(solve_periodic_corrector(&centered(0.25), 64).unwrap());
        let w = CompositeCorrector::periodic_only(per.clone());
        assert_eq!(w.sample(Point::new(0.5, 0.5)), 0.0);
        let y0 = Point::new(0.1, 0.23);
        assert!((w.sample(y0 + Point::new(7.0, 0.0)) - w.sample(y0)).abs() < 1e-14);
        assert_eq!(w.lattice(3, 5), per.lattice(67, -59));
    }

    #[test]
    fn smoothstep_shape() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        let slope = (smoothstep(0.5 + 1e-6) - smoothstep(0.5 - 1e-6)) / 2e-6;
        assert!((slope - SMOOTHSTEP_MAX_SLOPE).abs() < 1e-6);
    }

    #[test]
    fn no_defect_gives_zero_tilde_and_energy() {
        let per = solve_periodic_corrector(&centered(0.25), 64).unwrap();
        let field = PerforationField::periodic(centered(0.25));
        let d = solve_defect_corrector(&field, &per, 1).unwrap();
        assert!(
            d.tilde_linf() <= 1e-10,
            "{} {} {}",
            d.tilde_linf(),
            d.iterations,
            per.iterations
        );
        assert_eq!(d.energy(&field, &per).total(), 0.0);
        let init = build_initializer(&field, &per, &d.window).unwrap();
        assert!(init.widths.is_empty());
        assert!(init.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trial_support_is_checked() {
        let per = solve_periodic_corrector(&centered(0.25), 64).unwrap();
        let field = PerforationField::golden();
        let d = solve_defect_corrector(&field, &per, 1).unwrap();
        let center = d.window.node_of_lattice(32, 32).unwrap();
        assert!(d.window.domain.is_solid(center));
        assert!(matches!(
            d.weak_residual(&field, &per, &[vec![(center, 1.0)]]),
            Err(CorrectorError::InvalidTrial { .. })
        ));
        assert_eq!(d.weak_residual(&field, &per, &[vec![]]).unwrap(), 0.0);
    }
}
