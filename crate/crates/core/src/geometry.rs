//! Perforation geometry: hole shapes, the periodic lattice with localized
//! defects, Minkowski enlargement/reduction and the interface pieces that
//! split hole boundaries.
//!
//! All lengths are in cell units: the reference cell is `Q = (0,1)^2` and
//! cell `k` is `Q + k`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use thiserror::Error;

use crate::Verdict;

/// Tolerance used by [`classify_interface`] to decide that a point lies on a
/// boundary.
pub const INTERFACE_TOL: f64 = 1e-9;

/// Planar point or vector.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Rotates by `angle` radians counter-clockwise.
    pub fn rotated(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Integer lattice index of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CellIndex {
    pub i: i64,
    pub j: i64,
}

impl CellIndex {
    pub const ORIGIN: CellIndex = CellIndex { i: 0, j: 0 };

    pub const fn new(i: i64, j: i64) -> Self {
        CellIndex { i, j }
    }

    /// The cell containing `p` (faces belong to the cell above/right).
    pub fn containing(p: Point) -> Self {
        CellIndex::new(p.x.floor() as i64, p.y.floor() as i64)
    }

    pub fn linf(self) -> i64 {
        self.i.abs().max(self.j.abs())
    }

    pub fn corner(self) -> Point {
        Point::new(self.i as f64, self.j as f64)
    }

    /// All indices with `|k|_inf <= radius`, row by row.
    pub fn window(radius: i64) -> impl Iterator<Item = CellIndex> {
        (-radius..=radius).flat_map(move |j| (-radius..=radius).map(move |i| CellIndex::new(i, j)))
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("hole in cell {cell} touches or crosses the cell boundary (clearance {clearance:.3e})")]
    A1Violation { cell: CellIndex, clearance: f64 },
    #[error("invalid hole shape: {0}")]
    InvalidShape(String),
    #[error("invalid decay rule: {0}")]
    InvalidDecay(String),
    #[error("point {0:?} is not on any interface")]
    NotOnInterface(Point),
    #[error("window radius must be at least 1")]
    EmptyWindow,
}

/// Anything that can answer "signed distance to my boundary": negative
/// inside, zero on the boundary, positive outside.
pub trait Region: Sync {
    fn signed_distance(&self, p: Point) -> f64;

    fn contains(&self, p: Point) -> bool {
        self.signed_distance(p) < 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Ellipse,
}

/// A disk or rotated ellipse.
///
/// For ellipses `signed_distance` is the level-set surrogate
/// `(rho - 1) / |grad rho|` with `rho` the normalized elliptic radius: exact in
/// sign, approximate in magnitude, and exact for circles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoleShape {
    pub kind: ShapeKind,
    pub center: Point,
    pub radii: (f64, f64),
    pub rotation: f64,
}

impl HoleShape {
    pub fn disk(center: Point, radius: f64) -> Self {
        HoleShape {
            kind: ShapeKind::Disk,
            center,
            radii: (radius, radius),
            rotation: 0.0,
        }
    }

    pub fn ellipse(center: Point, a: f64, b: f64, rotation: f64) -> Self {
        HoleShape {
            kind: ShapeKind::Ellipse,
            center,
            radii: (a, b),
            rotation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (a, b) = self.radii;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(GeometryError::InvalidShape(format!(
                "radii must be positive, got ({a}, {b})"
            )));
        }
        if self.kind == ShapeKind::Disk && a != b {
            return Err(GeometryError::InvalidShape("disk radii must be equal".into()));
        }
        if !(self.center.x.is_finite() && self.center.y.is_finite() && self.rotation.is_finite()) {
            return Err(GeometryError::InvalidShape("non-finite center or rotation".into()));
        }
        Ok(())
    }

    pub fn translated(&self, by: Point) -> Self {
        HoleShape {
            center: self.center + by,
            ..*self
        }
    }

    pub fn is_disk(&self) -> bool {
        self.kind == ShapeKind::Disk || self.radii.0 == self.radii.1
    }

    pub fn area(&self) -> f64 {
        PI * self.radii.0 * self.radii.1
    }

    /// Radius of the largest inscribed disk.
    pub fn inradius(&self) -> f64 {
        self.radii.0.min(self.radii.1)
    }

    /// Enlarges (or shrinks, for negative `delta`) both radii.
    pub fn with_radii_offset(&self, delta: f64) -> Self {
        HoleShape {
            radii: (self.radii.0 + delta, self.radii.1 + delta),
            ..*self
        }
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (a, b) = self.radii;
        let (s, c) = self.rotation.sin_cos();
        ((a * c).hypot(b * s), (a * s).hypot(b * c))
    }

    /// Boundary point and outward unit normal at parameter `t` in `[0, 2pi)`.
    pub fn boundary_point(&self, t: f64) -> (Point, Point) {
        let (a, b) = self.radii;
        let (s, c) = t.sin_cos();
        let local = Point::new(a * c, b * s);
        let normal_local = Point::new(b * c, a * s);
        let normal = normal_local.rotated(self.rotation);
        (
            self.center + local.rotated(self.rotation),
            normal * (1.0 / normal.norm()),
        )
    }

    /// Arc-length density `|dp/dt|` at parameter `t`.
    pub fn speed(&self, t: f64) -> f64 {
        let (a, b) = self.radii;
        let (s, c) = t.sin_cos();
        (a * s).hypot(b * c)
    }

    pub fn signed_distance(&self, p: Point) -> f64 {
        let q = p - self.center;
        if self.is_disk() {
            return q.norm() - self.radii.0;
        }
        let q = q.rotated(-self.rotation);
        let (a, b) = self.radii;
        let rho = (q.x / a).hypot(q.y / b);
        if rho < 1e-14 {
            return -self.inradius();
        }
        let grad = Point::new(q.x / (a * a), q.y / (b * b)).norm() / rho;
        (rho - 1.0) / grad
    }

    /// Minkowski enlargement: points closer than `alpha` to the shape.
    pub fn enlarge(&self, alpha: f64) -> OffsetRegion {
        OffsetRegion {
            shape: *self,
            offset: alpha.max(0.0),
        }
    }

    /// Minkowski reduction: points of the shape deeper than `alpha`.
    pub fn reduce(&self, alpha: f64) -> OffsetRegion {
        OffsetRegion {
            shape: *self,
            offset: -alpha.max(0.0),
        }
    }
}

impl Region for HoleShape {
    fn signed_distance(&self, p: Point) -> f64 {
        HoleShape::signed_distance(self, p)
    }
}

/// Level set `{ signed_distance < offset }` of a hole shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetRegion {
    pub shape: HoleShape,
    pub offset: f64,
}

impl Region for OffsetRegion {
    fn signed_distance(&self, p: Point) -> f64 {
        self.shape.signed_distance(p) - self.offset
    }
}

/// Geometric decay of the defect amplitude, `alpha_k = amplitude * ratio^{|k|_inf}`.
/// Cells governed by the rule get their pattern radii enlarged by `alpha_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayRule {
    pub amplitude: f64,
    pub ratio: f64,
}

impl DecayRule {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(GeometryError::InvalidDecay(format!(
                "amplitude {} must be >= 0",
                self.amplitude
            )));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(GeometryError::InvalidDecay(format!(
                "ratio {} must lie in (0, 1)",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, k: CellIndex) -> f64 {
        self.amplitude * self.ratio.powi(k.linf() as i32)
    }

    /// `sum_{|k|_inf > radius} alpha_k`, using that the shell `|k|_inf = m`
    /// holds `8m` cells.
    pub fn tail_sum(&self, radius: i64) -> f64 {
        let t = self.ratio;
        let m = (radius + 1) as f64;
        self.amplitude * 8.0 * t.powf(m) * (m - (m - 1.0) * t) / ((1.0 - t) * (1.0 - t))
    }

    /// `sum_k alpha_k` over the whole lattice.
    pub fn total_sum(&self) -> f64 {
        let t = self.ratio;
        self.amplitude * (1.0 + 8.0 * t / ((1.0 - t) * (1.0 - t)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DefectFamily {
    /// Hole shapes in local cell coordinates (center inside the unit cell).
    pub overrides: BTreeMap<CellIndex, HoleShape>,
    pub decay: Option<DecayRule>,
}

impl DefectFamily {
    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty() && self.decay.map_or(true, |d| d.amplitude == 0.0)
    }
}

/// The full perforation map `k -> O_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerforationField {
    /// Reference hole in local coordinates of the unit cell.
    pub pattern: HoleShape,
    pub defects: DefectFamily,
}

impl PerforationField {
    pub fn periodic(pattern: HoleShape) -> Self {
        PerforationField {
            pattern,
            defects: DefectFamily::default(),
        }
    }

    pub fn with_override(mut self, k: CellIndex, shape: HoleShape) -> Self {
        self.defects.overrides.insert(k, shape);
        self
    }

    pub fn with_decay(mut self, rule: DecayRule) -> Self {
        self.defects.decay = Some(rule);
        self
    }

    /// Centered disk of radius 0.25 everywhere, radius 0.32 in cell (0, 0).
    pub fn golden() -> Self {
        let center = Point::new(0.5, 0.5);
        PerforationField::periodic(HoleShape::disk(center, 0.25))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(center, 0.32))
    }

    /// Checks the pattern, every override and the decay rule.
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.pattern.validate()?;
        check_clearance(&self.pattern, CellIndex::ORIGIN)?;
        for (&k, shape) in &self.defects.overrides {
            shape.validate()?;
            check_clearance(shape, k)?;
        }
        if let Some(rule) = self.defects.decay {
            rule.validate()?;
            // The largest decayed hole sits at |k| = 0 unless overridden.
            let widest = self.pattern.with_radii_offset(rule.amplitude);
            check_clearance(&widest, CellIndex::ORIGIN)?;
        }
        Ok(())
    }

    /// `O_k^per = O_0^per + k`, in global coordinates.
    pub fn periodic_hole_at(&self, k: CellIndex) -> HoleShape {
        self.pattern.translated(k.corner())
    }

    /// `O_k`, in global coordinates.
    pub fn hole_at(&self, k: CellIndex) -> HoleShape {
        if let Some(shape) = self.defects.overrides.get(&k) {
            return shape.translated(k.corner());
        }
        match self.defects.decay {
            Some(rule) if rule.amplitude > 0.0 => self.pattern.with_radii_offset(rule.alpha(k)).translated(k.corner()),
            _ => self.periodic_hole_at(k),
        }
    }

    /// Whether `O_k` differs from `O_k^per`.
    pub fn is_perturbed(&self, k: CellIndex) -> bool {
        self.hole_at(k) != self.periodic_hole_at(k)
    }

    /// Perturbed cells with `|k|_inf <= radius`.
    pub fn perturbed_cells(&self, radius: i64) -> Vec<CellIndex> {
        CellIndex::window(radius).filter(|&k| self.is_perturbed(k)).collect()
    }

    /// The periodic reference geometry `O^per` as a region.
    pub fn periodic_region(&self) -> PeriodicHoles<'_> {
        PeriodicHoles(self)
    }
}

impl Region for PerforationField {
    /// Distance to the union of holes; holes are confined to their cells,
    /// so the 3x3 block of cells around `p` suffices.
    fn signed_distance(&self, p: Point) -> f64 {
        lattice_distance(p, |k| self.hole_at(k))
    }
}

/// Minimum over the holes of the 3x3 block around `p`. Every hole lies in its
/// own cell, so neighbours only matter when `p` is farther from its own hole
/// than from the nearest cell face.
fn lattice_distance(p: Point, hole: impl Fn(CellIndex) -> HoleShape) -> f64 {
    let c = CellIndex::containing(p);
    let own = hole(c).signed_distance(p);
    let local = p - c.corner();
    let face = local.x.min(1.0 - local.x).min(local.y).min(1.0 - local.y);
    if own <= face {
        return own;
    }
    let mut best = own;
    for dj in -1..=1 {
        for di in -1..=1 {
            if di != 0 || dj != 0 {
                best = best.min(hole(CellIndex::new(c.i + di, c.j + dj)).signed_distance(p));
            }
        }
    }
    best
}

/// View of a field's unperturbed lattice `O^per`.
#[derive(Clone, Copy)]
pub struct PeriodicHoles<'a>(&'a PerforationField);

impl Region for PeriodicHoles<'_> {
    fn signed_distance(&self, p: Point) -> f64 {
        lattice_distance(p, |k| self.0.periodic_hole_at(k))
    }
}

/// Everything in the plane is a hole; used to express "v vanishes on Q".
#[derive(Clone, Copy, Debug, Default)]
pub struct Everywhere;

impl Region for Everywhere {
    fn signed_distance(&self, _p: Point) -> f64 {
        -1.0
    }
}

/// No holes at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct Nowhere;

impl Region for Nowhere {
    fn signed_distance(&self, _p: Point) -> f64 {
        f64::INFINITY
    }
}

fn check_clearance(shape: &HoleShape, k: CellIndex) -> Result<f64, GeometryError> {
    let (ex, ey) = shape.half_extents();
    let c = shape.center;
    let clearance = (c.x - ex).min(1.0 - c.x - ex).min(c.y - ey).min(1.0 - c.y - ey);
    if clearance > 0.0 {
        Ok(clearance)
    } else {
        Err(GeometryError::A1Violation { cell: k, clearance })
    }
}

/// `dist(O_k, dQ_k)` for the hole of cell `k`; errors when the hole touches
/// the cell faces.
pub fn dist_to_cell_boundary(field: &PerforationField, k: CellIndex) -> Result<f64, GeometryError> {
    let local = field.hole_at(k).translated(-k.corner());
    check_clearance(&local, k)
}

/// Smallest clearance over a window, the discrete `delta_0`.
pub fn min_cell_clearance(field: &PerforationField, radius: i64) -> Result<f64, GeometryError> {
    let mut best = f64::INFINITY;
    for k in CellIndex::window(radius) {
        best = best.min(dist_to_cell_boundary(field, k)?);
    }
    Ok(best)
}

/// Smallest `alpha` with `O^{per,-}(alpha) ⊂ O_k ⊂ O^{per,+}(alpha)`.
///
/// Closed form when both holes are disks; otherwise sampled on a fine grid of
/// the cell plus the boundary of `O_k`.
pub fn minimal_alpha(field: &PerforationField, k: CellIndex) -> f64 {
    let hole = field.hole_at(k);
    let per = field.periodic_hole_at(k);
    if hole.is_disk() && per.is_disk() {
        let d = (hole.center - per.center).norm();
        let (rk, rp) = (hole.radii.0, per.radii.0);
        // Enlargement needs d + r_k <= r_p + alpha, reduction d + r_p - alpha <= r_k.
        return (d + rk - rp).max(d + rp - rk).max(0.0);
    }
    let mut alpha: f64 = 0.0;
    let samples = 1440;
    for s in 0..samples {
        let t = 2.0 * PI * s as f64 / samples as f64;
        let (p, _) = hole.boundary_point(t);
        alpha = alpha.max(per.signed_distance(p));
    }
    let n = 256;
    let corner = k.corner();
    for j in 0..n {
        for i in 0..n {
            let p = corner + Point::new((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            let sp = per.signed_distance(p);
            if hole.contains(p) {
                alpha = alpha.max(sp);
            } else {
                alpha = alpha.max(-sp);
            }
        }
    }
    alpha.max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellA2 {
    pub cell: CellIndex,
    pub alpha_min: f64,
    /// Whether both inclusions held on every sample point.
    pub inclusion_ok: bool,
}

/// Outcome of [`check_alpha_sandwich`].
#[derive(Clone, Debug, PartialEq)]
pub struct SandwichReport {
    pub radius: i64,
    pub cells: Vec<CellA2>,
    /// `sum alpha_k` over the window.
    pub l1_partial_sum: f64,
    /// Upper bound of `sum alpha_k` outside the window (geometric tail of the
    /// decay rule; overrides outside the window are added exactly).
    pub tail_bound: f64,
    /// The sequence is summable: finitely many overrides and ratio < 1.
    pub summable: bool,
    /// The first cell whose hole touches the cell boundary, if any.
    pub violation: Option<CellIndex>,
}

impl SandwichReport {
    pub fn inclusion_ok(&self) -> bool {
        self.cells.iter().all(|c| c.inclusion_ok)
    }

    pub fn alpha(&self, k: CellIndex) -> Option<f64> {
        self.cells.iter().find(|c| c.cell == k).map(|c| c.alpha_min)
    }
}

/// Checks the defect sandwich on the window `|k|_inf <= radius`: minimal
/// sandwich width per cell, partial l1 sums with the tail bound, and the
/// sandwich inclusion on `samples_per_cell` random points per cell.
pub fn check_alpha_sandwich<R: Rng>(
    field: &PerforationField,
    radius: i64,
    samples_per_cell: usize,
    rng: &mut R,
) -> Result<SandwichReport, GeometryError> {
    if radius < 1 {
        return Err(GeometryError::EmptyWindow);
    }
    let mut violation = None;
    let mut cells = Vec::new();
    let mut l1 = 0.0;
    for k in CellIndex::window(radius) {
        if violation.is_none() && dist_to_cell_boundary(field, k).is_err() {
            violation = Some(k);
        }
        let alpha = minimal_alpha(field, k);
        l1 += alpha;
        let inclusion_ok = sandwich_holds(field, k, alpha, samples_per_cell, rng);
        cells.push(CellA2 {
            cell: k,
            alpha_min: alpha,
            inclusion_ok,
        });
    }
    let mut tail_bound = 0.0;
    if let Some(rule) = field.defects.decay {
        tail_bound += rule.tail_sum(radius);
    }
    for &k in field.defects.overrides.keys() {
        if k.linf() > radius {
            tail_bound += minimal_alpha(field, k);
        }
    }
    let summable = field.defects.decay.map_or(true, |d| d.ratio < 1.0);
    Ok(SandwichReport {
        radius,
        cells,
        l1_partial_sum: l1,
        tail_bound,
        summable,
        violation,
    })
}

/// Samples the sandwich `O^{per,-}(alpha) ⊂ O_k ⊂ O^{per,+}(alpha)` on random
/// points of `Q_k`. A relative slack of `1e-12` absorbs rounding at the
/// tangency of concentric disks.
pub fn sandwich_holds<R: Rng>(field: &PerforationField, k: CellIndex, alpha: f64, samples: usize, rng: &mut R) -> bool {
    let hole = field.hole_at(k);
    let per = field.periodic_hole_at(k);
    let inner = per.reduce(alpha);
    let outer = per.enlarge(alpha);
    let slack = 1e-12;
    let corner = k.corner();
    (0..samples).all(|_| {
        let p = corner + Point::new(rng.random::<f64>(), rng.random::<f64>());
        let in_hole = hole.contains(p);
        let inner_ok = !(inner.signed_distance(p) < -slack) || in_hole;
        let outer_ok = !in_hole || outer.signed_distance(p) < slack;
        inner_ok && outer_ok
    })
}

/// `|O_k Δ O_k^per|`.
///
/// Exact for two disks (lens formula); otherwise adaptive cell sampling on a
/// 512x512 partition of `Q_k`.
pub fn symmetric_difference_area(field: &PerforationField, k: CellIndex) -> f64 {
    let a = field.hole_at(k);
    let b = field.periodic_hole_at(k);
    if a == b {
        return 0.0;
    }
    if a.is_disk() && b.is_disk() {
        let overlap = disk_overlap_area(a.center, a.radii.0, b.center, b.radii.0);
        return a.area() + b.area() - 2.0 * overlap;
    }
    let nested = (a.radii.0 - b.radii.0) * (a.radii.1 - b.radii.1) >= 0.0;
    if a.center == b.center && a.rotation == b.rotation && nested {
        return (a.area() - b.area()).abs();
    }
    symmetric_difference_quadrature(&a, &b, k, 512)
}

/// `Σ_{|k|_inf <= radius} |O_k Δ O_k^per|`.
pub fn symmetric_difference_sum(field: &PerforationField, radius: i64) -> f64 {
    CellIndex::window(radius)
        .filter(|&k| field.is_perturbed(k))
        .map(|k| symmetric_difference_area(field, k))
        .sum()
}

/// Upper bound on `Σ_{|k|_inf > radius} |O_k Δ O_k^per|`: overrides outside
/// the window exactly, decay cells through `|O^+(α) ∖ O| = π(α(a+b) + α²)`
/// for radii offset by `α` over `8m` cells per shell.
pub fn symmetric_difference_tail(field: &PerforationField, radius: i64) -> f64 {
    let mut tail: f64 = field
        .defects
        .overrides
        .keys()
        .filter(|k| k.linf() > radius)
        .map(|&k| symmetric_difference_area(field, k))
        .fold(0.0, |acc, x| acc + x);
    if let Some(rule) = field.defects.decay {
        let (a, b) = field.pattern.radii;
        let mut m = radius + 1;
        loop {
            let alpha = rule.amplitude * rule.ratio.powi(m as i32);
            let term = 8.0 * m as f64 * PI * (alpha * (a + b) + alpha * alpha);
            tail += term;
            if term <= 1e-18 * tail.max(1e-300) || m > radius + 100_000 {
                break;
            }
            m += 1;
        }
    }
    tail
}

/// Area of the intersection of two disks.
pub fn disk_overlap_area(c1: Point, r1: f64, c2: Point, r2: f64) -> f64 {
    let d = (c1 - c2).norm();
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return PI * r * r;
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
    let k = 0.5
        * ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
            .max(0.0)
            .sqrt();
    r1 * r1 * a1 + r2 * r2 * a2 - k
}

/// Sampled `|A Δ B|` on `Q_k`: cells whose corners agree count whole,
/// mixed cells are refined 16x16.
pub fn symmetric_difference_quadrature(a: &HoleShape, b: &HoleShape, k: CellIndex, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let corner = k.corner();
    let xor = |p: Point| a.contains(p) != b.contains(p);
    let mut area = 0.0;
    let sub = 16;
    for j in 0..n {
        for i in 0..n {
            let p0 = corner + Point::new(i as f64 * h, j as f64 * h);
            let flags = [
                xor(p0),
                xor(p0 + Point::new(h, 0.0)),
                xor(p0 + Point::new(0.0, h)),
                xor(p0 + Point::new(h, h)),
            ];
            // Boundaries can slip between corners only if a shape is thinner
            // than a cell, which the resolution rules out.
            let near = a.signed_distance(p0).abs() < 2.0 * h || b.signed_distance(p0).abs() < 2.0 * h;
            if !near && flags.iter().all(|&f| f == flags[0]) {
                if flags[0] {
                    area += h * h;
                }
                continue;
            }
            let hs = h / sub as f64;
            let mut count = 0usize;
            for sj in 0..sub {
                for si in 0..sub {
                    let p = p0 + Point::new((si as f64 + 0.5) * hs, (sj as f64 + 0.5) * hs);
                    if xor(p) {
                        count += 1;
                    }
                }
            }
            area += count as f64 * hs * hs;
        }
    }
    area
}

/// A disk contained in `O_k ∩ O_k^per`, or `None` when they are disjoint.
///
/// For two disks this is the maximal inscribed disk of the lens; for other
/// shapes it is the best disk found on a 256x256 search grid.
pub fn inscribed_ball(field: &PerforationField, k: CellIndex) -> Option<(Point, f64)> {
    let a = field.hole_at(k);
    let b = field.periodic_hole_at(k);
    if a.is_disk() && b.is_disk() {
        let (r1, r2) = (a.radii.0, b.radii.0);
        let d = (b.center - a.center).norm();
        if d >= r1 + r2 {
            return None;
        }
        if d + r2 <= r1 {
            return Some((b.center, r2));
        }
        if d + r1 <= r2 {
            return Some((a.center, r1));
        }
        let u = (b.center - a.center) * (1.0 / d);
        let t = 0.5 * (r1 - r2 + d);
        return Some((a.center + u * t, 0.5 * (r1 + r2 - d)));
    }
    let n = 256;
    let corner = k.corner();
    let mut best: Option<(Point, f64)> = None;
    for j in 0..=n {
        for i in 0..=n {
            let p = corner + Point::new(i as f64 / n as f64, j as f64 / n as f64);
            let depth = (-a.signed_distance(p)).min(-b.signed_distance(p));
            if depth > 0.0 && best.map_or(true, |(_, r)| depth > r) {
                best = Some((p, depth));
            }
        }
    }
    best
}

/// Windows and thresholds for [`shape_regularity_verdicts`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeRegularityPlan {
    /// The Cauchy tail is measured past `cauchy_from`, using the partial sum
    /// at `cauchy_to` plus the closed-form remainder beyond it.
    pub cauchy_from: i64,
    pub cauchy_to: i64,
    pub cauchy_limit: f64,
    pub ball_radius: i64,
    pub ball_min: f64,
    pub clearance: f64,
}

impl Default for ShapeRegularityPlan {
    fn default() -> Self {
        ShapeRegularityPlan {
            cauchy_from: 32,
            cauchy_to: 48,
            cauchy_limit: 1e-6,
            ball_radius: 4,
            ball_min: 0.2,
            clearance: 0.18,
        }
    }
}

/// Summability of `|O_k Δ O_k^per|` on the decay field, inscribed balls of
/// `O_k ∩ O_k^per` away from the overrides of `field`, and the clearance
/// `δ₀` of `field`.
pub fn shape_regularity_verdicts(
    field: &PerforationField,
    decay: &PerforationField,
    plan: &ShapeRegularityPlan,
) -> Result<Vec<Verdict>, GeometryError> {
    field.validate()?;
    decay.validate()?;
    let near = symmetric_difference_sum(decay, plan.cauchy_from);
    let far = symmetric_difference_sum(decay, plan.cauchy_to);
    let tail = (far - near).abs() + symmetric_difference_tail(decay, plan.cauchy_to);
    let mut ball = f64::INFINITY;
    for k in CellIndex::window(plan.ball_radius) {
        if field.defects.overrides.contains_key(&k) {
            continue;
        }
        ball = ball.min(inscribed_ball(field, k).map_or(0.0, |(_, r)| r));
    }
    let delta = min_cell_clearance(field, plan.ball_radius)?;
    Ok(vec![
        Verdict::new(
            "symmetric_difference_cauchy_tail",
            tail,
            format!("<{:e}", plan.cauchy_limit),
            tail < plan.cauchy_limit,
        ),
        Verdict::new(
            "inscribed_ball_radius",
            ball,
            format!(">={}", plan.ball_min),
            ball >= plan.ball_min,
        ),
        Verdict::new(
            "cell_clearance",
            delta,
            format!("=={}", plan.clearance),
            delta == plan.clearance,
        ),
    ])
}

/// Which interface piece a boundary point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterfaceTag {
    /// `∂O_k^per ∖ closure(O_k)`.
    Gamma1,
    /// `∂O_k ∩ O_k^per`.
    Gamma2,
    /// `∂O_k ∖ O_k^per`.
    Gamma3,
    /// On `∂O_k^per` but inside `O_k`.
    None,
}

pub fn classify_interface(field: &PerforationField, k: CellIndex, p: Point) -> Result<InterfaceTag, GeometryError> {
    let sd_hole = field.hole_at(k).signed_distance(p);
    let sd_per = field.periodic_hole_at(k).signed_distance(p);
    if sd_hole.abs() <= INTERFACE_TOL {
        return Ok(if sd_per < -INTERFACE_TOL {
            InterfaceTag::Gamma2
        } else {
            InterfaceTag::Gamma3
        });
    }
    if sd_per.abs() <= INTERFACE_TOL {
        return Ok(if sd_hole > INTERFACE_TOL {
            InterfaceTag::Gamma1
        } else {
            InterfaceTag::None
        });
    }
    Err(GeometryError::NotOnInterface(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disk(r: f64) -> HoleShape {
        HoleShape::disk(Point::new(0.5, 0.5), r)
    }

    #[test]
    fn disk_signed_distance() {
        let d = disk(0.3);
        assert!((d.signed_distance(Point::new(0.5, 0.5)) + 0.3).abs() < 1e-15);
        assert!(d.signed_distance(Point::new(0.5, 0.8)).abs() < 1e-15);
        assert!((d.signed_distance(Point::new(0.9, 0.5)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ellipse_surrogate_sign() {
        let e = HoleShape::ellipse(Point::new(0.5, 0.5), 0.3, 0.15, 0.4);
        for s in 0..64 {
            let t = s as f64 * 0.1;
            let (p, n) = e.boundary_point(t);
            assert!(e.signed_distance(p).abs() < 1e-12);
            assert!(e.signed_distance(p + n * 1e-3) > 0.0);
            assert!(e.signed_distance(p - n * 1e-3) < 0.0);
        }
        assert!(e.signed_distance(e.center) < 0.0);
    }

    #[test]
    fn enlarge_and_reduce() {
        let d = disk(0.3);
        let c = d.center;
        let big = d.enlarge(0.05);
        assert!(big.contains(c + Point::new(0.34, 0.0)));
        assert!(!big.contains(c + Point::new(0.3500001, 0.0)));
        let same = d.enlarge(0.0);
        assert!(same.contains(c + Point::new(0.2999, 0.0)));
        assert!(!same.contains(c + Point::new(0.3, 0.0)));
        // Dyadic radii make the strict boundary exclusion exact.
        let dyadic = HoleShape::disk(Point::default(), 0.375);
        assert!(!dyadic.enlarge(0.125).contains(Point::new(0.5, 0.0)));
        assert!(!dyadic.reduce(0.125).contains(Point::new(0.25, 0.0)));

        let small = d.reduce(0.05);
        assert!(small.contains(c + Point::new(0.2499, 0.0)));
        assert!(!small.contains(c + Point::new(0.2500001, 0.0)));
        let empty = d.reduce(0.3);
        assert!(!empty.contains(c));
        assert!(!d.reduce(0.31).contains(c));
        assert!(d.reduce(0.0).contains(c + Point::new(0.2999, 0.0)));
    }

    #[test]
    fn hole_lookup() {
        let field = PerforationField::periodic(disk(0.25));
        let h = field.hole_at(CellIndex::new(3, -2));
        assert_eq!(h.center, Point::new(3.5, -1.5));
        let over = field.clone().with_override(CellIndex::ORIGIN, disk(0.35));
        assert_eq!(over.hole_at(CellIndex::ORIGIN).radii.0, 0.35);
        let zero = field.clone().with_decay(DecayRule {
            amplitude: 0.0,
            ratio: 0.5,
        });
        for k in CellIndex::window(3) {
            assert_eq!(zero.hole_at(k), field.hole_at(k));
        }
    }

    #[test]
    fn a2_closed_forms() {
        let field = PerforationField::periodic(disk(0.25)).with_override(CellIndex::ORIGIN, disk(0.30));
        assert!((minimal_alpha(&field, CellIndex::ORIGIN) - 0.05).abs() < 1e-15);
        let shifted = PerforationField::periodic(disk(0.25))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(Point::new(0.53, 0.5), 0.25));
        assert!((minimal_alpha(&shifted, CellIndex::ORIGIN) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn a2_sampling_matches_closed_form_for_ellipse_pattern() {
        // An ellipse with equal radii is a circle; the sampled path must agree
        // with the disk formula up to the sampling resolution.
        let circle = HoleShape::ellipse(Point::new(0.5, 0.5), 0.25, 0.25 + 1e-13, 0.0);
        let field = PerforationField::periodic(circle).with_override(
            CellIndex::ORIGIN,
            HoleShape::ellipse(Point::new(0.5, 0.5), 0.3, 0.3 + 1e-13, 0.0),
        );
        let a = minimal_alpha(&field, CellIndex::ORIGIN);
        assert!((a - 0.05).abs() < 1e-3, "{a}");
    }

    #[test]
    fn decay_partial_sums_match_direct_summation() {
        let rule = DecayRule {
            amplitude: 0.05,
            ratio: 0.5,
        };
        // Direct lattice summation oracle.
        let direct: f64 = CellIndex::window(60)
            .map(|k| rule.amplitude * rule.ratio.powi(k.linf() as i32))
            .sum();
        assert!((rule.total_sum() - direct).abs() < 1e-9);
        let field = PerforationField::periodic(disk(0.25)).with_decay(rule);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = check_alpha_sandwich(&field, 12, 16, &mut rng).unwrap();
        assert!(report.summable);
        assert!((report.l1_partial_sum + report.tail_bound - direct).abs() < 1e-9);
        let direct_window: f64 = CellIndex::window(12).map(|k| rule.alpha(k)).sum();
        assert!((report.l1_partial_sum - direct_window).abs() < 1e-12);
    }

    #[test]
    fn symmetric_difference() {
        let field = PerforationField::periodic(disk(0.25)).with_override(CellIndex::ORIGIN, disk(0.30));
        let a = symmetric_difference_area(&field, CellIndex::ORIGIN);
        assert!((a - PI * (0.09 - 0.0625)).abs() < 1e-12);
        assert!((a - 0.0863938).abs() < 1e-7);
        assert_eq!(symmetric_difference_area(&field, CellIndex::new(1, 0)), 0.0);

        let disjoint = PerforationField::periodic(HoleShape::disk(Point::new(0.25, 0.5), 0.2))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(Point::new(0.75, 0.5), 0.2));
        let a = symmetric_difference_area(&disjoint, CellIndex::ORIGIN);
        assert!((a - 2.0 * PI * 0.04).abs() < 1e-12);
    }

    #[test]
    fn quadrature_agrees_with_lens_formula() {
        let a = HoleShape::disk(Point::new(0.45, 0.5), 0.25);
        let b = HoleShape::disk(Point::new(0.55, 0.52), 0.22);
        let exact = a.area() + b.area() - 2.0 * disk_overlap_area(a.center, 0.25, b.center, 0.22);
        let q = symmetric_difference_quadrature(&a, &b, CellIndex::ORIGIN, 512);
        assert!((q - exact).abs() < 1e-4, "{q} vs {exact}");
    }

    #[test]
    fn inscribed_balls() {
        let field = PerforationField::periodic(disk(0.25)).with_override(CellIndex::ORIGIN, disk(0.30));
        let (c, r) = inscribed_ball(&field, CellIndex::ORIGIN).unwrap();
        assert_eq!(r, 0.25);
        assert_eq!(c, Point::new(0.5, 0.5));

        let disjoint = PerforationField::periodic(HoleShape::disk(Point::new(0.25, 0.5), 0.2))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(Point::new(0.75, 0.5), 0.2));
        assert!(inscribed_ball(&disjoint, CellIndex::ORIGIN).is_none());
    }

    #[test]
    fn lens_inscribed_ball_matches_grid_search() {
        let field = PerforationField::periodic(HoleShape::disk(Point::new(0.45, 0.5), 0.25))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(Point::new(0.55, 0.5), 0.25));
        let (c, r) = inscribed_ball(&field, CellIndex::ORIGIN).unwrap();
        assert!((r - 0.2).abs() < 1e-14);
        assert!((c - Point::new(0.5, 0.5)).norm() < 1e-14);

        // Oracle: dense sampling of the depth inside the intersection.
        let a = field.hole_at(CellIndex::ORIGIN);
        let b = field.periodic_hole_at(CellIndex::ORIGIN);
        let n = 800;
        let mut best = (Point::default(), 0.0);
        for j in 0..=n {
            for i in 0..=n {
                let p = Point::new(i as f64 / n as f64, j as f64 / n as f64);
                let depth = (-a.signed_distance(p)).min(-b.signed_distance(p));
                if depth > best.1 {
                    best = (p, depth);
                }
            }
        }
        assert!((best.1 - r).abs() < 2e-3);
        assert!((best.0 - c).norm() < 5e-3);
    }

    #[test]
    fn cell_clearance() {
        let field = PerforationField::periodic(disk(0.3));
        assert!((dist_to_cell_boundary(&field, CellIndex::ORIGIN).unwrap() - 0.2).abs() < 1e-15);
        let off = PerforationField::periodic(HoleShape::disk(Point::new(0.6, 0.5), 0.3));
        assert!((dist_to_cell_boundary(&off, CellIndex::ORIGIN).unwrap() - 0.1).abs() < 1e-15);
        let touching = PerforationField::periodic(disk(0.5));
        assert!(matches!(
            dist_to_cell_boundary(&touching, CellIndex::ORIGIN),
            Err(GeometryError::A1Violation { .. })
        ));
        assert!((min_cell_clearance(&PerforationField::golden(), 3).unwrap() - 0.18).abs() < 1e-15);
    }

    #[test]
    fn interface_tags() {
        let reduced = PerforationField::periodic(disk(0.3)).with_override(CellIndex::ORIGIN, disk(0.2));
        let k = CellIndex::ORIGIN;
        assert_eq!(
            classify_interface(&reduced, k, Point::new(0.7, 0.5)).unwrap(),
            InterfaceTag::Gamma2
        );
        assert_eq!(
            classify_interface(&reduced, k, Point::new(0.8, 0.5)).unwrap(),
            InterfaceTag::Gamma1
        );

        let enlarged = PerforationField::periodic(disk(0.2)).with_override(k, disk(0.3));
        assert_eq!(
            classify_interface(&enlarged, k, Point::new(0.8, 0.5)).unwrap(),
            InterfaceTag::Gamma3
        );
        assert_eq!(
            classify_interface(&enlarged, k, Point::new(0.7, 0.5)).unwrap(),
            InterfaceTag::None
        );

        let disjoint = PerforationField::periodic(HoleShape::disk(Point::new(0.25, 0.5), 0.2))
            .with_override(k, HoleShape::disk(Point::new(0.75, 0.5), 0.2));
        assert_eq!(
            classify_interface(&disjoint, k, Point::new(0.95, 0.5)).unwrap(),
            InterfaceTag::Gamma3
        );
        assert!(classify_interface(&disjoint, k, Point::new(0.5, 0.9)).is_err());
    }

    #[test]
    fn interface_partition_on_boundary_samples() {
        let field = PerforationField::periodic(HoleShape::disk(Point::new(0.45, 0.5), 0.25))
            .with_override(CellIndex::ORIGIN, HoleShape::disk(Point::new(0.55, 0.5), 0.22));
        let k = CellIndex::ORIGIN;
        let hole = field.hole_at(k);
        let per = field.periodic_hole_at(k);
        for s in 0..720 {
            let t = 2.0 * PI * s as f64 / 720.0;
            let (p, _) = hole.boundary_point(t);
            let tag = classify_interface(&field, k, p).unwrap();
            assert!(matches!(tag, InterfaceTag::Gamma2 | InterfaceTag::Gamma3));
            let (q, _) = per.boundary_point(t);
            let tag = classify_interface(&field, k, q).unwrap();
            if hole.signed_distance(q) > INTERFACE_TOL {
                assert_eq!(tag, InterfaceTag::Gamma1);
            } else {
                assert_ne!(tag, InterfaceTag::Gamma1);
            }
        }
    }

    #[test]
    fn a2_inclusion_on_decay_field() {
        let field = PerforationField::periodic(disk(0.25)).with_decay(DecayRule {
            amplitude: 0.05,
            ratio: 0.5,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let report = check_alpha_sandwich(&field, 8, 10_000, &mut rng).unwrap();
        assert!(report.inclusion_ok());
        assert!(report.violation.is_none());
    }

    #[test]
    fn a2_reports_violation() {
        let field = PerforationField::periodic(disk(0.25)).with_override(CellIndex::new(1, 0), disk(0.55));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let report = check_alpha_sandwich(&field, 1, 8, &mut rng).unwrap();
        assert_eq!(report.violation, Some(CellIndex::new(1, 0)));
        assert!(field.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn translation_covariance(i in -50i64..50, j in -50i64..50, x in 0.0f64..1.0, y in 0.0f64..1.0) {
                let field = PerforationField::periodic(HoleShape::ellipse(Point::new(0.5, 0.45), 0.3, 0.2, 0.3));
                let k = CellIndex::new(i, j);
                let p = Point::new(x, y);
                let a = field.hole_at(k).signed_distance(p + k.corner());
                let b = field.hole_at(CellIndex::ORIGIN).signed_distance(p);
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn reduce_shape_enlarge_nest(alpha in 0.0f64..0.4, x in -0.2f64..1.2, y in -0.2f64..1.2, r in 0.05f64..0.45) {
                let s = HoleShape::disk(Point::new(0.5, 0.5), r);
                let p = Point::new(x, y);
                if s.reduce(alpha).contains(p) { prop_assert!(s.contains(p)); }
                if s.contains(p) { prop_assert!(s.enlarge(alpha).contains(p)); }
            }
        }
    }
}
