//! Fixtures shared by the benchmarks.

use perfhom::geometry::{HoleShape, PerforationField, Point};
use perfhom::grid::{assemble_laplacian, classify_nodes, Assembly, CartesianGrid, Classification};

pub fn golden_pattern() -> HoleShape {
    HoleShape::disk(Point::new(0.5, 0.5), 0.25)
}

/// Unit square of `n` intervals with one centered hole of radius 0.3.
pub fn perforated_square(n: usize) -> Classification {
    let grid = CartesianGrid::unit_square(n).expect("grid");
    classify_nodes(&grid, &HoleShape::disk(Point::new(0.5, 0.5), 0.3)).expect("classification")
}

/// Periodic cell of `n` intervals around the golden pattern.
pub fn perforated_cell(n: usize) -> Classification {
    let grid = CartesianGrid::periodic_cell(n).expect("grid");
    classify_nodes(&grid, &PerforationField::periodic(golden_pattern()).periodic_region()).expect("classification")
}

pub fn laplacian(cls: &Classification) -> Assembly {
    assemble_laplacian(cls).expect("assembly")
}
