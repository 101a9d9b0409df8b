//! Shared fixtures for the solver benchmarks: a moderate box problem with
//! two random material parameters under the default two-cycle load.

use stolatin::{build_box_mesh, AffineField, Face, Problem, Result, TimeGrid, VariableKind};

/// Cantilever-style box, 81 nodes, transverse surface load strong enough
/// to drive part of the ensemble past yield.
pub fn bench_problem() -> Result<Problem> {
    let mesh = build_box_mesh(
        [2.0, 1.0, 1.0],
        [2, 2, 2],
        Face::parse("-x")?,
        Face::parse("+x")?,
    )?;
    let ne = mesh.n_elements();
    let youngs = AffineField::scalar_random(2.11e5, 2.11e4, 0, ne);
    let yield_stress = AffineField::scalar_random(245.0, 24.5, 1, ne);
    Problem::new(
        mesh,
        youngs,
        yield_stress,
        0.29,
        0.01,
        [0.0, 90.0, 0.0],
        TimeGrid::default_profile(9)?,
        vec![
            VariableKind::GaussianTruncated { floor: -2.0 },
            VariableKind::GaussianTruncated { floor: -2.0 },
        ],
    )
}
