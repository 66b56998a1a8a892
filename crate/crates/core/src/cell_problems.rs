//! Periodic unit-cell flow problems on the pore geometry. Each problem j
//! drives the cell with a unit body force e_j; the fluid-volume integrals of
//! the two velocity fields form the (dimensionless) permeability tensor.

use crate::error::{Error, Result};
use crate::geometry::{InclusionShape, UnitCellGeometry};
use crate::grid::{build_grid, GridDomain, StaggeredGrid, StokesField};
use crate::linalg::SolveOptions;
use crate::stokes::{
    edge_slope_away, edge_value, solve_stokes, BoundarySpec, PressureGauge, StokesProblem,
};

/// Both unit-cell solutions on a shared grid, with the permeability tensor
/// `k[i][j]` = i-th velocity component integral of problem j.
pub struct CellSolution {
    pub grid: StaggeredGrid,
    pub w: [StokesField; 2],
    pub k: [[f64; 2]; 2],
    pub porosity: f64,
}

/// Fluid-volume integral of each velocity component (midpoint quadrature
/// over face control volumes; solid faces carry zero).
pub fn velocity_volume_integral(grid: &StaggeredGrid, field: &StokesField) -> [f64; 2] {
    let vol = grid.dx * grid.dy;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    // Skip the periodic seam duplicates (i = nx, j = ny).
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            s1 += field.u[grid.u_index(i, j)];
            s2 += field.v[grid.v_index(i, j)];
        }
    }
    [s1 * vol, s2 * vol]
}

/// Net upward flux through the horizontal face row `row`.
pub fn horizontal_flux(grid: &StaggeredGrid, field: &StokesField, row: usize) -> f64 {
    (0..grid.nx)
        .map(|i| field.v[grid.v_index(i, row)])
        .sum::<f64>()
        * grid.dx
}

/// Net rightward flux through the vertical face column `col`.
pub fn vertical_flux(grid: &StaggeredGrid, field: &StokesField, col: usize) -> f64 {
    (0..grid.ny)
        .map(|j| field.u[grid.u_index(col, j)])
        .sum::<f64>()
        * grid.dy
}

pub fn solve_cell_problems(
    shape: &InclusionShape,
    resolution: usize,
    opts: &SolveOptions,
) -> Result<CellSolution> {
    let cell = UnitCellGeometry::new(shape.clone())?;
    let domain = GridDomain::new(0.0, 1.0, 0.0, 1.0)?;
    let grid = build_grid(domain, resolution, Some(&cell), true, true, None)?;
    let mut fields = Vec::with_capacity(2);
    for axis in 0..2 {
        let mut prob = StokesProblem::new(&grid, BoundarySpec::default());
        if axis == 0 {
            prob.f1 = Some(std::sync::Arc::new(|_, _| 1.0));
        } else {
            prob.f2 = Some(std::sync::Arc::new(|_, _| 1.0));
        }
        prob.gauge = PressureGauge::MeanZeroAll;
        let sol = solve_stokes(&prob, opts)?;
        if sol.max_div > 1e-8 {
            return Err(Error::NoConvergence {
                residual: sol.max_div,
                iterations: 0,
                tol: 1e-8,
            });
        }
        fields.push(sol.field);
    }
    let ints: Vec<[f64; 2]> = fields
        .iter()
        .map(|f| velocity_volume_integral(&grid, f))
        .collect();
    let k = [[ints[0][0], ints[1][0]], [ints[0][1], ints[1][1]]];
    let porosity = cell.porosity(resolution);
    let w = [fields.remove(0), fields.remove(0)];
    Ok(CellSolution {
        grid,
        w,
        k,
        porosity,
    })
}

/// Velocity, shear, and pressure traces of one cell solution on the top edge
/// of the cell, used as interface data by the stripe problems.
/// `w1`/`dw1_dy` sit at u-face x positions (length nx+1, seam included);
/// `w2`/`dw2_dy`/`pi` at cell-center x positions (length nx).
pub struct CellTraces {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub dw1_dy: Vec<f64>,
    pub dw2_dy: Vec<f64>,
    pub pi: Vec<f64>,
}

pub fn interface_traces(grid: &StaggeredGrid, field: &StokesField) -> Result<CellTraces> {
    let ny = grid.ny;
    if ny < 3 {
        return Err(Error::Config("trace extraction needs at least 3 rows".into()));
    }
    // Quadratic one-sided extrapolation needs a clear fluid strip under the
    // top edge.
    for j in [ny - 1, ny - 2, ny - 3] {
        for i in 0..grid.nx {
            if !grid.cell_fluid[grid.cell_index(i, j)] {
                return Err(Error::Geometry(format!(
                    "solid cell ({i},{j}) blocks the top-edge fluid strip"
                )));
            }
        }
    }
    let dy = grid.dy;
    let mut w1 = Vec::with_capacity(grid.nx + 1);
    let mut dw1 = Vec::with_capacity(grid.nx + 1);
    for i in 0..=grid.nx {
        let f1 = field.u[grid.u_index(i, ny - 1)];
        let f2 = field.u[grid.u_index(i, ny - 2)];
        let f3 = field.u[grid.u_index(i, ny - 3)];
        w1.push(edge_value(f1, f2, f3));
        // Samples march downward, so the outward slope is -d/dy.
        dw1.push(-edge_slope_away(f1, f2, f3, dy));
    }
    let mut w2 = Vec::with_capacity(grid.nx);
    let mut dw2 = Vec::with_capacity(grid.nx);
    let mut pi = Vec::with_capacity(grid.nx);
    for i in 0..grid.nx {
        // The seam face row carries the exact edge values of v.
        let v0 = field.v[grid.v_index(i, ny)];
        let v1 = field.v[grid.v_index(i, ny - 1)];
        let v2 = field.v[grid.v_index(i, ny - 2)];
        w2.push(v0);
        dw2.push(-(-3.0 * v0 + 4.0 * v1 - v2) / (2.0 * dy));
        let p1 = field.p[grid.cell_index(i, ny - 1)];
        let p2 = field.p[grid.cell_index(i, ny - 2)];
        let p3 = field.p[grid.cell_index(i, ny - 3)];
        pi.push(edge_value(p1, p2, p3));
    }
    Ok(CellTraces {
        w1,
        w2,
        dw1_dy: dw1,
        dw2_dy: dw2,
        pi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(res: usize) -> CellSolution {
        solve_cell_problems(
            &InclusionShape::Circle { radius: 0.25 },
            res,
            &SolveOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn circle_tensor_is_isotropic_diagonal() {
        let sol = circle(64);
        let k = sol.k;
        assert!(k[0][0] > 1e-3, "k11 {}", k[0][0]);
        assert!((k[0][0] - k[1][1]).abs() < 1e-10 * k[0][0], "k11 vs k22");
        assert!(k[0][1].abs() < 1e-12, "k12 {}", k[0][1]);
        assert!(k[1][0].abs() < 1e-12, "k21 {}", k[1][0]);
        assert!((sol.porosity - (1.0 - std::f64::consts::PI / 16.0)).abs() < 2e-3);
    }

    #[test]
    fn volume_integral_equals_cross_section_flux() {
        // Discrete continuity telescopes: any face row carries the same
        // flux, and the volume quadrature equals it identically.
        let sol = circle(32);
        for (j, f) in sol.w.iter().enumerate() {
            let k2 = velocity_volume_integral(&sol.grid, f)[1];
            for row in [0, 5, 16, 32] {
                let flux = horizontal_flux(&sol.grid, f, row);
                assert!((k2 - flux).abs() < 1e-13, "problem {j} row {row}");
            }
            let k1 = velocity_volume_integral(&sol.grid, f)[0];
            for col in [0, 7, 16] {
                let flux = vertical_flux(&sol.grid, f, col);
                assert!((k1 - flux).abs() < 1e-13, "problem {j} col {col}");
            }
        }
    }

    #[test]
    fn tilted_ellipse_couples_the_axes() {
        let sol = solve_cell_problems(
            &InclusionShape::TiltedEllipse,
            64,
            &SolveOptions::default(),
        )
        .unwrap();
        let k = sol.k;
        // Diagonal tilt makes the off-diagonal entries real, and the
        // discrete problem keeps the tensor symmetric to solver precision.
        assert!(k[0][1].abs() > 1e-5, "k12 {}", k[0][1]);
        assert!(
            (k[0][1] - k[1][0]).abs() < 1e-10 * k[0][0].abs(),
            "k12 {} vs k21 {}",
            k[0][1],
            k[1][0]
        );
        assert!(k[0][0] > 0.0 && k[1][1] > 0.0);
    }

    #[test]
    fn traces_are_mass_consistent() {
        let sol = circle(32);
        for (j, f) in sol.w.iter().enumerate() {
            let tr = interface_traces(&sol.grid, f).unwrap();
            let edge_flux: f64 = tr.w2.iter().sum::<f64>() * sol.grid.dx;
            assert!(
                (edge_flux - sol.k[1][j]).abs() < 1e-13,
                "problem {j}: edge flux {edge_flux} vs k2{j} {}",
                sol.k[1][j]
            );
            assert_eq!(tr.w1.len(), sol.grid.nx + 1);
            // Periodic seam duplicates the first sample.
            assert!((tr.w1[0] - tr.w1[sol.grid.nx]).abs() < 1e-13);
            assert!(tr.dw1_dy.iter().all(|x| x.is_finite()));
            assert!(tr.pi.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn permeability_tightens_with_resolution() {
        let coarse = circle(32).k[0][0];
        let fine = circle(64).k[0][0];
        assert!((coarse - fine).abs() / fine < 0.08, "{coarse} vs {fine}");
    }
}
