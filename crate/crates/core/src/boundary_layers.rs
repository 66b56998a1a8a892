//! Interface-layer stripe problems. Auxiliary Stokes flows live on a
//! periodic vertical stripe holding one column of the pore pattern below a
//! horizontal line and clear fluid above; prescribed jumps on that line
//! drive them. Away from the line the solutions settle exponentially fast:
//! to constants above, to zero below. The plateau values are the effective
//! interface coefficients of the macroscale model.

use rayon::prelude::*;

use crate::cell_problems::{interface_traces, solve_cell_problems, CellSolution, CellTraces};
use crate::error::{Error, Result};
use crate::geometry::{build_stripe, InclusionShape};
use crate::grid::{build_grid, GridDomain, StaggeredGrid, StokesField};
use crate::linalg::SolveOptions;
use crate::stokes::{
    solve_stokes, BoundarySpec, JumpData, PressureGauge, SideBc, StokesProblem, VelocityBc,
};

/// Result of one stripe problem.
pub struct StripeOutcome {
    pub grid: StaggeredGrid,
    pub field: StokesField,
    /// Period average of the first velocity component on the upper side of
    /// the line; equals the far-field plateau identically in the discrete
    /// balance, which `plateau_drift` verifies.
    pub avg_u: f64,
    /// Period average of the pressure on the upper side of the line.
    pub avg_p: f64,
    pub plateau_drift: f64,
    /// Fitted exponential rate of the sub-line velocity decay.
    pub decay_gamma: f64,
    /// Deepest-row to first-row velocity magnitude ratio.
    pub deep_ratio: f64,
}

/// Effective interface coefficients extracted from the stripe set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoundaryLayerConstants {
    /// Tangential-velocity plateau of the shear-driven problem.
    pub n1_bl: f64,
    /// Pressure plateau of the shear-driven problem.
    pub ns_bl: f64,
    /// Tangential-velocity plateaus of the two cell-coupling problems.
    pub m1_bl: [f64; 2],
    /// Pressure plateaus of the two cell-coupling problems.
    pub momega_bl: [f64; 2],
    pub l: usize,
    pub resolution: usize,
    pub max_plateau_drift: f64,
    pub min_decay_gamma: f64,
}

/// The full stripe computation: the cell solutions feeding the jumps plus
/// the three stripe outcomes.
pub struct StripeSet {
    pub cell: CellSolution,
    pub t: StripeOutcome,
    pub beta: [StripeOutcome; 2],
    pub constants: BoundaryLayerConstants,
}

/// Per-row velocity magnitude profile `(y_center, rms speed)`, cell rows
/// bottom to top.
pub fn row_speed_profile(grid: &StaggeredGrid, field: &StokesField) -> Vec<(f64, f64)> {
    (0..grid.ny)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..grid.nx {
                s += field.u[grid.u_index(i, j)].powi(2);
                s += field.v[grid.v_index(i, j)].powi(2);
            }
            let y = grid.y0 + (j as f64 + 0.5) * grid.dy;
            (y, (s / (2.0 * grid.nx as f64)).sqrt())
        })
        .collect()
}

fn stripe_grid(shape: &InclusionShape, l: usize, resolution: usize) -> Result<StaggeredGrid> {
    let stripe = build_stripe(shape.clone(), l)?;
    let domain = GridDomain::new(0.0, 1.0, -(l as f64), l as f64)?;
    build_grid(domain, resolution, Some(&stripe), true, false, Some(0.0))
}

fn stripe_bc() -> BoundarySpec {
    BoundarySpec {
        // Truncation closures: the flow has died out at the bottom, and the
        // top plateau is shear-free with no vertical throughput.
        bottom: Some(SideBc::Uniform(VelocityBc::no_slip())),
        top: Some(SideBc::Uniform(VelocityBc::Symmetry)),
        ..Default::default()
    }
}

fn solve_stripe(
    grid: &StaggeredGrid,
    jump: JumpData,
    opts: &SolveOptions,
) -> Result<StripeOutcome> {
    let mut prob = StokesProblem::new(grid, stripe_bc());
    prob.jump = Some(jump);
    // Pin the pressure where the solution has decayed: deepest cell row.
    prob.gauge = PressureGauge::MeanZeroRegion {
        y_lo: grid.y0,
        y_hi: grid.y0 + grid.dy,
    };
    let sol = solve_stokes(&prob, opts)?;
    let row = grid.interface_row.expect("stripe grid has an interface row");
    let nx = grid.nx as f64;
    let row_u = |j: usize| -> f64 {
        (0..grid.nx)
            .map(|i| sol.field.u[grid.u_index(i, j)])
            .sum::<f64>()
            / nx
    };
    let row_p = |j: usize| -> f64 {
        (0..grid.nx)
            .map(|i| sol.field.p[grid.cell_index(i, j)])
            .sum::<f64>()
            / nx
    };
    let avg_u = row_u(row);
    let avg_p = row_p(row);
    // Normalize both drifts by one problem scale; individual plateaus may
    // vanish by symmetry.
    let scale = avg_u.abs().max(avg_p.abs()).max(1e-9);
    let drift_u = (row_u(grid.ny - 1) - avg_u).abs() / scale;
    let drift_p = (row_p(grid.ny - 1) - avg_p).abs() / scale;
    let plateau_drift = drift_u.max(drift_p);
    if plateau_drift > 1e-3 {
        return Err(Error::DecayFailure(format!(
            "plateau drift {plateau_drift:.3e} above the line; stripe too short or unresolved"
        )));
    }
    let profile = row_speed_profile(grid, &sol.field);
    // Fit ln(speed) against depth in the window clear of both the line and
    // the bottom closure.
    let l = -grid.y0;
    let fit: Vec<(f64, f64)> = profile
        .iter()
        .filter(|(y, s)| *y > -l + 1.0 && *y < -0.5 && *s > 1e-300)
        .map(|(y, s)| (*y, s.ln()))
        .collect();
    if fit.len() < 4 {
        return Err(Error::Config(
            "stripe too short to estimate the decay rate".into(),
        ));
    }
    let n = fit.len() as f64;
    let (sx, sy): (f64, f64) = fit.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (sxx, sxy): (f64, f64) = fit
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
    let decay_gamma = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let first_below = profile[row - 1].1;
    let deepest = profile[0].1;
    let deep_ratio = deepest / first_below.max(1e-300);
    if !(deep_ratio < 1e-3) {
        return Err(Error::DecayFailure(format!(
            "sub-line flow not decayed at the bottom (ratio {deep_ratio:.3e}); increase the stripe half-height"
        )));
    }
    Ok(StripeOutcome {
        grid: grid.clone(),
        field: sol.field,
        avg_u,
        avg_p,
        plateau_drift,
        decay_gamma,
        deep_ratio,
    })
}

/// Shear-driven stripe problem: unit jump in the tangential momentum flux.
pub fn solve_t_problem(
    shape: &InclusionShape,
    l: usize,
    resolution: usize,
    opts: &SolveOptions,
) -> Result<StripeOutcome> {
    let grid = stripe_grid(shape, l, resolution)?;
    let row = grid.interface_row.unwrap();
    let mut jump = JumpData::zero(&grid, row);
    for h in jump.h1.iter_mut() {
        *h = 1.0;
    }
    solve_stripe(&grid, jump, opts)
}

/// Jump data tying a stripe to cell problem j: the velocity jump removes
/// the cell solution's trace (keeping its net vertical flux), the traction
/// jump removes its momentum flux.
fn beta_jump(
    grid: &StaggeredGrid,
    row: usize,
    traces: &CellTraces,
    k2j: f64,
) -> Result<JumpData> {
    if traces.w2.len() != grid.nx {
        return Err(Error::Config(format!(
            "trace resolution {} does not match stripe resolution {}",
            traces.w2.len(),
            grid.nx
        )));
    }
    let g1: Vec<f64> = traces.w1.iter().map(|w| -w).collect();
    let g2: Vec<f64> = traces.w2.iter().map(|w| k2j - w).collect();
    let h1: Vec<f64> = traces.dw1_dy.iter().map(|d| -d).collect();
    let h2: Vec<f64> = traces
        .dw2_dy
        .iter()
        .zip(&traces.pi)
        .map(|(d, p)| p - d)
        .collect();
    let net: f64 = g2.iter().sum::<f64>() * grid.dx;
    if net.abs() > 1e-8 {
        return Err(Error::Config(format!(
            "velocity jump carries net mass {net:.3e}; traces and flux constant disagree"
        )));
    }
    Ok(JumpData {
        row,
        g1,
        g2,
        h1,
        h2,
    })
}

pub fn solve_beta_problem(
    shape: &InclusionShape,
    l: usize,
    resolution: usize,
    cell: &CellSolution,
    j: usize,
    opts: &SolveOptions,
) -> Result<StripeOutcome> {
    let grid = stripe_grid(shape, l, resolution)?;
    let row = grid.interface_row.unwrap();
    let traces = interface_traces(&cell.grid, &cell.w[j])?;
    let jump = beta_jump(&grid, row, &traces, cell.k[1][j])?;
    solve_stripe(&grid, jump, opts)
}

/// Solves the cell problems and all three stripe problems, extracting the
/// interface coefficients.
pub fn solve_boundary_layers(
    shape: &InclusionShape,
    l: usize,
    resolution: usize,
    opts: &SolveOptions,
) -> Result<StripeSet> {
    let cell = solve_cell_problems(shape, resolution, opts)?;
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<StripeOutcome> + Send>> = Vec::new();
    {
        let shape = shape.clone();
        let opts = *opts;
        jobs.push(Box::new(move || solve_t_problem(&shape, l, resolution, &opts)));
    }
    for j in 0..2 {
        let shape = shape.clone();
        let opts = *opts;
        let cell_ref = &cell;
        jobs.push(Box::new(move || {
            solve_beta_problem(&shape, l, resolution, cell_ref, j, &opts)
        }));
    }
    let mut outs: Vec<Result<StripeOutcome>> = jobs.into_par_iter().map(|f| f()).collect();
    let t = outs.remove(0)?;
    let b1 = outs.remove(0)?;
    let b2 = outs.remove(0)?;
    let constants = BoundaryLayerConstants {
        n1_bl: t.avg_u,
        ns_bl: t.avg_p,
        m1_bl: [b1.avg_u, b2.avg_u],
        momega_bl: [b1.avg_p, b2.avg_p],
        l,
        resolution,
        max_plateau_drift: t
            .plateau_drift
            .max(b1.plateau_drift)
            .max(b2.plateau_drift),
        min_decay_gamma: t.decay_gamma.min(b1.decay_gamma).min(b2.decay_gamma),
    };
    Ok(StripeSet {
        cell,
        t,
        beta: [b1, b2],
        constants,
    })
}
