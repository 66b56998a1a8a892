//! Pore-scale reference runs: the coupled system resolved directly on the
//! full domain with every inclusion in the solid mask, ensemble averaging
//! over pattern shifts, and line-profile extraction for comparing against
//! macroscale solutions.

use crate::error::{Error, Result};
use crate::geometry::PorousLayout;
use crate::grid::{build_grid, GridDomain, StaggeredGrid, StokesField};
use crate::linalg::SolveOptions;
use crate::stokes::{solve_stokes, BoundarySpec, Field2, PressureGauge, StokesProblem};

/// Fewest grid cells per microstructure period the mask may be built with.
pub const MIN_CELLS_PER_EPSILON: usize = 16;

/// Fewest grid cells across any pore throat (fluid gap bounded by solid on
/// both sides).
pub const MIN_CELLS_PER_THROAT: usize = 3;

pub struct DnsProblem {
    pub domain: GridDomain,
    /// Inclusion pattern; `None` runs an unobstructed reference channel.
    pub layout: Option<PorousLayout>,
    /// Cells per unit length, both directions.
    pub resolution: usize,
    pub periodic_x: bool,
    pub bc: BoundarySpec,
    pub f1: Option<Field2>,
    pub f2: Option<Field2>,
    pub gauge: PressureGauge,
}

impl DnsProblem {
    pub fn new(domain: GridDomain, layout: Option<PorousLayout>, resolution: usize) -> Self {
        DnsProblem {
            domain,
            layout,
            resolution,
            periodic_x: false,
            bc: BoundarySpec::default(),
            f1: None,
            f2: None,
            gauge: PressureGauge::Auto,
        }
    }
}

#[derive(Debug)]
pub struct DnsSolution {
    pub grid: StaggeredGrid,
    pub field: StokesField,
    pub max_div: f64,
}

/// Shortest fluid run (in cells) bounded by solid on both ends, scanning
/// grid rows and columns. `None` when the mask has no interior gap at all.
fn min_throat_cells(grid: &StaggeredGrid) -> Option<usize> {
    let mut best: Option<usize> = None;
    let mut consider = |run: usize, bounded: bool| {
        if bounded && run > 0 {
            best = Some(best.map_or(run, |b| b.min(run)));
        }
    };
    for j in 0..grid.ny {
        let mut run = 0usize;
        let mut seen_solid = false;
        for i in 0..grid.nx {
            if grid.cell_fluid[grid.cell_index(i, j)] {
                run += 1;
            } else {
                consider(run, seen_solid);
                run = 0;
                seen_solid = true;
            }
        }
    }
    for i in 0..grid.nx {
        let mut run = 0usize;
        let mut seen_solid = false;
        for j in 0..grid.ny {
            if grid.cell_fluid[grid.cell_index(i, j)] {
                run += 1;
            } else {
                consider(run, seen_solid);
                run = 0;
                seen_solid = true;
            }
        }
    }
    best
}

pub fn run_dns(prob: &DnsProblem, opts: &SolveOptions) -> Result<DnsSolution> {
    if let Some(layout) = &prob.layout {
        let cells_per_eps = layout.epsilon * prob.resolution as f64;
        if cells_per_eps + 1e-9 < MIN_CELLS_PER_EPSILON as f64 {
            return Err(Error::Config(format!(
                "resolution {} gives {:.1} cells per microstructure period; need at least {}",
                prob.resolution, cells_per_eps, MIN_CELLS_PER_EPSILON
            )));
        }
    }
    let grid = build_grid(
        prob.domain,
        prob.resolution,
        prob.layout
            .as_ref()
            .map(|l| l as &dyn crate::geometry::SolidGeometry),
        prob.periodic_x,
        false,
        None,
    )?;
    if prob.layout.is_some() {
        if let Some(throat) = min_throat_cells(&grid) {
            if throat < MIN_CELLS_PER_THROAT {
                return Err(Error::Config(format!(
                    "narrowest pore throat spans {throat} cells; need at least {}",
                    MIN_CELLS_PER_THROAT
                )));
            }
        }
    }
    let sp = StokesProblem {
        grid: &grid,
        bc: prob.bc.clone(),
        f1: prob.f1.clone(),
        f2: prob.f2.clone(),
        jump: None,
        gauge: prob.gauge,
    };
    let sol = solve_stokes(&sp, opts)?;
    Ok(DnsSolution {
        grid,
        field: sol.field,
        max_div: sol.max_div,
    })
}

/// Pointwise ensemble mean over realizations. Velocity arrays are averaged
/// plainly (solid faces carry zeros, so this is the volume average); pressure
/// is averaged over the members whose cell is fluid.
pub struct EnsembleAverage {
    pub grid: StaggeredGrid,
    pub mean: StokesField,
    /// Per cell, the fraction of members in which it was fluid.
    pub fluid_fraction: Vec<f64>,
    pub members: usize,
}

/// Equispaced pattern shifts covering one period.
pub fn ensemble_shifts(members: usize) -> Vec<f64> {
    (0..members).map(|k| k as f64 / members as f64).collect()
}

/// Runs one realization per shift and averages. Any failing member aborts
/// the whole ensemble, naming the shift.
pub fn run_ensemble(
    base: &DnsProblem,
    members: usize,
    opts: &SolveOptions,
) -> Result<(Vec<DnsSolution>, EnsembleAverage)> {
    let layout = base
        .layout
        .as_ref()
        .ok_or_else(|| Error::Config("ensemble runs need an inclusion layout".into()))?;
    if members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let mut sols = Vec::with_capacity(members);
    for shift in ensemble_shifts(members) {
        let member = DnsProblem {
            domain: base.domain,
            layout: Some(PorousLayout::new(
                layout.shape.clone(),
                layout.n_cols,
                layout.n_rows,
                layout.epsilon,
                (layout.shift + shift).rem_euclid(1.0),
            )?),
            resolution: base.resolution,
            periodic_x: base.periodic_x,
            bc: base.bc.clone(),
            f1: base.f1.clone(),
            f2: base.f2.clone(),
            gauge: base.gauge,
        };
        match run_dns(&member, opts) {
            Ok(sol) => sols.push(sol),
            Err(e) => {
                return Err(Error::Config(format!(
                    "ensemble member at shift {shift} failed: {e}"
                )))
            }
        }
    }
    let avg = average(&sols)?;
    Ok((sols, avg))
}

/// Averages already-computed realizations (identical grids up to the mask).
pub fn average(sols: &[DnsSolution]) -> Result<EnsembleAverage> {
    let first = sols
        .first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    let g0 = &first.grid;
    for s in sols {
        if s.grid.nx != g0.nx || s.grid.ny != g0.ny || s.grid.x0 != g0.x0 || s.grid.y0 != g0.y0 {
            return Err(Error::Config(
                "ensemble members live on different grids".into(),
            ));
        }
    }
    let n = sols.len() as f64;
    let mut mean = StokesField::zeros(g0);
    for s in sols {
        for (m, v) in mean.u.iter_mut().zip(&s.field.u) {
            *m += v / n;
        }
        for (m, v) in mean.v.iter_mut().zip(&s.field.v) {
            *m += v / n;
        }
    }
    let mut fluid_fraction = vec![0.0f64; g0.n_cells()];
    for c in 0..g0.n_cells() {
        let mut cnt = 0usize;
        let mut acc = 0.0;
        for s in sols {
            if s.grid.cell_fluid[c] {
                cnt += 1;
                acc += s.field.p[c];
            }
        }
        if cnt > 0 {
            mean.p[c] = acc / cnt as f64;
        }
        fluid_fraction[c] = cnt as f64 / n;
    }
    Ok(EnsembleAverage {
        grid: g0.clone(),
        mean,
        fluid_fraction,
        members: sols.len(),
    })
}

// ----- profile extraction -----

/// Line through the domain along which fields are sampled.
#[derive(Debug, Clone, Copy)]
pub enum ProfileLine {
    /// Horizontal line at height x2; samples vary in x1.
    AlongX1 { x2: f64 },
    /// Vertical line at station x1; samples vary in x2.
    AlongX2 { x1: f64 },
}

#[derive(Debug, Clone)]
pub struct LineProfile {
    /// Sample coordinates along the line.
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

fn axis(frac: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 {
        return (0, 0, 0.0);
    }
    let f = frac.clamp(0.0, (n - 1) as f64);
    let i = (f.floor() as usize).min(n - 2);
    (i, i + 1, f - i as f64)
}

/// Bilinear interpolation of the horizontal velocity at (x, y).
pub fn sample_u(grid: &StaggeredGrid, u: &[f64], x: f64, y: f64) -> f64 {
    let (i0, i1, tx) = axis((x - grid.x0) / grid.dx, grid.nx + 1);
    let (j0, j1, ty) = axis((y - grid.y0) / grid.dy - 0.5, grid.ny);
    let f = |i: usize, j: usize| u[grid.u_index(i, j)];
    (1.0 - ty) * ((1.0 - tx) * f(i0, j0) + tx * f(i1, j0))
        + ty * ((1.0 - tx) * f(i0, j1) + tx * f(i1, j1))
}

/// Bilinear interpolation of the vertical velocity at (x, y).
pub fn sample_v(grid: &StaggeredGrid, v: &[f64], x: f64, y: f64) -> f64 {
    let (i0, i1, tx) = axis((x - grid.x0) / grid.dx - 0.5, grid.nx);
    let (j0, j1, ty) = axis((y - grid.y0) / grid.dy, grid.ny + 1);
    let f = |i: usize, j: usize| v[grid.v_index(i, j)];
    (1.0 - ty) * ((1.0 - tx) * f(i0, j0) + tx * f(i1, j0))
        + ty * ((1.0 - tx) * f(i0, j1) + tx * f(i1, j1))
}

/// Bilinear interpolation of the cell-centered pressure at (x, y).
pub fn sample_p(grid: &StaggeredGrid, p: &[f64], x: f64, y: f64) -> f64 {
    let (i0, i1, tx) = axis((x - grid.x0) / grid.dx - 0.5, grid.nx);
    let (j0, j1, ty) = axis((y - grid.y0) / grid.dy - 0.5, grid.ny);
    let f = |i: usize, j: usize| p[grid.cell_index(i, j)];
    (1.0 - ty) * ((1.0 - tx) * f(i0, j0) + tx * f(i1, j0))
        + ty * ((1.0 - tx) * f(i0, j1) + tx * f(i1, j1))
}

/// Samples all three fields at `n` equispaced stations along the line.
pub fn extract_profile(
    grid: &StaggeredGrid,
    field: &StokesField,
    line: ProfileLine,
    n: usize,
) -> LineProfile {
    let (lo, hi) = match line {
        ProfileLine::AlongX1 { .. } => (grid.x0, grid.x0 + grid.nx as f64 * grid.dx),
        ProfileLine::AlongX2 { .. } => (grid.y0, grid.y0 + grid.ny as f64 * grid.dy),
    };
    let step = (hi - lo) / n as f64;
    let mut out = LineProfile {
        s: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };
    for k in 0..n {
        let s = lo + (k as f64 + 0.5) * step;
        let (x, y) = match line {
            ProfileLine::AlongX1 { x2 } => (s, x2),
            ProfileLine::AlongX2 { x1 } => (x1, s),
        };
        out.s.push(s);
        out.u.push(sample_u(grid, &field.u, x, y));
        out.v.push(sample_v(grid, &field.v, x, y));
        out.p.push(sample_p(grid, &field.p, x, y));
    }
    out
}

/// Samples a coupled macroscale solution along a line, drawing each station
/// from whichever subdomain contains it; porous velocities are the Darcy
/// fluxes, so they compare directly against ensemble-mean pore velocities.
pub fn extract_macro_profile(
    sol: &crate::macro_solver::CoupledSolution,
    line: ProfileLine,
    n: usize,
) -> LineProfile {
    let sigma = sol.ff_grid.y0;
    let (lo, hi) = match line {
        ProfileLine::AlongX1 { .. } => (
            sol.ff_grid.x0,
            sol.ff_grid.x0 + sol.ff_grid.nx as f64 * sol.ff_grid.dx,
        ),
        ProfileLine::AlongX2 { .. } => (
            sol.pm_grid.y0,
            sol.ff_grid.y0 + sol.ff_grid.ny as f64 * sol.ff_grid.dy,
        ),
    };
    let step = (hi - lo) / n as f64;
    let mut out = LineProfile {
        s: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };
    for k in 0..n {
        let s = lo + (k as f64 + 0.5) * step;
        let (x, y) = match line {
            ProfileLine::AlongX1 { x2 } => (s, x2),
            ProfileLine::AlongX2 { x1 } => (x1, s),
        };
        let (grid, field) = if y < sigma {
            (&sol.pm_grid, &sol.pm)
        } else {
            (&sol.ff_grid, &sol.ff)
        };
        out.s.push(s);
        out.u.push(sample_u(grid, &field.u, x, y));
        out.v.push(sample_v(grid, &field.v, x, y));
        out.p.push(sample_p(grid, &field.p, x, y));
    }
    out
}

/// Relative L2 difference ||a - b|| / ||b||, with the denominator floored so
/// comparing two near-zero signals stays finite.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "profiles must share their sampling");
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-14)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::InclusionShape;
    use crate::stokes::{SideBc, VelocityBc};

    fn channel_bc() -> BoundarySpec {
        BoundarySpec {
            left: Some(SideBc::Uniform(VelocityBc::traction_const(1.0))),
            right: Some(SideBc::Uniform(VelocityBc::traction_const(0.0))),
            bottom: Some(SideBc::Uniform(VelocityBc::no_slip())),
            top: Some(SideBc::Uniform(VelocityBc::no_slip())),
        }
    }

    #[test]
    fn unobstructed_run_reproduces_poiseuille() {
        let domain = GridDomain::new(0.0, 1.0, 0.0, 0.5).unwrap();
        let prob = DnsProblem {
            bc: channel_bc(),
            ..DnsProblem::new(domain, None, 32)
        };
        let sol = run_dns(&prob, &SolveOptions::default()).unwrap();
        // Pressure drop 1 over unit length: u(y) = y (h - y) / 2.
        for j in 0..sol.grid.ny {
            for i in 0..=sol.grid.nx {
                let (_, y) = sol.grid.u_pos(i, j);
                let exact = 0.5 * y * (0.5 - y);
                let got = sol.field.u[sol.grid.u_index(i, j)];
                assert!(
                    (got - exact).abs() < 1e-10,
                    "u({y}) = {got}, expected {exact}"
                );
            }
        }
        assert!(sol.max_div < 1e-12);
    }

    #[test]
    fn under_resolved_masks_are_rejected() {
        let domain = GridDomain::new(0.0, 1.0, -0.5, 0.5).unwrap();
        let layout =
            PorousLayout::new(InclusionShape::Circle { radius: 0.25 }, 10, 5, 0.1, 0.0).unwrap();
        // 10 cells per period: below the resolution floor.
        let prob = DnsProblem {
            bc: channel_bc(),
            ..DnsProblem::new(domain, Some(layout), 100)
        };
        assert!(run_dns(&prob, &SolveOptions::default()).is_err());
        // Large inclusions can pinch the throat even when the period looks
        // resolved: radius 0.45 leaves a 0.1-period gap, 1.6 cells at 16/eps.
        let fat =
            PorousLayout::new(InclusionShape::Circle { radius: 0.45 }, 4, 2, 0.25, 0.0).unwrap();
        let domain2 = GridDomain::new(0.0, 1.0, -0.5, 0.5).unwrap();
        let prob2 = DnsProblem {
            bc: channel_bc(),
            ..DnsProblem::new(domain2, Some(fat), 64)
        };
        let err = run_dns(&prob2, &SolveOptions::default()).unwrap_err();
        assert!(format!("{err}").contains("throat"), "got: {err}");
    }

    #[test]
    fn profile_extraction_is_exact_for_bilinear_fields() {
        let domain = GridDomain::new(0.0, 1.0, -0.5, 0.5).unwrap();
        let grid = build_grid(domain, 16, None, false, false, None).unwrap();
        let mut field = StokesField::zeros(&grid);
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                let (x, y) = grid.u_pos(i, j);
                field.u[grid.u_index(i, j)] = 2.0 * x + 3.0 * y - 1.0;
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.v_pos(i, j);
                field.v[grid.v_index(i, j)] = x - 0.5 * y;
            }
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                field.p[grid.cell_index(i, j)] = 4.0 * x * y + 0.25;
            }
        }
        let prof = extract_profile(&grid, &field, ProfileLine::AlongX2 { x1: 0.3 }, 40);
        for (k, &y) in prof.s.iter().enumerate() {
            // Stay inside the sample hull; clamping flattens the outermost rows.
            if y < -0.45 || y > 0.45 {
                continue;
            }
            assert!((prof.u[k] - (2.0 * 0.3 + 3.0 * y - 1.0)).abs() < 1e-12);
            assert!((prof.v[k] - (0.3 - 0.5 * y)).abs() < 1e-12);
            assert!((prof.p[k] - (4.0 * 0.3 * y + 0.25)).abs() < 1e-12);
        }
        let same = rel_l2(&prof.u, &prof.u);
        assert_eq!(same, 0.0);
    }

    #[test]
    fn ensemble_mean_smooths_the_microstructure() {
        // Lid-driven flow over two rows of inclusions; a single realization's
        // near-interface velocity oscillates with the pattern, the shifted
        // ensemble much less.
        let domain = GridDomain::new(0.0, 1.0, -0.5, 0.5).unwrap();
        let layout =
            PorousLayout::new(InclusionShape::Circle { radius: 0.25 }, 4, 2, 0.25, 0.0).unwrap();
        let mut prob = DnsProblem::new(domain, Some(layout), 64);
        prob.periodic_x = true;
        prob.bc = BoundarySpec {
            left: None,
            right: None,
            bottom: Some(SideBc::Uniform(VelocityBc::no_slip())),
            top: Some(SideBc::Uniform(VelocityBc::dirichlet_const(1.0, 0.0))),
        };
        let (sols, avg) = run_ensemble(&prob, 8, &SolveOptions::default()).unwrap();
        assert_eq!(sols.len(), 8);
        let line = ProfileLine::AlongX1 { x2: -0.125 };
        let osc = |g: &StaggeredGrid, f: &StokesField| {
            let prof = extract_profile(g, f, line, 64);
            let mean = prof.u.iter().sum::<f64>() / prof.u.len() as f64;
            prof.u
                .iter()
                .fold(0.0f64, |m, v| m.max((v - mean).abs()))
        };
        let single = osc(&sols[0].grid, &sols[0].field);
        let averaged = osc(&avg.grid, &avg.mean);
        assert!(
            averaged < 0.5 * single,
            "averaging should damp oscillations: single {single}, ensemble {averaged}"
        );
        // Deep below the bed the lid shear has died off.
        let deep = extract_profile(&avg.grid, &avg.mean, ProfileLine::AlongX1 { x2: -0.45 }, 32);
        let deep_max = deep.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(deep_max < 0.02, "deep velocity {deep_max}");
        // Interface-adjacent cells stay fluid in every realization.
        let frac_ok = avg
            .fluid_fraction
            .iter()
            .all(|&f| (0.0..=1.0).contains(&f));
        assert!(frac_ok);
    }

    #[test]
    fn averaging_is_linear() {
        let domain = GridDomain::new(0.0, 1.0, 0.0, 0.5).unwrap();
        let prob = DnsProblem {
            bc: channel_bc(),
            ..DnsProblem::new(domain, None, 16)
        };
        let a = run_dns(&prob, &SolveOptions::default()).unwrap();
        let b = DnsSolution {
            grid: a.grid.clone(),
            field: a.field.scaled(3.0),
            max_div: a.max_div * 3.0,
        };
        let avg = average(&[a, b]).unwrap();
        let domain_check = GridDomain::new(0.0, 1.0, 0.0, 0.5).unwrap();
        let again = run_dns(
            &DnsProblem {
                bc: channel_bc(),
                ..DnsProblem::new(domain_check, None, 16)
            },
            &SolveOptions::default(),
        )
        .unwrap();
        for (m, v) in avg.mean.u.iter().zip(&again.field.u) {
            assert!((m - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_profile_crosses_the_interface_continuously() {
        use crate::macro_solver::{solve_coupled, FfSideBc, InterfaceMode, MacroProblem};
        use std::f64::consts::PI;
        let k = 2.0e-4;
        let mut prob = MacroProblem::new(
            1.0,
            -0.5,
            0.5,
            0.0,
            20,
            [[k, 0.0], [0.0, k]],
            InterfaceMode::New {
                epsilon: 0.1,
                n1_bl: -0.3,
                ns_bl: 0.0,
                m1_bl: [-2.0e-2, 0.0],
            },
        );
        prob.ff_top = FfSideBc::dirichlet(
            |x| (PI * x).sin().powi(2),
            |x| -0.2 * (2.0 * PI * x).cos(),
        );
        let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
        let scale = sol.ff.max_velocity().max(1e-14);
        // The normal velocity is one shared unknown; sampling each subdomain
        // at the interface height must return the same number.
        for x in [0.12, 0.4, 0.77] {
            let above = sample_v(&sol.ff_grid, &sol.ff.v, x, 0.0);
            let below = sample_v(&sol.pm_grid, &sol.pm.v, x, 0.0);
            assert!(
                (above - below).abs() <= 1e-13 * scale,
                "normal-velocity jump at x={x}: {above} vs {below}"
            );
        }
        let prof = extract_macro_profile(&sol, ProfileLine::AlongX2 { x1: 0.37 }, 40);
        assert_eq!(prof.s.len(), 40);
        assert!(prof.s.windows(2).all(|w| w[1] > w[0]));
        // Stations below the interface read the porous fields: Darcy fluxes
        // there sit orders below the lid speed.
        assert!(prof.u[0].abs() < 0.05 * scale && prof.v[0].abs() < 0.05 * scale);
        // Stations above read the free flow; near the lid the speed is O(1).
        assert!(prof.u[39].abs() > 0.05 * scale);
    }
}
