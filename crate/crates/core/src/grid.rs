//! Uniform MAC (staggered) grids: pressure at cell centers, horizontal
//! velocity u on vertical faces, vertical velocity v on horizontal faces.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::SolidGeometry;

/// Axis-aligned rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDomain {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl GridDomain {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Config(format!(
                "degenerate domain ({x0},{x1})x({y0},{y1})"
            )));
        }
        Ok(GridDomain { x0, x1, y0, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// How a cell position relates to the computational domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellRef {
    Fluid(usize),
    Solid,
    Outside,
}

/// Staggered grid with an optional solid mask and an optional internal
/// horizontal interface that must coincide with a v-face row.
#[derive(Debug, Clone)]
pub struct StaggeredGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
    pub periodic_x: bool,
    pub periodic_y: bool,
    /// Row-major cell fluid mask, index `j*nx + i`.
    pub cell_fluid: Vec<bool>,
    /// v-face row index of the internal interface, if any.
    pub interface_row: Option<usize>,
}

/// Builds a grid over `domain` with `resolution` cells per unit length.
/// The domain extents must be integer multiples of the cell size, and
/// `interface_y`, when given, must land exactly on an interior v-face row.
pub fn build_grid(
    domain: GridDomain,
    resolution: usize,
    geometry: Option<&dyn SolidGeometry>,
    periodic_x: bool,
    periodic_y: bool,
    interface_y: Option<f64>,
) -> Result<StaggeredGrid> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let h = 1.0 / resolution as f64;
    let fx = domain.width() * resolution as f64;
    let fy = domain.height() * resolution as f64;
    let nx = fx.round() as usize;
    let ny = fy.round() as usize;
    if nx == 0 || ny == 0 || (fx - nx as f64).abs() > 1e-9 || (fy - ny as f64).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "domain extents {}x{} are not multiples of the cell size {h}",
            domain.width(),
            domain.height()
        )));
    }
    let interface_row = match interface_y {
        None => None,
        Some(y) => {
            let fj = (y - domain.y0) / h;
            let j = fj.round() as isize;
            if (fj - j as f64).abs() > 1e-9 || j <= 0 || j >= ny as isize {
                return Err(Error::Config(format!(
                    "interface y={y} does not coincide with an interior face row"
                )));
            }
            Some(j as usize)
        }
    };
    let mut cell_fluid = vec![true; nx * ny];
    if let Some(geo) = geometry {
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (
                    domain.x0 + (i as f64 + 0.5) * h,
                    domain.y0 + (j as f64 + 0.5) * h,
                );
                cell_fluid[j * nx + i] = !geo.is_solid_at(x, y);
            }
        }
    }
    Ok(StaggeredGrid {
        nx,
        ny,
        dx: h,
        dy: h,
        x0: domain.x0,
        y0: domain.y0,
        periodic_x,
        periodic_y,
        cell_fluid,
        interface_row,
    })
}

impl StaggeredGrid {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Cell lookup with periodic wrapping; `Outside` past non-periodic edges.
    pub fn cell(&self, i: isize, j: isize) -> CellRef {
        let nx = self.nx as isize;
        let ny = self.ny as isize;
        let i = if self.periodic_x { i.rem_euclid(nx) } else { i };
        let j = if self.periodic_y { j.rem_euclid(ny) } else { j };
        if i < 0 || i >= nx || j < 0 || j >= ny {
            return CellRef::Outside;
        }
        let c = (j * nx + i) as usize;
        if self.cell_fluid[c] {
            CellRef::Fluid(c)
        } else {
            CellRef::Solid
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 + (i as f64 + 0.5) * self.dx,
            self.y0 + (j as f64 + 0.5) * self.dy,
        )
    }

    /// Position of the u-face (i, j), i in 0..=nx.
    pub fn u_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 + i as f64 * self.dx,
            self.y0 + (j as f64 + 0.5) * self.dy,
        )
    }

    /// Position of the v-face (i, j), j in 0..=ny.
    pub fn v_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 + (i as f64 + 0.5) * self.dx,
            self.y0 + j as f64 * self.dy,
        )
    }

    pub fn u_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn v_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn n_u(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn n_v(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    /// A u-face is active iff at least one adjacent existing cell is fluid.
    pub fn u_active(&self, i: usize, j: usize) -> bool {
        let j = j as isize;
        let i = i as isize;
        matches!(self.cell(i - 1, j), CellRef::Fluid(_))
            || matches!(self.cell(i, j), CellRef::Fluid(_))
    }

    /// A v-face is active iff at least one adjacent existing cell is fluid.
    pub fn v_active(&self, i: usize, j: usize) -> bool {
        let j = j as isize;
        let i = i as isize;
        matches!(self.cell(i, j - 1), CellRef::Fluid(_))
            || matches!(self.cell(i, j), CellRef::Fluid(_))
    }

    pub fn solid_cell_count(&self) -> usize {
        self.cell_fluid.iter().filter(|&&f| !f).count()
    }

    pub fn solid_area(&self) -> f64 {
        self.solid_cell_count() as f64 * self.dx * self.dy
    }
}

/// Discrete velocity/pressure field on a staggered grid. Values on inactive
/// faces and solid cells are exactly zero.
#[derive(Debug, Clone)]
pub struct StokesField {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

impl StokesField {
    pub fn zeros(grid: &StaggeredGrid) -> Self {
        StokesField {
            u: vec![0.0; grid.n_u()],
            v: vec![0.0; grid.n_v()],
            p: vec![0.0; grid.n_cells()],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        StokesField {
            u: self.u.iter().map(|x| c * x).collect(),
            v: self.v.iter().map(|x| c * x).collect(),
            p: self.p.iter().map(|x| c * x).collect(),
        }
    }

    /// Maximum velocity magnitude over active faces.
    pub fn max_velocity(&self) -> f64 {
        self.u
            .iter()
            .chain(self.v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Writes the field as CSV, one row per grid entity.
    pub fn write_csv<W: Write>(&self, grid: &StaggeredGrid, mut w: W) -> Result<()> {
        writeln!(w, "kind,i,j,x,y,value")?;
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                let (x, y) = grid.u_pos(i, j);
                writeln!(w, "u,{i},{j},{x},{y},{}", self.u[grid.u_index(i, j)])?;
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.v_pos(i, j);
                writeln!(w, "v,{i},{j},{x},{y},{}", self.v[grid.v_index(i, j)])?;
            }
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                writeln!(w, "p,{i},{j},{x},{y},{}", self.p[grid.cell_index(i, j)])?;
            }
        }
        Ok(())
    }
}

/// Per-cell discrete divergence `(u_E - u_W)/dx + (v_N - v_S)/dy`; zero on
/// solid cells.
pub fn discrete_divergence(grid: &StaggeredGrid, field: &StokesField) -> Vec<f64> {
    let mut div = vec![0.0; grid.n_cells()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.cell_index(i, j);
            if !grid.cell_fluid[c] {
                continue;
            }
            let ue = field.u[grid.u_index(i + 1, j)];
            let uw = field.u[grid.u_index(i, j)];
            let vn = field.v[grid.v_index(i, j + 1)];
            let vs = field.v[grid.v_index(i, j)];
            div[c] = (ue - uw) / grid.dx + (vn - vs) / grid.dy;
        }
    }
    div
}

pub fn max_divergence(grid: &StaggeredGrid, field: &StokesField) -> f64 {
    discrete_divergence(grid, field)
        .iter()
        .fold(0.0f64, |m, &d| m.max(d.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{InclusionShape, UnitCellGeometry};

    fn unit_domain() -> GridDomain {
        GridDomain::new(0.0, 1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn obstacle_free_grid_is_all_fluid() {
        let d = GridDomain::new(0.0, 2.0, 0.0, 1.0).unwrap();
        let g = build_grid(d, 50, None, false, false, None).unwrap();
        assert_eq!((g.nx, g.ny), (100, 50));
        assert!(g.cell_fluid.iter().all(|&f| f));
        assert_eq!(g.solid_cell_count(), 0);
    }

    #[test]
    fn circle_mask_cell_count() {
        let cell = UnitCellGeometry::new(InclusionShape::Circle { radius: 0.25 }).unwrap();
        let g = build_grid(unit_domain(), 64, Some(&cell), true, true, None).unwrap();
        let exact = std::f64::consts::PI * 0.25 * 0.25 * 64.0 * 64.0;
        let perimeter_cells = 2.0 * std::f64::consts::PI * 0.25 * 64.0;
        let err = (g.solid_cell_count() as f64 - exact).abs();
        assert!(err <= perimeter_cells, "count error {err}");
    }

    #[test]
    fn face_activity_matches_mask() {
        let cell = UnitCellGeometry::new(InclusionShape::Circle { radius: 0.3 }).unwrap();
        let g = build_grid(unit_domain(), 32, Some(&cell), true, true, None).unwrap();
        for j in 0..g.ny {
            for i in 0..=g.nx {
                let left = g.cell(i as isize - 1, j as isize);
                let right = g.cell(i as isize, j as isize);
                let expect = matches!(left, CellRef::Fluid(_)) || matches!(right, CellRef::Fluid(_));
                assert_eq!(g.u_active(i, j), expect);
            }
        }
        for j in 0..=g.ny {
            for i in 0..g.nx {
                let below = g.cell(i as isize, j as isize - 1);
                let above = g.cell(i as isize, j as isize);
                let expect =
                    matches!(below, CellRef::Fluid(_)) || matches!(above, CellRef::Fluid(_));
                assert_eq!(g.v_active(i, j), expect);
            }
        }
    }

    #[test]
    fn interface_must_sit_on_face_row() {
        let d = GridDomain::new(0.0, 1.0, -0.5, 0.5).unwrap();
        let g = build_grid(d, 10, None, false, false, Some(0.0)).unwrap();
        assert_eq!(g.interface_row, Some(5));
        assert!(build_grid(d, 10, None, false, false, Some(0.03)).is_err());
        assert!(build_grid(d, 10, None, false, false, Some(-0.5)).is_err());
    }

    #[test]
    fn incommensurate_domain_rejected() {
        let d = GridDomain::new(0.0, 1.003, 0.0, 1.0).unwrap();
        assert!(build_grid(d, 10, None, false, false, None).is_err());
    }

    #[test]
    fn divergence_of_linear_field() {
        let g = build_grid(unit_domain(), 16, None, false, false, None).unwrap();
        let mut f = StokesField::zeros(&g);
        // u = x, v = -y has zero divergence; u = x alone has div 1.
        for j in 0..g.ny {
            for i in 0..=g.nx {
                f.u[g.u_index(i, j)] = g.u_pos(i, j).0;
            }
        }
        for j in 0..=g.ny {
            for i in 0..g.nx {
                f.v[g.v_index(i, j)] = -g.v_pos(i, j).1;
            }
        }
        let div = discrete_divergence(&g, &f);
        assert!(div.iter().all(|d| d.abs() < 1e-12));
        for x in f.v.iter_mut() {
            *x = 0.0;
        }
        let div = discrete_divergence(&g, &f);
        assert!(div.iter().all(|d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn stair_step_area_first_order() {
        // Off-center circle (via a shifted layout sampled through the mask)
        // to avoid symmetric superconvergence.
        let shape = InclusionShape::Circle { radius: 0.25 };
        let exact = std::f64::consts::PI * 0.25 * 0.25;
        let mut errs = Vec::new();
        for res in [32usize, 64, 128, 256] {
            let layout =
                crate::geometry::PorousLayout::new(shape.clone(), 1, 1, 1.0, 0.37).unwrap();
            let d = GridDomain::new(0.0, 1.0, -1.0, 0.0).unwrap();
            let g = build_grid(d, res, Some(&layout), true, false, None).unwrap();
            errs.push(((g.solid_area() - exact).abs(), res));
        }
        for (err, res) in &errs {
            // First-order bound with the perimeter as the constant.
            let bound = 2.0 * std::f64::consts::PI * 0.25 / *res as f64;
            assert!(*err <= bound, "res {res}: error {err} > bound {bound}");
        }
    }
}
