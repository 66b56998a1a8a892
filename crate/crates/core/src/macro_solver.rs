//! Coupled macroscale solver: Stokes flow above a sharp interface, Darcy flow
//! below, assembled monolithically. Normal velocities on the interface are
//! shared unknowns (flux continuity is exact by construction); the remaining
//! coupling is closed either by the classical Beavers-Joseph set or by the
//! homogenized conditions with boundary-layer constants.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridDomain, StaggeredGrid, StokesField};
use crate::linalg::{self, attach_mean_zero_gauge, SolveOptions, TripletList};
use crate::stokes::{Field2, PressureGauge, Profile};

/// Condition on a free-flow side (vertical sides and top). Profiles take the
/// along-side coordinate.
#[derive(Clone)]
pub enum FfSideBc {
    Dirichlet { u: Profile, v: Profile },
    /// (grad(v) - pI) n = -pbar n; zero tangential shear.
    Traction { pressure: Profile },
}

impl FfSideBc {
    pub fn no_slip() -> Self {
        FfSideBc::dirichlet_const(0.0, 0.0)
    }

    pub fn dirichlet_const(u: f64, v: f64) -> Self {
        FfSideBc::Dirichlet {
            u: Arc::new(move |_| u),
            v: Arc::new(move |_| v),
        }
    }

    pub fn dirichlet(
        u: impl Fn(f64) -> f64 + Send + Sync + 'static,
        v: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FfSideBc::Dirichlet {
            u: Arc::new(u),
            v: Arc::new(v),
        }
    }

    pub fn outflow() -> Self {
        FfSideBc::Traction {
            pressure: Arc::new(|_| 0.0),
        }
    }

    pub fn traction(pressure: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        FfSideBc::Traction {
            pressure: Arc::new(pressure),
        }
    }
}

/// Condition on a porous-medium side (vertical sides and bottom).
#[derive(Clone)]
pub enum PmSideBc {
    /// Prescribed boundary pressure.
    Pressure(Profile),
    /// Zero normal flux.
    Impermeable,
}

impl PmSideBc {
    pub fn pressure(p: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        PmSideBc::Pressure(Arc::new(p))
    }
}

/// Interface-condition set closing the coupled system.
#[derive(Clone, Debug)]
pub enum InterfaceMode {
    /// Homogenized conditions: pressure jump with the stripe constants and a
    /// slip velocity driven by free-flow shear and the porous pressure
    /// gradient.
    New {
        epsilon: f64,
        n1_bl: f64,
        ns_bl: f64,
        m1_bl: [f64; 2],
    },
    /// Beavers-Joseph slip plus balance of normal forces (non-symmetric
    /// stress form).
    ClassicalBj { alpha: f64 },
}

pub struct MacroProblem {
    /// Horizontal extent (0, length).
    pub length: f64,
    /// Vertical extent (bottom_y, top_y) with the interface strictly between.
    pub bottom_y: f64,
    pub top_y: f64,
    pub interface_y: f64,
    /// Grid cells per unit length, both directions and both subdomains.
    pub resolution: usize,
    pub periodic_x: bool,
    /// Side conditions; lateral ones must be None exactly when periodic.
    pub ff_left: Option<FfSideBc>,
    pub ff_right: Option<FfSideBc>,
    pub ff_top: FfSideBc,
    pub pm_left: Option<PmSideBc>,
    pub pm_right: Option<PmSideBc>,
    pub pm_bottom: PmSideBc,
    /// Effective permeability tensor (already scaled to the macroscale,
    /// i.e. epsilon^2 * K).
    pub k_eff: [[f64; 2]; 2],
    pub mode: InterfaceMode,
    pub gauge: PressureGauge,
    /// Free-flow body force.
    pub f1: Option<Field2>,
    pub f2: Option<Field2>,
}

impl MacroProblem {
    /// Starts from a closed box: no-slip top, impermeable bottom, periodic
    /// lateral boundaries. Callers override the sides they need.
    pub fn new(
        length: f64,
        bottom_y: f64,
        top_y: f64,
        interface_y: f64,
        resolution: usize,
        k_eff: [[f64; 2]; 2],
        mode: InterfaceMode,
    ) -> Self {
        MacroProblem {
            length,
            bottom_y,
            top_y,
            interface_y,
            resolution,
            periodic_x: true,
            ff_left: None,
            ff_right: None,
            ff_top: FfSideBc::no_slip(),
            pm_left: None,
            pm_right: None,
            pm_bottom: PmSideBc::Impermeable,
            k_eff,
            mode,
            gauge: PressureGauge::Auto,
            f1: None,
            f2: None,
        }
    }
}

/// Interface samples from both sides.
pub struct InterfaceTrace {
    /// Cell-center x positions.
    pub x_centers: Vec<f64>,
    /// Vertical-face x positions.
    pub x_faces: Vec<f64>,
    /// Shared normal velocity at cell centers on the interface.
    pub v_normal: Vec<f64>,
    /// Free-flow tangential velocity on the interface (slip unknowns), at faces.
    pub u_slip: Vec<f64>,
    /// Porous-side tangential Darcy flux at the interface, at faces.
    pub u_pm: Vec<f64>,
    /// One-sided free-flow pressure trace at cell centers.
    pub p_ff: Vec<f64>,
    /// One-sided porous pressure trace at cell centers.
    pub p_pm: Vec<f64>,
}

pub struct CoupledSolution {
    pub ff_grid: StaggeredGrid,
    pub pm_grid: StaggeredGrid,
    /// Free-flow velocity and pressure.
    pub ff: StokesField,
    /// Porous medium: u, v hold the Darcy face fluxes, p the pressure.
    pub pm: StokesField,
    pub trace: InterfaceTrace,
    pub mode: InterfaceMode,
    /// Largest continuity defect per cell, each subdomain.
    pub max_div_ff: f64,
    pub max_div_pm: f64,
}

/// Linear combination of unknowns plus a constant; the assembly currency for
/// every interface expression and Darcy flux, reused verbatim for
/// reconstruction so stored fluxes match the solved equations bit for bit.
#[derive(Clone, Default)]
struct LinForm {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl LinForm {
    fn add(&mut self, dof: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((dof, coef));
        }
    }

    fn add_scaled(&mut self, other: &LinForm, s: f64) {
        if s == 0.0 {
            return;
        }
        for &(d, c) in &other.terms {
            self.add(d, s * c);
        }
        self.constant += s * other.constant;
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut s = self.constant;
        for &(d, c) in &self.terms {
            s += c * x[d];
        }
        s
    }
}

struct MacroAsm<'p> {
    prob: &'p MacroProblem,
    gf: StaggeredGrid,
    gp: StaggeredGrid,
    nx: usize,
    base_v: usize,
    base_pf: usize,
    base_pp: usize,
    base_s: usize,
    trips: TripletList,
    rhs: Vec<f64>,
    /// Traction or prescribed-pressure boundary present (fixes the pressure
    /// level, so no gauge is needed).
    has_natural: bool,
}

impl<'p> MacroAsm<'p> {
    fn udof(&self, i: usize, j: usize) -> usize {
        self.gf.u_index(i, j)
    }

    fn vdof(&self, i: usize, j: usize) -> usize {
        self.base_v + self.gf.v_index(i, j)
    }

    fn pfdof(&self, i: usize, j: usize) -> usize {
        self.base_pf + self.gf.cell_index(i, j)
    }

    fn ppdof(&self, i: usize, j: usize) -> usize {
        self.base_pp + self.gp.cell_index(i, j)
    }

    fn sdof(&self, i: usize) -> usize {
        self.base_s + i
    }

    fn identity(&mut self, row: usize, value: f64) {
        self.trips.push(row, row, 1.0);
        self.rhs[row] = value;
    }

    fn push_equation(&mut self, row: usize, form: &LinForm) {
        for &(d, c) in &form.terms {
            self.trips.push(row, d, c);
        }
        self.rhs[row] -= form.constant;
    }

    /// Wraps a pm cell column index; None when it falls outside a
    /// non-periodic domain.
    fn pm_col(&self, i: isize) -> Option<usize> {
        if self.prob.periodic_x {
            Some(i.rem_euclid(self.nx as isize) as usize)
        } else if (0..self.nx as isize).contains(&i) {
            Some(i as usize)
        } else {
            None
        }
    }

    // ----- interface expression forms (assembly and post-solve extraction) -----

    /// d v1 / d y at the interface, at u-face column `i` (second-order,
    /// one-sided from the free flow, through the slip unknown).
    fn shear_form(&self, i: usize) -> LinForm {
        let dy = self.gf.dy;
        let mut f = LinForm::default();
        f.add(self.sdof(i), -8.0 / (3.0 * dy));
        f.add(self.udof(i, 0), 9.0 / (3.0 * dy));
        f.add(self.udof(i, 1), -1.0 / (3.0 * dy));
        f
    }

    /// d v2 / d y at the interface, at cell-center column `i` (one-sided from
    /// the free flow; the interface value is the shared unknown itself).
    fn dvdy_form(&self, i: usize) -> LinForm {
        let dy = self.gf.dy;
        let mut f = LinForm::default();
        f.add(self.vdof(i, 0), -3.0 / (2.0 * dy));
        f.add(self.vdof(i, 1), 4.0 / (2.0 * dy));
        f.add(self.vdof(i, 2), -1.0 / (2.0 * dy));
        f
    }

    /// Free-flow pressure extrapolated to the interface at cell center `i`.
    fn pff_trace_form(&self, i: usize) -> LinForm {
        let mut f = LinForm::default();
        f.add(self.pfdof(i, 0), 15.0 / 8.0);
        f.add(self.pfdof(i, 1), -10.0 / 8.0);
        f.add(self.pfdof(i, 2), 3.0 / 8.0);
        f
    }

    /// Porous pressure extrapolated to the interface at cell center `i`
    /// (one-sided from below).
    fn ppm_trace_form(&self, i: usize) -> LinForm {
        let jt = self.gp.ny - 1;
        let mut f = LinForm::default();
        f.add(self.ppdof(i, jt), 15.0 / 8.0);
        f.add(self.ppdof(i, jt - 1), -10.0 / 8.0);
        f.add(self.ppdof(i, jt - 2), 3.0 / 8.0);
        f
    }

    /// Porous pressure trace on the interface implied by the active
    /// interface-condition set, at cell center `i`.
    fn ppm_condition_form(&self, i: usize) -> LinForm {
        let mut f = self.pff_trace_form(i);
        f.add_scaled(&self.dvdy_form(i), -1.0);
        if let InterfaceMode::New { ns_bl, .. } = self.prob.mode {
            // Average the face shears to the cell center.
            f.add_scaled(&self.shear_form(i), 0.5 * ns_bl);
            f.add_scaled(&self.shear_form(i + 1), 0.5 * ns_bl);
        }
        f
    }

    /// d p^pm / d x1 along the top porous cell row, at u-face column `i`
    /// (centered across the face).
    fn dpdx_face_form(&self, i: usize) -> LinForm {
        let dx = self.gp.dx;
        let jt = self.gp.ny - 1;
        let mut f = LinForm::default();
        let left = self.pm_col(i as isize - 1);
        let right = if i < self.nx || self.prob.periodic_x {
            self.pm_col(i as isize)
        } else {
            None
        };
        match (left, right) {
            (Some(l), Some(r)) => {
                f.add(self.ppdof(r, jt), 1.0 / dx);
                f.add(self.ppdof(l, jt), -1.0 / dx);
            }
            (None, Some(r)) => match self.prob.pm_left.as_ref() {
                Some(PmSideBc::Pressure(pb)) => {
                    // Ghost cell mirrored through the prescribed trace.
                    let y = self.gp.cell_center(r, jt).1;
                    f.add(self.ppdof(r, jt), 2.0 / dx);
                    f.constant += -2.0 * pb(y) / dx;
                }
                // No normal flow: the pressure gradient into the wall is
                // dominated by the zero-flux condition; drop the term.
                _ => {}
            },
            (Some(l), None) => match self.prob.pm_right.as_ref() {
                Some(PmSideBc::Pressure(pb)) => {
                    let y = self.gp.cell_center(l, jt).1;
                    f.add(self.ppdof(l, jt), -2.0 / dx);
                    f.constant += 2.0 * pb(y) / dx;
                }
                _ => {}
            },
            (None, None) => {}
        }
        f
    }

    /// d p^pm / d y at the interface height, at u-face column `i`: average of
    /// one-sided (second-order) column slopes on both adjacent columns.
    fn dpdy_face_form(&self, i: usize) -> LinForm {
        let dy = self.gp.dy;
        let jt = self.gp.ny - 1;
        let mut f = LinForm::default();
        let mut cols = Vec::new();
        if let Some(l) = self.pm_col(i as isize - 1) {
            cols.push(l);
        }
        if i < self.nx || self.prob.periodic_x {
            if let Some(r) = self.pm_col(i as isize) {
                cols.push(r);
            }
        }
        let w = 1.0 / cols.len().max(1) as f64;
        for c in cols {
            f.add(self.ppdof(c, jt), 2.0 * w / dy);
            f.add(self.ppdof(c, jt - 1), -3.0 * w / dy);
            f.add(self.ppdof(c, jt - 2), w / dy);
        }
        f
    }

    /// Porous-side tangential Darcy flux at the interface, at u-face `i`.
    fn upm_form(&self, i: usize) -> LinForm {
        let k = self.prob.k_eff;
        let mut f = LinForm::default();
        f.add_scaled(&self.dpdx_face_form(i), -k[0][0]);
        f.add_scaled(&self.dpdy_face_form(i), -k[0][1]);
        f
    }

    // ----- Darcy face fluxes -----

    /// Horizontal Darcy flux through the vertical pm face left of cell
    /// column `i_face` in row `j` (i_face in 0..=nx).
    fn qx_form(&self, i_face: usize, j: usize) -> LinForm {
        let k = self.prob.k_eff;
        let (dx, dy) = (self.gp.dx, self.gp.dy);
        let ny = self.gp.ny;
        let mut f = LinForm::default();
        let left = self.pm_col(i_face as isize - 1);
        let right = if i_face < self.nx || self.prob.periodic_x {
            self.pm_col(i_face as isize)
        } else {
            None
        };
        match (left, right) {
            (Some(l), Some(r)) => {
                f.add(self.ppdof(r, j), -k[0][0] / dx);
                f.add(self.ppdof(l, j), k[0][0] / dx);
                if k[0][1] != 0.0 {
                    // Cross term: four-corner stencil, one-sided at the top
                    // and bottom rows.
                    let (jlo, jhi, scale) = if j + 1 < ny && j > 0 {
                        (j - 1, j + 1, 4.0)
                    } else if j + 1 < ny {
                        (j, j + 1, 2.0)
                    } else {
                        (j - 1, j, 2.0)
                    };
                    for c in [l, r] {
                        f.add(self.ppdof(c, jhi), -k[0][1] / (scale * dy));
                        f.add(self.ppdof(c, jlo), k[0][1] / (scale * dy));
                    }
                }
            }
            (None, Some(r)) => {
                self.boundary_qx(&mut f, r, j, true);
            }
            (Some(l), None) => {
                self.boundary_qx(&mut f, l, j, false);
            }
            (None, None) => {}
        }
        f
    }

    /// Flux through a non-periodic vertical pm boundary face.
    fn boundary_qx(&self, f: &mut LinForm, cell_col: usize, j: usize, left_side: bool) {
        let side = if left_side {
            self.prob.pm_left.as_ref()
        } else {
            self.prob.pm_right.as_ref()
        };
        let Some(PmSideBc::Pressure(pb)) = side else {
            // Impermeable: zero flux.
            return;
        };
        let k = self.prob.k_eff;
        let (dx, dy) = (self.gp.dx, self.gp.dy);
        let ny = self.gp.ny;
        let y = self.gp.cell_center(cell_col, j).1;
        let pbv = pb(y);
        // Two-point gradient through the ghost cell 2*pb - p.
        let sign = if left_side { 1.0 } else { -1.0 };
        f.add(self.ppdof(cell_col, j), -sign * 2.0 * k[0][0] / dx);
        f.constant += sign * 2.0 * k[0][0] * pbv / dx;
        if k[0][1] != 0.0 {
            // Vertical gradient taken one column in: first order in x.
            let (jlo, jhi, scale) = if j + 1 < ny && j > 0 {
                (j - 1, j + 1, 2.0)
            } else if j + 1 < ny {
                (j, j + 1, 1.0)
            } else {
                (j - 1, j, 1.0)
            };
            f.add(self.ppdof(cell_col, jhi), -k[0][1] / (scale * dy));
            f.add(self.ppdof(cell_col, jlo), k[0][1] / (scale * dy));
        }
    }

    /// Vertical Darcy flux through the horizontal pm face below cell row
    /// `j_face` in column `i` (j_face in 0..=ny; the top face is the shared
    /// interface unknown).
    fn qy_form(&self, i: usize, j_face: usize) -> LinForm {
        let k = self.prob.k_eff;
        let dy = self.gp.dy;
        let ny = self.gp.ny;
        let mut f = LinForm::default();
        if j_face == ny {
            f.add(self.vdof(i, 0), 1.0);
            return f;
        }
        if j_face == 0 {
            match &self.prob.pm_bottom {
                PmSideBc::Impermeable => return f,
                PmSideBc::Pressure(pb) => {
                    let x = self.gp.cell_center(i, 0).0;
                    let pbv = pb(x);
                    f.add(self.ppdof(i, 0), -2.0 * k[1][1] / dy);
                    f.constant += 2.0 * k[1][1] * pbv / dy;
                    if k[1][0] != 0.0 {
                        let mut dpdx = LinForm::default();
                        self.row_dpdx(&mut dpdx, i, 0, 0);
                        f.add_scaled(&dpdx, -k[1][0]);
                    }
                    return f;
                }
            }
        }
        f.add(self.ppdof(i, j_face), -k[1][1] / dy);
        f.add(self.ppdof(i, j_face - 1), k[1][1] / dy);
        if k[1][0] != 0.0 {
            let mut dpdx = LinForm::default();
            self.row_dpdx(&mut dpdx, i, j_face - 1, j_face);
            f.add_scaled(&dpdx, -k[1][0]);
        }
        f
    }

    /// Horizontal pressure gradient at a horizontal-face center, averaging
    /// the rows `ja` and `jb` (equal for boundary faces): four-corner stencil
    /// with one-sided fallback at non-periodic sides.
    fn row_dpdx(&self, f: &mut LinForm, i: usize, ja: usize, jb: usize) {
        let dx = self.gp.dx;
        let rows: &[usize] = if ja == jb { &[ja] } else { &[ja, jb] };
        let w = 1.0 / rows.len() as f64;
        let (left, right) = (self.pm_col(i as isize - 1), self.pm_col(i as isize + 1));
        match (left, right) {
            (Some(l), Some(r)) => {
                for &j in rows {
                    f.add(self.ppdof(r, j), w / (2.0 * dx));
                    f.add(self.ppdof(l, j), -w / (2.0 * dx));
                }
            }
            (None, Some(r)) => {
                for &j in rows {
                    f.add(self.ppdof(r, j), w / dx);
                    f.add(self.ppdof(i, j), -w / dx);
                }
            }
            (Some(l), None) => {
                for &j in rows {
                    f.add(self.ppdof(i, j), w / dx);
                    f.add(self.ppdof(l, j), -w / dx);
                }
            }
            (None, None) => {}
        }
    }

    // ----- free-flow rows -----

    /// Tangential (y) coupling of a u row; returns the diagonal contribution.
    fn u_tangential(&mut self, row: usize, i: usize, j: usize, up: bool) -> Result<f64> {
        let gf = &self.gf;
        let dy2 = gf.dy * gf.dy;
        if up {
            if j + 1 < gf.ny {
                self.trips.push(row, self.udof(i, j + 1), -1.0 / dy2);
                return Ok(1.0 / dy2);
            }
            let x = gf.u_pos(i, j).0;
            match &self.prob.ff_top {
                FfSideBc::Dirichlet { u, .. } => {
                    let gv = u(x);
                    self.trips.push(row, self.udof(i, j - 1), -1.0 / (3.0 * dy2));
                    self.rhs[row] += 8.0 * gv / (3.0 * dy2);
                    Ok(3.0 / dy2)
                }
                FfSideBc::Traction { .. } => Ok(0.0),
            }
        } else {
            if j > 0 {
                self.trips.push(row, self.udof(i, j - 1), -1.0 / dy2);
                return Ok(1.0 / dy2);
            }
            // Interface side: quadratic ghost through the slip unknown.
            self.trips.push(row, self.sdof(i), -8.0 / (3.0 * dy2));
            self.trips.push(row, self.udof(i, 1), -1.0 / (3.0 * dy2));
            Ok(3.0 / dy2)
        }
    }

    /// Tangential (x) coupling of a v row; returns the diagonal contribution.
    fn v_tangential(&mut self, row: usize, i: usize, j: usize, right: bool) -> Result<f64> {
        let gf = &self.gf;
        let dx2 = gf.dx * gf.dx;
        let in_ = if right { i as isize + 1 } else { i as isize - 1 };
        if (0..self.nx as isize).contains(&in_) || self.prob.periodic_x {
            let ii = in_.rem_euclid(self.nx as isize) as usize;
            self.trips.push(row, self.vdof(ii, j), -1.0 / dx2);
            return Ok(1.0 / dx2);
        }
        let side = if right {
            self.prob.ff_right.as_ref()
        } else {
            self.prob.ff_left.as_ref()
        };
        let side = side.ok_or_else(|| Error::Config("missing free-flow side condition".into()))?;
        let y = self.gf.v_pos(i, j).1;
        match side {
            FfSideBc::Dirichlet { v, .. } => {
                let gv = v(y);
                let ifar = if right { i as isize - 1 } else { i as isize + 1 };
                if (0..self.nx as isize).contains(&ifar) {
                    self.trips
                        .push(row, self.vdof(ifar as usize, j), -1.0 / (3.0 * dx2));
                    self.rhs[row] += 8.0 * gv / (3.0 * dx2);
                    Ok(3.0 / dx2)
                } else {
                    self.rhs[row] += 2.0 * gv / dx2;
                    Ok(2.0 / dx2)
                }
            }
            FfSideBc::Traction { .. } => Ok(0.0),
        }
    }

    fn u_momentum_row(&mut self, i: usize, j: usize) -> Result<()> {
        let row = self.udof(i, j);
        let gf = &self.gf;
        let dx2 = gf.dx * gf.dx;
        let (x, y) = gf.u_pos(i, j);
        let iw = if i == 0 { self.nx - 1 } else { i - 1 };
        self.trips.push(row, self.udof(iw, j), -1.0 / dx2);
        self.trips.push(row, self.udof(i + 1, j), -1.0 / dx2);
        let ic = i % self.nx;
        let icw = if i == 0 { self.nx - 1 } else { i - 1 };
        self.trips.push(row, self.pfdof(ic, j), 1.0 / gf.dx);
        self.trips.push(row, self.pfdof(icw, j), -1.0 / gf.dx);
        let mut diag = 2.0 / dx2;
        diag += self.u_tangential(row, i, j, false)?;
        diag += self.u_tangential(row, i, j, true)?;
        self.trips.push(row, row, diag);
        if let Some(f1) = &self.prob.f1 {
            self.rhs[row] += f1(x, y);
        }
        Ok(())
    }

    fn v_momentum_row(&mut self, i: usize, j: usize) -> Result<()> {
        let row = self.vdof(i, j);
        let gf = &self.gf;
        let dy2 = gf.dy * gf.dy;
        let (x, y) = gf.v_pos(i, j);
        self.trips.push(row, self.vdof(i, j - 1), -1.0 / dy2);
        self.trips.push(row, self.vdof(i, j + 1), -1.0 / dy2);
        self.trips.push(row, self.pfdof(i, j), 1.0 / gf.dy);
        self.trips.push(row, self.pfdof(i, j - 1), -1.0 / gf.dy);
        let mut diag = 2.0 / dy2;
        diag += self.v_tangential(row, i, j, false)?;
        diag += self.v_tangential(row, i, j, true)?;
        self.trips.push(row, row, diag);
        if let Some(f2) = &self.prob.f2 {
            self.rhs[row] += f2(x, y);
        }
        Ok(())
    }

    fn u_boundary_row(&mut self, i: usize, j: usize) -> Result<()> {
        let row = self.udof(i, j);
        let left_side = i == 0;
        let side = if left_side {
            self.prob.ff_left.as_ref()
        } else {
            self.prob.ff_right.as_ref()
        };
        let side = side.ok_or_else(|| Error::Config("missing free-flow side condition".into()))?;
        let (x, y) = self.gf.u_pos(i, j);
        match side {
            FfSideBc::Dirichlet { u, .. } => self.identity(row, u(y)),
            FfSideBc::Traction { pressure } => {
                let gf = &self.gf;
                let dx = gf.dx;
                let dx2 = dx * dx;
                let pbar = pressure(y);
                let mut diag = 2.0 / dx2;
                if left_side {
                    self.trips.push(row, self.udof(1, j), -2.0 / dx2);
                    self.trips.push(row, self.pfdof(0, j), 2.0 / dx);
                    self.rhs[row] += 2.0 * pbar / dx;
                } else {
                    self.trips.push(row, self.udof(self.nx - 1, j), -2.0 / dx2);
                    self.trips.push(row, self.pfdof(self.nx - 1, j), -2.0 / dx);
                    self.rhs[row] -= 2.0 * pbar / dx;
                }
                diag += self.u_tangential(row, i, j, false)?;
                diag += self.u_tangential(row, i, j, true)?;
                self.trips.push(row, row, diag);
                if let Some(f1) = &self.prob.f1 {
                    self.rhs[row] += f1(x, y);
                }
            }
        }
        Ok(())
    }

    fn v_top_row(&mut self, i: usize) -> Result<()> {
        let j = self.gf.ny;
        let row = self.vdof(i, j);
        let (x, y) = self.gf.v_pos(i, j);
        match &self.prob.ff_top {
            FfSideBc::Dirichlet { v, .. } => self.identity(row, v(x)),
            FfSideBc::Traction { pressure } => {
                let gf = &self.gf;
                let dy = gf.dy;
                let dy2 = dy * dy;
                let pbar = pressure(x);
                let mut diag = 2.0 / dy2;
                self.trips.push(row, self.vdof(i, j - 1), -2.0 / dy2);
                self.trips.push(row, self.pfdof(i, j - 1), -2.0 / dy);
                self.rhs[row] -= 2.0 * pbar / dy;
                diag += self.v_tangential(row, i, j, false)?;
                diag += self.v_tangential(row, i, j, true)?;
                self.trips.push(row, row, diag);
                if let Some(f2) = &self.prob.f2 {
                    self.rhs[row] += f2(x, y);
                }
            }
        }
        Ok(())
    }

    /// Interface row for the shared normal velocity: the Darcy law evaluated
    /// at the interface, with the porous pressure trace supplied by the
    /// active interface-condition set.
    fn interface_normal_row(&mut self, i: usize) {
        let row = self.vdof(i, 0);
        let k = self.prob.k_eff;
        let dy = self.gp.dy;
        let jt = self.gp.ny - 1;
        let mut form = LinForm::default();
        form.add(row, 1.0);
        // Tangential pressure gradient along the interface row (centered at
        // the cell center).
        if k[1][0] != 0.0 {
            let mut dpdx = LinForm::default();
            self.row_dpdx(&mut dpdx, i, jt, jt);
            form.add_scaled(&dpdx, k[1][0]);
        }
        // Normal gradient through the conditioned trace (second order).
        let mut dpdy = LinForm::default();
        dpdy.add_scaled(&self.ppm_condition_form(i), 8.0 / (3.0 * dy));
        dpdy.add(self.ppdof(i, jt), -9.0 / (3.0 * dy));
        dpdy.add(self.ppdof(i, jt - 1), 1.0 / (3.0 * dy));
        form.add_scaled(&dpdy, k[1][1]);
        self.push_equation(row, &form);
    }

    /// Slip row closing the free-flow tangential velocity on the interface.
    fn slip_row(&mut self, i: usize) {
        let row = self.sdof(i);
        let mut form = LinForm::default();
        form.add(row, 1.0);
        match &self.prob.mode {
            InterfaceMode::New {
                epsilon,
                n1_bl,
                m1_bl,
                ..
            } => {
                form.add_scaled(&self.shear_form(i), epsilon * n1_bl);
                let e2 = epsilon * epsilon;
                form.add_scaled(&self.dpdx_face_form(i), -e2 * m1_bl[0]);
                form.add_scaled(&self.dpdy_face_form(i), -e2 * m1_bl[1]);
            }
            InterfaceMode::ClassicalBj { alpha } => {
                let k_tau = self.prob.k_eff[0][0];
                form.add_scaled(&self.shear_form(i), -k_tau.sqrt() / alpha);
                form.add_scaled(&self.upm_form(i), -1.0);
            }
        }
        self.push_equation(row, &form);
    }

    fn assemble(&mut self) -> Result<()> {
        let (gf_ny, gp_ny, nx) = (self.gf.ny, self.gp.ny, self.nx);
        // Free-flow u rows.
        for j in 0..gf_ny {
            for i in 0..=nx {
                if self.prob.periodic_x && i == nx {
                    let row = self.udof(i, j);
                    self.trips.push(row, row, 1.0);
                    self.trips.push(row, self.udof(0, j), -1.0);
                    continue;
                }
                if !self.prob.periodic_x && (i == 0 || i == nx) {
                    self.u_boundary_row(i, j)?;
                    continue;
                }
                self.u_momentum_row(i, j)?;
            }
        }
        // Free-flow v rows: interface, interior, top.
        for i in 0..nx {
            self.interface_normal_row(i);
        }
        for j in 1..gf_ny {
            for i in 0..nx {
                self.v_momentum_row(i, j)?;
            }
        }
        for i in 0..nx {
            self.v_top_row(i)?;
        }
        // Free-flow continuity.
        for j in 0..gf_ny {
            for i in 0..nx {
                let row = self.pfdof(i, j);
                let gf = &self.gf;
                self.trips.push(row, self.udof(i + 1, j), 1.0 / gf.dx);
                self.trips.push(row, self.udof(i, j), -1.0 / gf.dx);
                self.trips.push(row, self.vdof(i, j + 1), 1.0 / gf.dy);
                self.trips.push(row, self.vdof(i, j), -1.0 / gf.dy);
            }
        }
        // Porous mass balance.
        for j in 0..gp_ny {
            for i in 0..nx {
                let row = self.ppdof(i, j);
                let (dx, dy) = (self.gp.dx, self.gp.dy);
                let mut form = LinForm::default();
                form.add_scaled(&self.qx_form(i + 1, j), 1.0 / dx);
                form.add_scaled(&self.qx_form(i, j), -1.0 / dx);
                form.add_scaled(&self.qy_form(i, j + 1), 1.0 / dy);
                form.add_scaled(&self.qy_form(i, j), -1.0 / dy);
                self.push_equation(row, &form);
            }
        }
        // Slip unknowns.
        for i in 0..=nx {
            if self.prob.periodic_x && i == nx {
                let row = self.sdof(i);
                self.trips.push(row, row, 1.0);
                self.trips.push(row, self.sdof(0), -1.0);
                continue;
            }
            self.slip_row(i);
        }
        Ok(())
    }
}

fn validate(prob: &MacroProblem) -> Result<()> {
    if !(prob.interface_y > prob.bottom_y && prob.interface_y < prob.top_y) {
        return Err(Error::Config(format!(
            "interface y={} must lie strictly inside ({}, {})",
            prob.interface_y, prob.bottom_y, prob.top_y
        )));
    }
    let k = prob.k_eff;
    if !(k[0][0] > 0.0 && k[1][1] > 0.0 && k[0][0] * k[1][1] - k[0][1] * k[1][0] > 0.0) {
        return Err(Error::Config(
            "effective permeability tensor must be positive definite".into(),
        ));
    }
    match &prob.mode {
        InterfaceMode::New { epsilon, .. } => {
            if !(*epsilon > 0.0) {
                return Err(Error::Config(format!(
                    "scale separation must be positive, got {epsilon}"
                )));
            }
        }
        InterfaceMode::ClassicalBj { alpha } => {
            if !(*alpha > 0.0) {
                return Err(Error::Config(format!(
                    "slip coefficient must be positive, got {alpha}"
                )));
            }
        }
    }
    let lateral_set = prob.ff_left.is_some()
        || prob.ff_right.is_some()
        || prob.pm_left.is_some()
        || prob.pm_right.is_some();
    if prob.periodic_x && lateral_set {
        return Err(Error::Config(
            "lateral conditions must be omitted on a periodic domain".into(),
        ));
    }
    if !prob.periodic_x
        && (prob.ff_left.is_none()
            || prob.ff_right.is_none()
            || prob.pm_left.is_none()
            || prob.pm_right.is_none())
    {
        return Err(Error::Config("missing lateral side conditions".into()));
    }
    Ok(())
}

pub fn solve_coupled(prob: &MacroProblem, opts: &SolveOptions) -> Result<CoupledSolution> {
    validate(prob)?;
    let gf = build_grid(
        GridDomain::new(0.0, prob.length, prob.interface_y, prob.top_y)?,
        prob.resolution,
        None,
        prob.periodic_x,
        false,
        None,
    )?;
    let gp = build_grid(
        GridDomain::new(0.0, prob.length, prob.bottom_y, prob.interface_y)?,
        prob.resolution,
        None,
        prob.periodic_x,
        false,
        None,
    )?;
    if gf.ny < 3 || gp.ny < 3 {
        return Err(Error::Config(
            "each subdomain needs at least three cell rows for the interface stencils".into(),
        ));
    }
    let nx = gf.nx;
    let base_v = gf.n_u();
    let base_pf = base_v + gf.n_v();
    let base_pp = base_pf + gf.n_cells();
    let base_s = base_pp + gp.n_cells();
    let n = base_s + nx + 1;
    let has_natural = matches!(prob.ff_left, Some(FfSideBc::Traction { .. }))
        || matches!(prob.ff_right, Some(FfSideBc::Traction { .. }))
        || matches!(prob.ff_top, FfSideBc::Traction { .. })
        || matches!(prob.pm_left, Some(PmSideBc::Pressure(_)))
        || matches!(prob.pm_right, Some(PmSideBc::Pressure(_)))
        || matches!(prob.pm_bottom, PmSideBc::Pressure(_));
    let mut asm = MacroAsm {
        prob,
        gf,
        gp,
        nx,
        base_v,
        base_pf,
        base_pp,
        base_s,
        trips: TripletList::new(n, n),
        rhs: vec![0.0; n],
        has_natural,
    };
    asm.assemble()?;

    let want_gauge = match prob.gauge {
        PressureGauge::Auto => !asm.has_natural,
        PressureGauge::Off => false,
        _ => true,
    };
    let MacroAsm {
        mut trips,
        mut rhs,
        gf,
        gp,
        ..
    } = asm;
    if want_gauge {
        let keep = |yc: f64| match prob.gauge {
            PressureGauge::MeanZeroRegion { y_lo, y_hi } => yc > y_lo && yc < y_hi,
            _ => true,
        };
        let mut weights = Vec::new();
        let vol = gf.dx * gf.dy;
        for j in 0..gf.ny {
            for i in 0..nx {
                if keep(gf.cell_center(i, j).1) {
                    weights.push((base_pf + gf.cell_index(i, j), vol));
                }
            }
        }
        for j in 0..gp.ny {
            for i in 0..nx {
                if keep(gp.cell_center(i, j).1) {
                    weights.push((base_pp + gp.cell_index(i, j), vol));
                }
            }
        }
        if weights.is_empty() {
            return Err(Error::Config("pressure gauge region holds no cells".into()));
        }
        attach_mean_zero_gauge(&mut trips, &mut rhs, &weights);
    }
    let x = linalg::solve(&trips.to_csr(), &rhs, opts)?;

    // Re-create the index helper for extraction.
    let asm = MacroAsm {
        prob,
        gf,
        gp,
        nx,
        base_v,
        base_pf,
        base_pp,
        base_s,
        trips: TripletList::new(0, 0),
        rhs: Vec::new(),
        has_natural,
    };
    Ok(extract_solution(&asm, &x))
}

fn extract_solution(asm: &MacroAsm, x: &[f64]) -> CoupledSolution {
    let gf = &asm.gf;
    let gp = &asm.gp;
    let nx = asm.nx;
    let mut ff = StokesField::zeros(gf);
    for j in 0..gf.ny {
        for i in 0..=nx {
            ff.u[gf.u_index(i, j)] = x[asm.udof(i, j)];
        }
        if gf.periodic_x {
            ff.u[gf.u_index(nx, j)] = ff.u[gf.u_index(0, j)];
        }
    }
    for j in 0..=gf.ny {
        for i in 0..nx {
            ff.v[gf.v_index(i, j)] = x[asm.vdof(i, j)];
        }
    }
    for j in 0..gf.ny {
        for i in 0..nx {
            ff.p[gf.cell_index(i, j)] = x[asm.pfdof(i, j)];
        }
    }
    let mut pm = StokesField::zeros(gp);
    for j in 0..gp.ny {
        for i in 0..nx {
            pm.p[gp.cell_index(i, j)] = x[asm.ppdof(i, j)];
        }
    }
    // Darcy fluxes from the same linear forms the mass balance used.
    for j in 0..gp.ny {
        for i in 0..=nx {
            pm.u[gp.u_index(i, j)] = asm.qx_form(i, j).eval(x);
        }
        if gp.periodic_x {
            pm.u[gp.u_index(nx, j)] = pm.u[gp.u_index(0, j)];
        }
    }
    for j in 0..=gp.ny {
        for i in 0..nx {
            pm.v[gp.v_index(i, j)] = asm.qy_form(i, j).eval(x);
        }
    }
    let trace = InterfaceTrace {
        x_centers: (0..nx).map(|i| gf.cell_center(i, 0).0).collect(),
        x_faces: (0..=nx).map(|i| gf.u_pos(i, 0).0).collect(),
        v_normal: (0..nx).map(|i| x[asm.vdof(i, 0)]).collect(),
        u_slip: (0..=nx).map(|i| x[asm.sdof(i)]).collect(),
        u_pm: (0..=nx).map(|i| asm.upm_form(i).eval(x)).collect(),
        p_ff: (0..nx).map(|i| asm.pff_trace_form(i).eval(x)).collect(),
        p_pm: (0..nx).map(|i| asm.ppm_trace_form(i).eval(x)).collect(),
    };
    let div_ff = crate::grid::discrete_divergence(gf, &ff);
    let div_pm = crate::grid::discrete_divergence(gp, &pm);
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    CoupledSolution {
        ff,
        pm,
        trace,
        mode: asm.prob.mode.clone(),
        max_div_ff: max_abs(&div_ff),
        max_div_pm: max_abs(&div_pm),
        ff_grid: asm.gf.clone(),
        pm_grid: asm.gp.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k_iso() -> [[f64; 2]; 2] {
        [[2.0e-4, 0.0], [0.0, 2.0e-4]]
    }

    fn new_mode() -> InterfaceMode {
        InterfaceMode::New {
            epsilon: 0.1,
            n1_bl: -0.3,
            ns_bl: 0.0,
            m1_bl: [-3.0e-3, 0.0],
        }
    }

    fn field_scale(sol: &CoupledSolution) -> f64 {
        sol.ff
            .u
            .iter()
            .chain(&sol.ff.v)
            .chain(&sol.ff.p)
            .chain(&sol.pm.p)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn hydrostatic_no_flow_both_modes() {
        for mode in [new_mode(), InterfaceMode::ClassicalBj { alpha: 1.0 }] {
            let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 16, k_iso(), mode);
            prob.periodic_x = false;
            prob.ff_left = Some(FfSideBc::traction(|_| 3.0));
            prob.ff_right = Some(FfSideBc::traction(|_| 3.0));
            prob.ff_top = FfSideBc::no_slip();
            prob.pm_left = Some(PmSideBc::pressure(|_| 3.0));
            prob.pm_right = Some(PmSideBc::pressure(|_| 3.0));
            prob.pm_bottom = PmSideBc::Impermeable;
            let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
            for v in sol.ff.u.iter().chain(&sol.ff.v) {
                assert!(v.abs() < 1e-9, "free flow should be at rest, got {v}");
            }
            for v in sol.pm.u.iter().chain(&sol.pm.v) {
                assert!(v.abs() < 1e-9, "porous flux should vanish, got {v}");
            }
            for p in sol.ff.p.iter().chain(&sol.pm.p) {
                assert!((p - 3.0).abs() < 1e-8, "uniform pressure expected, got {p}");
            }
        }
    }

    #[test]
    fn zero_constants_become_a_no_slip_cap() {
        let mode = InterfaceMode::New {
            epsilon: 0.1,
            n1_bl: 0.0,
            ns_bl: 0.0,
            m1_bl: [0.0, 0.0],
        };
        let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 16, k_iso(), mode);
        prob.ff_top = FfSideBc::dirichlet(
            |x: f64| (std::f64::consts::PI * x).sin().powi(2),
            |x: f64| -0.3 * (2.0 * std::f64::consts::PI * x).cos(),
        );
        let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
        let scale = field_scale(&sol).max(1.0);
        for s in &sol.trace.u_slip {
            assert!(s.abs() < 1e-12 * scale, "slip should vanish, got {s}");
        }
    }

    #[test]
    fn conservation_and_divergence_on_periodic_box() {
        let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 20, k_iso(), new_mode());
        prob.ff_top = FfSideBc::dirichlet(
            |x: f64| (std::f64::consts::PI * x).sin().powi(2),
            |x: f64| -0.3 * (2.0 * std::f64::consts::PI * x).cos(),
        );
        let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
        assert!(sol.max_div_ff < 1e-9, "ff divergence {}", sol.max_div_ff);
        assert!(sol.max_div_pm < 1e-9, "pm divergence {}", sol.max_div_pm);
        // Net flux through the interface must vanish over the periodic box.
        let g = &sol.ff_grid;
        let net: f64 = sol.trace.v_normal.iter().sum::<f64>() * g.dx;
        assert!(net.abs() < 1e-9, "net interface flux {net}");
        // The interface actually transmits flow in both directions.
        let vmax = sol.trace.v_normal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(vmax > 1e-8, "interface exchange expected, max |v| = {vmax}");
    }

    #[test]
    fn beavers_joseph_condition_holds_on_solved_field() {
        let alpha = 1.0;
        let mut prob = MacroProblem::new(
            1.0,
            -0.5,
            0.5,
            0.0,
            16,
            k_iso(),
            InterfaceMode::ClassicalBj { alpha },
        );
        prob.periodic_x = false;
        prob.ff_left = Some(FfSideBc::traction(|_| 1.0));
        prob.ff_right = Some(FfSideBc::traction(|_| 0.0));
        prob.ff_top = FfSideBc::no_slip();
        prob.pm_left = Some(PmSideBc::pressure(|_| 1.0));
        prob.pm_right = Some(PmSideBc::pressure(|_| 0.0));
        let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
        // Rebuild the one-sided shear and check the slip relation directly.
        let g = &sol.ff_grid;
        let dy = g.dy;
        let scale = field_scale(&sol).max(1.0);
        let k_tau: f64 = k_iso()[0][0];
        for i in 1..g.nx {
            let s = sol.trace.u_slip[i];
            let u0 = sol.ff.u[g.u_index(i, 0)];
            let u1 = sol.ff.u[g.u_index(i, 1)];
            let shear = (-8.0 * s + 9.0 * u0 - u1) / (3.0 * dy);
            let resid = s - sol.trace.u_pm[i] - k_tau.sqrt() / alpha * shear;
            assert!(
                resid.abs() < 1e-10 * scale,
                "face {i}: BJ residual {resid}"
            );
            assert!(s > 0.0, "slip should follow the pressure drive, got {s}");
        }
    }

    #[test]
    fn driving_data_scales_linearly() {
        let run = |c: f64| {
            let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 16, k_iso(), new_mode());
            prob.ff_top = FfSideBc::dirichlet(
                move |x: f64| c * (std::f64::consts::PI * x).sin().powi(2),
                move |x: f64| -0.3 * c * (2.0 * std::f64::consts::PI * x).cos(),
            );
            solve_coupled(&prob, &SolveOptions::default()).unwrap()
        };
        let base = run(1.0);
        let scaled = run(10.0);
        let scale = field_scale(&scaled).max(1e-30);
        let pairs = base
            .ff
            .u
            .iter()
            .zip(&scaled.ff.u)
            .chain(base.ff.v.iter().zip(&scaled.ff.v))
            .chain(base.ff.p.iter().zip(&scaled.ff.p))
            .chain(base.pm.p.iter().zip(&scaled.pm.p))
            .chain(base.pm.u.iter().zip(&scaled.pm.u))
            .chain(base.pm.v.iter().zip(&scaled.pm.v));
        for (b, s) in pairs {
            assert!(
                (10.0 * b - s).abs() <= 1e-10 * scale,
                "linearity violated: {b} vs {s}"
            );
        }
    }

    #[test]
    fn pressure_drive_pushes_flow_through_the_medium() {
        // Pressure drop across the porous sides; flow should enter on the
        // high-pressure side, leave on the low side, and the interface should
        // see both signs of normal velocity.
        let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 20, k_iso(), new_mode());
        prob.periodic_x = false;
        prob.ff_left = Some(FfSideBc::dirichlet(|y: f64| 16.0 * y * (0.5 - y), |_| 0.0));
        prob.ff_right = Some(FfSideBc::outflow());
        prob.ff_top = FfSideBc::no_slip();
        prob.pm_left = Some(PmSideBc::pressure(|_| 1e-6));
        prob.pm_right = Some(PmSideBc::pressure(|_| 1e-6 - 1.0));
        let sol = solve_coupled(&prob, &SolveOptions::default()).unwrap();
        assert!(sol.max_div_pm < 1e-9);
        // The inlet raises the free-flow pressure well above the porous
        // side, so fluid drains downward through the interface...
        let g = &sol.pm_grid;
        let net_sigma: f64 = sol.trace.v_normal.iter().sum::<f64>() * g.dx;
        assert!(net_sigma < -1e-6, "net interface flux {net_sigma}");
        // ...and the porous medium ships it out of its right boundary: the
        // pm box must balance exactly (top in + left in - right out = 0).
        let q_left: f64 = (0..g.ny).map(|j| sol.pm.u[g.u_index(0, j)]).sum::<f64>() * g.dy;
        let q_right: f64 = (0..g.ny).map(|j| sol.pm.u[g.u_index(g.nx, j)]).sum::<f64>() * g.dy;
        let imbalance = -net_sigma + q_left - q_right;
        assert!(
            imbalance.abs() < 1e-9,
            "porous mass imbalance {imbalance} (sigma {net_sigma}, left {q_left}, right {q_right})"
        );
        // Everything drained through the interface leaves by the sides.
        assert!(
            q_right - q_left > 1e-6,
            "expected net side outflow, got {}",
            q_right - q_left
        );
    }
}
