//! Inclusion shapes, periodic porous layouts, stripe geometry, and
//! interface-location resolution.

use std::sync::Arc;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Solid inclusion shape, described in unit-cell coordinates (0,1)^2.
#[derive(Clone)]
pub enum InclusionShape {
    /// Disk of the given radius centered at (0.5, 0.5). Radius must lie in (0, 0.5).
    Circle { radius: f64 },
    /// Rotated ellipse traced by
    /// `(0.5,0.5) + cos(pi/4) * (0.2 cos t + 0.4 sin t, -0.2 cos t + 0.4 sin t)`.
    TiltedEllipse,
    /// Caller-supplied indicator; negative inside the solid, zero on its boundary.
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for InclusionShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InclusionShape::Circle { radius } => write!(f, "Circle {{ radius: {radius} }}"),
            InclusionShape::TiltedEllipse => write!(f, "TiltedEllipse"),
            InclusionShape::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl InclusionShape {
    /// Signed indicator in unit-cell coordinates: negative inside the solid,
    /// zero on the boundary, positive in the fluid.
    pub fn indicator(&self, y1: f64, y2: f64) -> f64 {
        match self {
            InclusionShape::Circle { radius } => {
                ((y1 - 0.5).powi(2) + (y2 - 0.5).powi(2)).sqrt() - radius
            }
            InclusionShape::TiltedEllipse => {
                // Invert the parametrization: with u = y1-0.5, v = y2-0.5 and
                // k = cos(pi/4), cos t = (u-v)/(0.4 k) and sin t = (u+v)/(0.8 k).
                let u = y1 - 0.5;
                let v = y2 - 0.5;
                let c = (u - v) / (0.4 * FRAC_1_SQRT_2);
                let s = (u + v) / (0.8 * FRAC_1_SQRT_2);
                c * c + s * s - 1.0
            }
            InclusionShape::Custom(ind) => ind(y1, y2),
        }
    }

    pub fn is_solid_unit(&self, y1: f64, y2: f64) -> bool {
        self.indicator(y1, y2) <= 0.0
    }

    /// Mirror symmetry about the vertical midline y1 = 0.5. Such inclusions
    /// force several effective coefficients to vanish identically; the tilted
    /// ellipse breaks the symmetry and keeps them all.
    pub fn mirror_symmetric_x(&self) -> bool {
        matches!(self, InclusionShape::Circle { .. })
    }

    /// Boundary point of the tilted ellipse at parameter `t`.
    pub fn ellipse_point(t: f64) -> (f64, f64) {
        let k = FRAC_1_SQRT_2;
        (
            0.5 + k * (0.2 * t.cos() + 0.4 * t.sin()),
            0.5 + k * (-0.2 * t.cos() + 0.4 * t.sin()),
        )
    }

    /// Basic shape validation: parameters in range and solid strictly inside
    /// the unit cell.
    pub fn validate(&self) -> Result<()> {
        match self {
            InclusionShape::Circle { radius } => {
                if !(*radius > 0.0 && *radius < 0.5) {
                    return Err(Error::Geometry(format!(
                        "circle radius must lie in (0, 0.5), got {radius}"
                    )));
                }
            }
            InclusionShape::TiltedEllipse => {
                for i in 0..720 {
                    let t = i as f64 * std::f64::consts::TAU / 720.0;
                    let (x, y) = Self::ellipse_point(t);
                    if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
                        return Err(Error::Geometry(format!(
                            "ellipse boundary leaves the unit cell at t={t}: ({x}, {y})"
                        )));
                    }
                }
            }
            InclusionShape::Custom(_) => {}
        }
        Ok(())
    }
}

/// Geometry that a staggered grid can be masked against.
pub trait SolidGeometry: Sync {
    /// True if the point lies inside a solid obstacle.
    fn is_solid_at(&self, x: f64, y: f64) -> bool;
}

/// One periodicity cell (0,1)^2 with a single solid inclusion.
#[derive(Debug, Clone)]
pub struct UnitCellGeometry {
    pub shape: InclusionShape,
}

impl UnitCellGeometry {
    /// Builds the unit cell and checks that the fluid part is connected,
    /// touches all four edges, and that the solid stays off the edges.
    pub fn new(shape: InclusionShape) -> Result<Self> {
        shape.validate()?;
        let cell = UnitCellGeometry { shape };
        cell.check_fluid_structure(96)?;
        Ok(cell)
    }

    /// Samples an n x n grid of cell centers and verifies fluid connectivity
    /// and edge clearance.
    fn check_fluid_structure(&self, n: usize) -> Result<()> {
        let mut fluid = vec![false; n * n];
        let mut any_solid = false;
        for j in 0..n {
            for i in 0..n {
                let x = (i as f64 + 0.5) / n as f64;
                let y = (j as f64 + 0.5) / n as f64;
                let solid = self.shape.is_solid_unit(x, y);
                fluid[j * n + i] = !solid;
                any_solid |= solid;
            }
        }
        if !any_solid {
            return Err(Error::Geometry(
                "unit cell contains no solid inclusion".into(),
            ));
        }
        for k in 0..n {
            if !fluid[k]
                || !fluid[(n - 1) * n + k]
                || !fluid[k * n]
                || !fluid[k * n + n - 1]
            {
                return Err(Error::Geometry(
                    "solid inclusion touches the unit-cell edge".into(),
                ));
            }
        }
        // Flood fill from a corner sample with periodic wrap; every fluid
        // sample must be reachable.
        let mut seen = vec![false; n * n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(c) = stack.pop() {
            let (i, j) = (c % n, c / n);
            let neighbors = [
                ((i + 1) % n, j),
                ((i + n - 1) % n, j),
                (i, (j + 1) % n),
                (i, (j + n - 1) % n),
            ];
            for (ni, nj) in neighbors {
                let nc = nj * n + ni;
                if fluid[nc] && !seen[nc] {
                    seen[nc] = true;
                    stack.push(nc);
                }
            }
        }
        if fluid.iter().zip(&seen).any(|(&f, &s)| f && !s) {
            return Err(Error::Geometry("fluid region is disconnected".into()));
        }
        Ok(())
    }

    /// Fluid volume fraction of the unit cell, by midpoint sampling.
    pub fn porosity(&self, resolution: usize) -> f64 {
        let n = resolution;
        let mut fluid = 0usize;
        for j in 0..n {
            for i in 0..n {
                let x = (i as f64 + 0.5) / n as f64;
                let y = (j as f64 + 0.5) / n as f64;
                if !self.shape.is_solid_unit(x, y) {
                    fluid += 1;
                }
            }
        }
        fluid as f64 / (n * n) as f64
    }
}

impl SolidGeometry for UnitCellGeometry {
    fn is_solid_at(&self, x: f64, y: f64) -> bool {
        self.shape.is_solid_unit(x.rem_euclid(1.0), y.rem_euclid(1.0))
    }
}

/// Periodic arrangement of scaled inclusions filling the slab
/// `(0, n_cols*epsilon) x (-n_rows*epsilon, 0)`.
#[derive(Debug, Clone)]
pub struct PorousLayout {
    pub shape: InclusionShape,
    pub n_cols: usize,
    pub n_rows: usize,
    pub epsilon: f64,
    /// Horizontal offset of the inclusion pattern, as a fraction of epsilon in [0,1).
    pub shift: f64,
}

impl PorousLayout {
    pub fn new(
        shape: InclusionShape,
        n_cols: usize,
        n_rows: usize,
        epsilon: f64,
        shift: f64,
    ) -> Result<Self> {
        shape.validate()?;
        if n_cols == 0 || n_rows == 0 {
            return Err(Error::Config("porous layout needs at least one cell".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&shift) {
            return Err(Error::Config(format!(
                "horizontal shift must lie in [0,1) as a fraction of epsilon, got {shift}"
            )));
        }
        Ok(PorousLayout {
            shape,
            n_cols,
            n_rows,
            epsilon,
            shift,
        })
    }

    pub fn slab_width(&self) -> f64 {
        self.n_cols as f64 * self.epsilon
    }

    pub fn slab_depth(&self) -> f64 {
        self.n_rows as f64 * self.epsilon
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let tol = 1e-12 * self.epsilon.max(1.0);
        x >= -tol
            && x <= self.slab_width() + tol
            && y <= tol
            && y >= -self.slab_depth() - tol
    }

    fn folded_solid(&self, x: f64, y: f64) -> bool {
        let xi = (x / self.epsilon - self.shift).rem_euclid(1.0);
        let eta = (y / self.epsilon).rem_euclid(1.0);
        self.shape.is_solid_unit(xi, eta)
    }

    /// Solid indicator inside the slab; points outside are a domain error.
    pub fn is_solid(&self, x: f64, y: f64) -> Result<bool> {
        if !self.contains(x, y) {
            return Err(Error::Domain(format!(
                "point ({x}, {y}) lies outside the porous slab"
            )));
        }
        Ok(self.folded_solid(x, y))
    }
}

impl SolidGeometry for PorousLayout {
    /// Mask for grids that extend beyond the slab (anything above or outside
    /// the slab is fluid).
    fn is_solid_at(&self, x: f64, y: f64) -> bool {
        if y >= 0.0 || y <= -self.slab_depth() || x <= 0.0 || x >= self.slab_width() {
            return false;
        }
        self.folded_solid(x, y)
    }
}

/// Semi-infinite boundary-layer stripe `(0,1) x (-l, l)` truncated at `l`:
/// fluid above y=0, a column of unit cells below.
#[derive(Debug, Clone)]
pub struct StripeSpec {
    pub shape: InclusionShape,
    pub l: usize,
}

/// Builds the truncated stripe geometry. `l >= 2` is required so that both
/// the plateau region above and the decay region below are present.
pub fn build_stripe(shape: InclusionShape, l: usize) -> Result<StripeSpec> {
    if l < 2 {
        return Err(Error::Config(format!("stripe half-height must be >= 2, got {l}")));
    }
    shape.validate()?;
    // The jump row at y=0 and the trace extraction need fluid strips on both
    // sides of every unit-cell edge.
    for i in 0..256 {
        let x = (i as f64 + 0.5) / 256.0;
        if shape.is_solid_unit(x, 1e-6) || shape.is_solid_unit(x, 1.0 - 1e-6) {
            return Err(Error::Geometry(
                "inclusion touches the horizontal unit-cell edges; stripe stacking impossible"
                    .into(),
            ));
        }
    }
    Ok(StripeSpec { shape, l })
}

impl SolidGeometry for StripeSpec {
    fn is_solid_at(&self, x: f64, y: f64) -> bool {
        if y >= 0.0 || y <= -(self.l as f64) {
            return false;
        }
        self.shape
            .is_solid_unit(x.rem_euclid(1.0), y.rem_euclid(1.0))
    }
}

/// Macroscale sharp-interface placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterfaceLocation {
    /// On top of the periodicity cells (y = 0).
    Sigma0,
    /// Directly on top of the first row of solid inclusions.
    SigmaD,
}

/// Resolves the interface location to a y-coordinate for a layout with the
/// given shape and epsilon. `SigmaD` is found numerically: the supremum of
/// solid y-coordinates over the first inclusion row, located by per-column
/// bisection plus a golden-section refinement (tolerance well below 1e-12).
pub fn resolve_interface(
    shape: &InclusionShape,
    epsilon: f64,
    location: InterfaceLocation,
) -> Result<f64> {
    match location {
        InterfaceLocation::Sigma0 => Ok(0.0),
        InterfaceLocation::SigmaD => {
            let top = unit_cell_solid_top(shape)?;
            if !(top > 0.0 && top < 1.0) {
                return Err(Error::Domain(format!(
                    "resolved inclusion top {top} is outside the unit cell"
                )));
            }
            Ok(-epsilon * (1.0 - top))
        }
    }
}

/// Highest solid point of a column, by bisection on the indicator sign; None
/// if the column has no solid sample.
fn column_top(shape: &InclusionShape, x: f64) -> Option<f64> {
    let n = 512;
    let mut lo = None;
    // Scan downward for the first solid sample; everything above it is the bracket.
    for k in 0..n {
        let y = 1.0 - (k as f64 + 0.5) / n as f64;
        if shape.is_solid_unit(x, y) {
            lo = Some(y);
            break;
        }
    }
    let mut lo = lo?;
    let mut hi = (lo + 1.0 / n as f64).min(1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if shape.is_solid_unit(x, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn unit_cell_solid_top(shape: &InclusionShape) -> Result<f64> {
    let n = 1024;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n {
        let x = (i as f64 + 0.5) / n as f64;
        if let Some(top) = column_top(shape, x) {
            if best.map_or(true, |(_, t)| top > t) {
                best = Some((x, top));
            }
        }
    }
    let (x_best, _) = best.ok_or_else(|| {
        Error::Domain("no solid found in the first inclusion row".into())
    })?;
    // Golden-section refinement of the column-top height around the best column.
    let h = |x: f64| column_top(shape, x).unwrap_or(f64::NEG_INFINITY);
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let (mut a, mut b) = (x_best - 2.0 / n as f64, x_best + 2.0 / n as f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (h(c), h(d));
    for _ in 0..120 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = h(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = h(d);
        }
    }
    Ok(fc.max(fd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_classification() {
        let layout = PorousLayout::new(
            InclusionShape::Circle { radius: 0.25 },
            10,
            5,
            0.1,
            0.0,
        )
        .unwrap();
        // Center of the first inclusion is solid.
        assert!(layout.is_solid(0.05, -0.05).unwrap());
        // Cell corner is fluid.
        assert!(!layout.is_solid(0.001, -0.001).unwrap());
        // Outside the slab is a domain error.
        assert!(matches!(layout.is_solid(0.5, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn ellipse_boundary_point() {
        // e(0) = (0.5 + 0.2 cos(pi/4), 0.5 - 0.2 cos(pi/4))
        let (x, y) = InclusionShape::ellipse_point(0.0);
        assert!((x - 0.6414).abs() < 5e-5 && (y - 0.3586).abs() < 5e-5);
        let ind = InclusionShape::TiltedEllipse.indicator(x, y);
        assert!(ind.abs() <= 1e-9, "boundary indicator {ind}");
        // Slightly inside / outside along the major axis.
        assert!(InclusionShape::TiltedEllipse.is_solid_unit(0.5, 0.5));
        assert!(!InclusionShape::TiltedEllipse.is_solid_unit(0.9, 0.9));
    }

    #[test]
    fn shift_translates_pattern() {
        let base = PorousLayout::new(InclusionShape::Circle { radius: 0.25 }, 8, 4, 0.125, 0.0)
            .unwrap();
        let shifted =
            PorousLayout::new(InclusionShape::Circle { radius: 0.25 }, 8, 4, 0.125, 0.3).unwrap();
        for k in 0..500 {
            let x = 0.11 + 0.77 * (k as f64 * 0.618).fract();
            let y = -0.45 + 0.4 * (k as f64 * 0.414).fract();
            let x_back = x - 0.3 * 0.125;
            assert_eq!(
                shifted.is_solid_at(x, y),
                base.shape.is_solid_unit(
                    (x_back / 0.125).rem_euclid(1.0),
                    (y / 0.125).rem_euclid(1.0)
                ),
                "at ({x},{y})"
            );
        }
    }

    #[test]
    fn sigma_d_circle() {
        let eps = 0.05;
        let y = resolve_interface(
            &InclusionShape::Circle { radius: 0.25 },
            eps,
            InterfaceLocation::SigmaD,
        )
        .unwrap();
        assert!((y - (-0.25 * eps)).abs() < 1e-11, "sigma_d = {y}");
        assert_eq!(
            resolve_interface(
                &InclusionShape::Circle { radius: 0.25 },
                eps,
                InterfaceLocation::Sigma0
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn sigma_d_ellipse() {
        let eps = 0.1;
        let y = resolve_interface(
            &InclusionShape::TiltedEllipse,
            eps,
            InterfaceLocation::SigmaD,
        )
        .unwrap();
        // max_t e2(t) = 0.5 + cos(pi/4) * sqrt(0.2^2 + 0.4^2)
        let top = 0.5 + FRAC_1_SQRT_2 * 0.2f64.sqrt();
        assert!((y - (-eps * (1.0 - top))).abs() < 1e-11, "sigma_d = {y}");
    }

    #[test]
    fn stripe_requires_min_half_height() {
        assert!(matches!(
            build_stripe(InclusionShape::Circle { radius: 0.25 }, 1),
            Err(Error::Config(_))
        ));
        let stripe = build_stripe(InclusionShape::Circle { radius: 0.25 }, 4).unwrap();
        // Fluid above the interface, solid at the first inclusion center.
        assert!(!stripe.is_solid_at(0.5, 0.25));
        assert!(stripe.is_solid_at(0.5, -0.5));
        assert!(!stripe.is_solid_at(0.5, -3.95));
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(InclusionShape::Circle { radius: 0.6 }.validate().is_err());
        assert!(InclusionShape::Circle { radius: 0.0 }.validate().is_err());
        // A custom "inclusion" covering everything leaves no fluid.
        let all_solid = InclusionShape::Custom(Arc::new(|_, _| -1.0));
        assert!(UnitCellGeometry::new(all_solid).is_err());
        // No solid at all is rejected too.
        let all_fluid = InclusionShape::Custom(Arc::new(|_, _| 1.0));
        assert!(UnitCellGeometry::new(all_fluid).is_err());
    }

    #[test]
    fn porosity_circle() {
        let cell = UnitCellGeometry::new(InclusionShape::Circle { radius: 0.25 }).unwrap();
        let phi = cell.porosity(512);
        let exact = 1.0 - std::f64::consts::PI * 0.25 * 0.25;
        assert!((phi - exact).abs() < 2e-3, "porosity {phi} vs {exact}");
    }
}
