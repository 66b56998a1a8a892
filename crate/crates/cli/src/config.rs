//! Run configuration: one JSON document describing the microstructure, the
//! discretizations, the validation case (a named preset or a custom boundary
//! table), the interface-condition selection, and the output layout. The
//! builders here turn a configuration into ready-to-solve macroscale and
//! pore-scale problems so every command drives the same physical setup.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use poroflow::dns::{DnsProblem, MIN_CELLS_PER_EPSILON};
use poroflow::geometry::{resolve_interface, InterfaceLocation, PorousLayout};
use poroflow::grid::GridDomain;
use poroflow::macro_solver::{FfSideBc, InterfaceMode, MacroProblem, PmSideBc};
use poroflow::params::{EffectiveParameters, ShapeSpec};
use poroflow::stokes::{BoundarySpec, PressureGauge, Segment, SideBc, VelocityBc};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub discretization: DiscretizationBlock,
    pub case: CaseBlock,
    #[serde(default)]
    pub interface: InterfaceBlock,
    /// Pore-scale realizations averaged by `validate` and `run-dns --ensemble`.
    #[serde(default = "default_members")]
    pub ensemble_members: usize,
    #[serde(default)]
    pub output: OutputBlock,
}

fn default_members() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub shape: ShapeSpec,
    /// Microstructure period. The porous slab spans `columns x rows` cells of
    /// this size; the free-flow region above has the slab's depth.
    pub epsilon: f64,
    pub columns: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationBlock {
    /// Cells per unit length for the unit-cell and stripe solves.
    pub cell_resolution: usize,
    /// Stripe truncation half-height, in microstructure periods.
    pub stripe_half_height: usize,
    /// Cells per unit length for the coupled macroscale grids.
    pub macro_resolution: usize,
    /// Cells per unit length for the pore-scale reference runs.
    pub dns_resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseBlock {
    pub preset: CaseId,
    /// Boundary table; only for (and required by) the `custom` preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<CustomTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    Case1,
    Case2,
    Case3,
    Custom,
}

impl std::fmt::Display for CaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CaseId::Case1 => "case1",
            CaseId::Case2 => "case2",
            CaseId::Case3 => "case3",
            CaseId::Custom => "custom",
        })
    }
}

/// Boundary condition on one free-flow side, as plain data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FfBcSpec {
    NoSlip,
    DirichletConst {
        u: f64,
        v: f64,
    },
    /// Tangential inflow parabola over the free-flow span `(0, height)`,
    /// zero at both ends, clamped at zero outside the span.
    InflowParabola {
        peak: f64,
    },
    /// Top drive `u = amplitude sin^2(pi x / length)`,
    /// `v = -vertical cos(2 pi x / length)`; the vertical part has zero mean
    /// so a closed periodic box conserves mass.
    SlidingLid {
        amplitude: f64,
        vertical: f64,
    },
    /// Zero-traction outlet.
    Outflow,
    TractionConst {
        p: f64,
    },
}

impl FfBcSpec {
    fn natural(&self) -> bool {
        matches!(self, FfBcSpec::Outflow | FfBcSpec::TractionConst { .. })
    }

    fn to_macro(&self, length: f64, height: f64) -> FfSideBc {
        match self {
            FfBcSpec::NoSlip => FfSideBc::no_slip(),
            FfBcSpec::DirichletConst { u, v } => FfSideBc::dirichlet_const(*u, *v),
            FfBcSpec::InflowParabola { peak } => {
                let a = 4.0 * peak / (height * height);
                FfSideBc::dirichlet(move |y| (a * y * (height - y)).max(0.0), |_| 0.0)
            }
            FfBcSpec::SlidingLid {
                amplitude,
                vertical,
            } => {
                let (am, ve) = (*amplitude, *vertical);
                FfSideBc::dirichlet(
                    move |x| am * (PI * x / length).sin().powi(2),
                    move |x| -ve * (2.0 * PI * x / length).cos(),
                )
            }
            FfBcSpec::Outflow => FfSideBc::outflow(),
            FfBcSpec::TractionConst { p } => {
                let p = *p;
                FfSideBc::traction(move |_| p)
            }
        }
    }

    fn to_dns(&self, length: f64, height: f64) -> VelocityBc {
        match self {
            FfBcSpec::NoSlip => VelocityBc::no_slip(),
            FfBcSpec::DirichletConst { u, v } => VelocityBc::dirichlet_const(*u, *v),
            FfBcSpec::InflowParabola { peak } => {
                let a = 4.0 * peak / (height * height);
                VelocityBc::dirichlet(move |y| (a * y * (height - y)).max(0.0), |_| 0.0)
            }
            FfBcSpec::SlidingLid {
                amplitude,
                vertical,
            } => {
                let (am, ve) = (*amplitude, *vertical);
                VelocityBc::dirichlet(
                    move |x| am * (PI * x / length).sin().powi(2),
                    move |x| -ve * (2.0 * PI * x / length).cos(),
                )
            }
            FfBcSpec::Outflow => VelocityBc::traction_const(0.0),
            FfBcSpec::TractionConst { p } => VelocityBc::traction_const(*p),
        }
    }
}

/// Boundary condition on one porous-medium side, as plain data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PmBcSpec {
    Impermeable,
    PressureConst {
        p: f64,
    },
    /// `p(s) = offset + slope * s` in the along-side coordinate.
    PressureLinear {
        offset: f64,
        slope: f64,
    },
}

impl PmBcSpec {
    fn natural(&self) -> bool {
        !matches!(self, PmBcSpec::Impermeable)
    }

    fn to_macro(&self) -> PmSideBc {
        match self {
            PmBcSpec::Impermeable => PmSideBc::Impermeable,
            PmBcSpec::PressureConst { p } => {
                let p = *p;
                PmSideBc::pressure(move |_| p)
            }
            PmBcSpec::PressureLinear { offset, slope } => {
                let (o, sl) = (*offset, *slope);
                PmSideBc::pressure(move |s| o + sl * s)
            }
        }
    }

    /// Pore-scale counterpart: an impermeable side is a wall; a pressure side
    /// prescribes the normal stress.
    fn to_dns(&self) -> VelocityBc {
        match self {
            PmBcSpec::Impermeable => VelocityBc::no_slip(),
            PmBcSpec::PressureConst { p } => VelocityBc::traction_const(*p),
            PmBcSpec::PressureLinear { offset, slope } => {
                let (o, sl) = (*offset, *slope);
                VelocityBc::traction(move |s| o + sl * s)
            }
        }
    }
}

/// Full boundary table. Lateral entries must all be absent exactly when the
/// configuration is periodic in x.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTable {
    pub periodic_x: bool,
    pub ff_top: FfBcSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ff_left: Option<FfBcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ff_right: Option<FfBcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pm_left: Option<PmBcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pm_right: Option<PmBcSpec>,
    pub pm_bottom: PmBcSpec,
}

impl CustomTable {
    fn natural(&self) -> bool {
        self.ff_top.natural()
            || self.ff_left.as_ref().is_some_and(FfBcSpec::natural)
            || self.ff_right.as_ref().is_some_and(FfBcSpec::natural)
            || self.pm_left.as_ref().is_some_and(PmBcSpec::natural)
            || self.pm_right.as_ref().is_some_and(PmBcSpec::natural)
            || self.pm_bottom.natural()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSel {
    New,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationSel {
    Sigma0,
    Sigmad,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceBlock {
    #[serde(default = "default_mode")]
    pub mode: ModeSel,
    /// Beavers-Joseph slip coefficient (classical mode only).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Interface placement for the classical conditions; the homogenized
    /// conditions are derived for the unshifted interface.
    #[serde(default = "default_location")]
    pub location: LocationSel,
}

fn default_mode() -> ModeSel {
    ModeSel::New
}
fn default_alpha() -> f64 {
    1.0
}
fn default_location() -> LocationSel {
    LocationSel::Sigma0
}

impl Default for InterfaceBlock {
    fn default() -> Self {
        InterfaceBlock {
            mode: default_mode(),
            alpha: default_alpha(),
            location: default_location(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub plots: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_true() -> bool {
    true
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: default_dir(),
            plots: default_true(),
        }
    }
}

/// The three macroscale closures `validate` compares against the pore scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroVariant {
    New,
    ClassicalSigma0,
    ClassicalSigmaD,
}

impl MacroVariant {
    /// Stable key used in CSV columns and report entries.
    pub fn key(&self) -> &'static str {
        match self {
            MacroVariant::New => "new",
            MacroVariant::ClassicalSigma0 => "bj_sigma0",
            MacroVariant::ClassicalSigmaD => "bj_sigmad",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MacroVariant::New => "homogenized",
            MacroVariant::ClassicalSigma0 => "Beavers-Joseph",
            MacroVariant::ClassicalSigmaD => "Beavers-Joseph, shifted",
        }
    }

    pub const ALL: [MacroVariant; 3] = [
        MacroVariant::New,
        MacroVariant::ClassicalSigma0,
        MacroVariant::ClassicalSigmaD,
    ];
}

/// Everything `macro_problem`/`dns_problem` derive from the case table.
struct SideSet {
    periodic_x: bool,
    ff_top: FfSideBc,
    ff_left: Option<FfSideBc>,
    ff_right: Option<FfSideBc>,
    pm_left: Option<PmSideBc>,
    pm_right: Option<PmSideBc>,
    pm_bottom: PmSideBc,
    dns: BoundarySpec,
    gauge: PressureGauge,
}

impl RunConfig {
    /// Built-in validation configurations. The porous slab is 10x5 periods of
    /// 1/10 each, so the domain is the unit square with the interface at its
    /// midline; case 3 swaps the circle for the tilted ellipse.
    pub fn preset(id: CaseId) -> Self {
        let shape = match id {
            CaseId::Case3 => ShapeSpec::TiltedEllipse,
            _ => ShapeSpec::Circle { radius: 0.25 },
        };
        RunConfig {
            geometry: GeometryBlock {
                shape,
                epsilon: 0.1,
                columns: 10,
                rows: 5,
            },
            discretization: DiscretizationBlock {
                cell_resolution: 64,
                stripe_half_height: 4,
                macro_resolution: 160,
                dns_resolution: 160,
            },
            case: CaseBlock {
                preset: id,
                table: None,
            },
            interface: InterfaceBlock::default(),
            ensemble_members: 8,
            output: OutputBlock::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .with_context(|| format!("cannot open configuration {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_reader(BufReader::new(f))
            .with_context(|| format!("malformed configuration {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("invalid configuration {}", path.display()))?;
        Ok(cfg)
    }

    /// Domain width: the slab spans the full horizontal extent.
    pub fn length(&self) -> f64 {
        self.geometry.columns as f64 * self.geometry.epsilon
    }

    /// Slab depth; the free-flow region above has the same height.
    pub fn height(&self) -> f64 {
        self.geometry.rows as f64 * self.geometry.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.shape.to_shape().validate()?;
        if !(g.epsilon > 0.0 && g.epsilon.is_finite()) {
            bail!("epsilon must be positive, got {}", g.epsilon);
        }
        if g.columns == 0 || g.rows == 0 {
            bail!("the porous slab needs at least one column and one row");
        }
        if self.case.preset == CaseId::Case3 && g.shape != ShapeSpec::TiltedEllipse {
            bail!("case3 is the anisotropic configuration; it requires the tilted ellipse shape");
        }
        match self.case.preset {
            CaseId::Custom => {
                let table = self
                    .case
                    .table
                    .as_ref()
                    .context("the custom case needs a boundary table")?;
                let lateral = [
                    table.ff_left.is_some(),
                    table.ff_right.is_some(),
                    table.pm_left.is_some(),
                    table.pm_right.is_some(),
                ];
                if table.periodic_x && lateral.iter().any(|&p| p) {
                    bail!("periodic tables must not carry lateral side conditions");
                }
                if !table.periodic_x && !lateral.iter().all(|&p| p) {
                    bail!("non-periodic tables need all four lateral side conditions");
                }
            }
            _ => {
                if self.case.table.is_some() {
                    bail!("preset cases define their own boundary table; drop `table` or use the custom case");
                }
            }
        }
        let d = &self.discretization;
        for (name, res) in [
            ("cell_resolution", d.cell_resolution),
            ("macro_resolution", d.macro_resolution),
            ("dns_resolution", d.dns_resolution),
        ] {
            if res < 4 {
                bail!("{name} must be at least 4, got {res}");
            }
        }
        if d.stripe_half_height < 2 {
            bail!("the stripe needs a half-height of at least 2 periods");
        }
        integral_cells("macro", self.length(), d.macro_resolution)?;
        integral_cells("macro", self.height(), d.macro_resolution)?;
        integral_cells("dns", self.length(), d.dns_resolution)?;
        integral_cells("dns", self.height(), d.dns_resolution)?;
        let cells_per_eps = g.epsilon * d.dns_resolution as f64;
        if cells_per_eps + 1e-9 < MIN_CELLS_PER_EPSILON as f64 {
            bail!(
                "dns_resolution {} gives {cells_per_eps:.1} cells per period; need {}",
                d.dns_resolution,
                MIN_CELLS_PER_EPSILON
            );
        }
        let i = &self.interface;
        if !(i.alpha > 0.0 && i.alpha.is_finite()) {
            bail!("alpha must be positive, got {}", i.alpha);
        }
        if i.mode == ModeSel::New && i.location == LocationSel::Sigmad {
            bail!(
                "the homogenized conditions are derived for the unshifted interface; \
                 the shifted location only applies to classical mode"
            );
        }
        if self.ensemble_members == 0 {
            bail!("ensemble_members must be at least 1");
        }
        Ok(())
    }

    /// The effective boundary table: presets materialize their documented
    /// data so customs and presets share one construction path.
    pub fn case_table(&self) -> Result<CustomTable> {
        match self.case.preset {
            CaseId::Custom => self
                .case
                .table
                .clone()
                .context("the custom case needs a boundary table"),
            CaseId::Case1 => Ok(CustomTable {
                periodic_x: true,
                ff_top: FfBcSpec::SlidingLid {
                    amplitude: 1.0,
                    vertical: 0.3,
                },
                ff_left: None,
                ff_right: None,
                pm_left: None,
                pm_right: None,
                pm_bottom: PmBcSpec::Impermeable,
            }),
            // General filtration: a weak inlet jet over a porous bed whose
            // outer boundary pressure drops linearly along the channel. The
            // boundary pressure drive is of order one while the inlet flux is
            // comparable to what the bed can drain, so a leading fraction of
            // the flow crosses the interface instead of sliding along it.
            CaseId::Case2 | CaseId::Case3 => Ok(CustomTable {
                periodic_x: false,
                ff_top: FfBcSpec::NoSlip,
                ff_left: Some(FfBcSpec::InflowParabola { peak: 1e-3 }),
                ff_right: Some(FfBcSpec::Outflow),
                pm_left: Some(PmBcSpec::PressureConst { p: 1e-6 }),
                pm_right: Some(PmBcSpec::PressureConst {
                    p: 1e-6 - self.length(),
                }),
                pm_bottom: PmBcSpec::PressureLinear {
                    offset: 1e-6,
                    slope: -1.0,
                },
            }),
        }
    }

    fn side_set(&self) -> Result<SideSet> {
        let table = self.case_table()?;
        let (len, h) = (self.length(), self.height());
        // Without a natural condition anywhere the pressure is only defined
        // up to a constant; pinning its mean over the free-flow region makes
        // macroscale and pore-scale pressures directly comparable.
        let gauge = if table.natural() {
            PressureGauge::Auto
        } else {
            PressureGauge::MeanZeroRegion { y_lo: 0.0, y_hi: h }
        };
        let lateral = |ff: &Option<FfBcSpec>, pm: &Option<PmBcSpec>| -> Option<SideBc> {
            match (ff, pm) {
                (Some(ff), Some(pm)) => Some(SideBc::Segments(vec![
                    Segment {
                        lo: -h,
                        hi: 0.0,
                        bc: pm.to_dns(),
                    },
                    Segment {
                        lo: 0.0,
                        hi: h,
                        bc: ff.to_dns(len, h),
                    },
                ])),
                _ => None,
            }
        };
        let dns = BoundarySpec {
            left: lateral(&table.ff_left, &table.pm_left),
            right: lateral(&table.ff_right, &table.pm_right),
            bottom: Some(SideBc::Uniform(table.pm_bottom.to_dns())),
            top: Some(SideBc::Uniform(table.ff_top.to_dns(len, h))),
        };
        Ok(SideSet {
            periodic_x: table.periodic_x,
            ff_top: table.ff_top.to_macro(len, h),
            ff_left: table.ff_left.as_ref().map(|s| s.to_macro(len, h)),
            ff_right: table.ff_right.as_ref().map(|s| s.to_macro(len, h)),
            pm_left: table.pm_left.as_ref().map(PmBcSpec::to_macro),
            pm_right: table.pm_right.as_ref().map(PmBcSpec::to_macro),
            pm_bottom: table.pm_bottom.to_macro(),
            dns,
            gauge,
        })
    }

    /// Shifted interface depth: the top of the first inclusion row, snapped
    /// to the nearest macroscale grid line. Returns `(resolved, snapped)`.
    pub fn sigma_d(&self, resolution: usize) -> Result<(f64, f64)> {
        let raw = resolve_interface(
            &self.geometry.shape.to_shape(),
            self.geometry.epsilon,
            InterfaceLocation::SigmaD,
        )?;
        let hy = 1.0 / resolution as f64;
        let snapped = (raw / hy).round() * hy;
        if !(snapped < 0.0 && snapped > -self.height()) {
            bail!(
                "the shifted interface at {raw:.6} cannot be represented on a \
                 grid with spacing {hy:.6}"
            );
        }
        Ok((raw, snapped))
    }

    /// Inclusion pattern for one pore-scale realization.
    pub fn layout(&self, shift: f64) -> Result<PorousLayout> {
        Ok(PorousLayout::new(
            self.geometry.shape.to_shape(),
            self.geometry.columns,
            self.geometry.rows,
            self.geometry.epsilon,
            shift,
        )?)
    }

    /// Coupled macroscale problem for one interface-condition variant.
    /// Returns the problem plus the interface height it was placed at.
    pub fn macro_problem(
        &self,
        params: &EffectiveParameters,
        variant: MacroVariant,
    ) -> Result<(MacroProblem, f64)> {
        let set = self.side_set()?;
        let res = self.discretization.macro_resolution;
        let interface_y = match variant {
            MacroVariant::New | MacroVariant::ClassicalSigma0 => 0.0,
            MacroVariant::ClassicalSigmaD => self.sigma_d(res)?.1,
        };
        let mode = match variant {
            MacroVariant::New => params.mode_new(),
            _ => InterfaceMode::ClassicalBj {
                alpha: self.interface.alpha,
            },
        };
        let h = self.height();
        let mut prob = MacroProblem::new(
            self.length(),
            -h,
            h,
            interface_y,
            res,
            params.k_eps,
            mode,
        );
        prob.periodic_x = set.periodic_x;
        prob.ff_top = set.ff_top;
        prob.ff_left = set.ff_left;
        prob.ff_right = set.ff_right;
        prob.pm_left = set.pm_left;
        prob.pm_right = set.pm_right;
        prob.pm_bottom = set.pm_bottom;
        prob.gauge = set.gauge;
        Ok((prob, interface_y))
    }

    /// The variant selected by the interface block (for `run-macro`).
    pub fn selected_variant(&self) -> MacroVariant {
        match (self.interface.mode, self.interface.location) {
            (ModeSel::New, _) => MacroVariant::New,
            (ModeSel::Classical, LocationSel::Sigma0) => MacroVariant::ClassicalSigma0,
            (ModeSel::Classical, LocationSel::Sigmad) => MacroVariant::ClassicalSigmaD,
        }
    }

    /// Pore-scale reference problem (shift 0; the ensemble runner shifts it).
    pub fn dns_problem(&self) -> Result<DnsProblem> {
        let set = self.side_set()?;
        let h = self.height();
        let domain = GridDomain::new(0.0, self.length(), -h, h)?;
        let mut prob = DnsProblem::new(
            domain,
            Some(self.layout(0.0)?),
            self.discretization.dns_resolution,
        );
        prob.periodic_x = set.periodic_x;
        prob.bc = set.dns;
        prob.gauge = set.gauge;
        Ok(prob)
    }

    /// Checks that a parameter document matches this configuration's
    /// microstructure before it closes a macroscale run.
    pub fn check_params(&self, params: &EffectiveParameters) -> Result<()> {
        if params.shape != self.geometry.shape {
            bail!(
                "effective parameters were computed for {:?}, the configuration asks for {:?}; \
                 rerun effective-params",
                params.shape,
                self.geometry.shape
            );
        }
        if (params.epsilon - self.geometry.epsilon).abs() > 1e-12 {
            bail!(
                "effective parameters were scaled for epsilon = {}, the configuration uses {}; \
                 rerun effective-params",
                params.epsilon,
                self.geometry.epsilon
            );
        }
        Ok(())
    }
}

fn integral_cells(what: &str, extent: f64, resolution: usize) -> Result<usize> {
    let cells = extent * resolution as f64;
    if (cells - cells.round()).abs() > 1e-6 || cells.round() < 1.0 {
        bail!(
            "{what} grid: extent {extent} at resolution {resolution} gives a \
             non-integral cell count {cells}"
        );
    }
    Ok(cells.round() as usize)
}
