//! Effective-parameter document: one JSON artifact carrying everything the
//! macroscale solver needs about a microstructure — the permeability tensor
//! from the unit-cell problems and the interface constants from the stripe
//! problems — so expensive upscaling runs once per geometry.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary_layers::{solve_boundary_layers, BoundaryLayerConstants, StripeSet};
use crate::error::{Error, Result};
use crate::geometry::InclusionShape;
use crate::linalg::SolveOptions;
use crate::macro_solver::InterfaceMode;

/// Serializable inclusion descriptor (the closed-form shapes only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Circle { radius: f64 },
    TiltedEllipse,
}

impl ShapeSpec {
    pub fn to_shape(&self) -> InclusionShape {
        match self {
            ShapeSpec::Circle { radius } => InclusionShape::Circle { radius: *radius },
            ShapeSpec::TiltedEllipse => InclusionShape::TiltedEllipse,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveParameters {
    pub shape: ShapeSpec,
    /// Microstructure period of the macroscale configuration the document
    /// was computed for.
    pub epsilon: f64,
    pub porosity: f64,
    /// Grid cells per unit length used for the unit-cell and stripe solves.
    pub resolution: usize,
    /// Unit-cell permeability tensor.
    pub k: [[f64; 2]; 2],
    /// Macroscale tensor epsilon^2 K.
    pub k_eps: [[f64; 2]; 2],
    /// Interface constants from the stripe problems.
    pub bl: BoundaryLayerConstants,
    /// Coefficients that vanish identically when the inclusion is mirror
    /// symmetric; their stored values are rounding noise, not physics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symmetry_zeros: Vec<String>,
}

impl EffectiveParameters {
    /// Runs the unit-cell and stripe problems and assembles the document.
    pub fn compute(
        shape: &ShapeSpec,
        epsilon: f64,
        resolution: usize,
        stripe_half_height: usize,
        opts: &SolveOptions,
    ) -> Result<Self> {
        let set = solve_boundary_layers(&shape.to_shape(), stripe_half_height, resolution, opts)?;
        Self::from_set(shape, epsilon, &set)
    }

    /// Assembles the document from an already-solved stripe set (so callers
    /// that also want the raw stripe fields pay for the solves once).
    pub fn from_set(shape: &ShapeSpec, epsilon: f64, set: &StripeSet) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let e2 = epsilon * epsilon;
        let k = set.cell.k;
        let k_eps = [
            [e2 * k[0][0], e2 * k[0][1]],
            [e2 * k[1][0], e2 * k[1][1]],
        ];
        let symmetry_zeros = if shape.to_shape().mirror_symmetric_x() {
            ["k12", "k21", "ns_bl", "m1_bl[1]", "momega_bl[0]"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            Vec::new()
        };
        Ok(EffectiveParameters {
            shape: shape.clone(),
            epsilon,
            porosity: set.cell.porosity,
            resolution: set.constants.resolution,
            k,
            k_eps,
            bl: set.constants.clone(),
            symmetry_zeros,
        })
    }

    /// Interface closure with the homogenized constants.
    pub fn mode_new(&self) -> InterfaceMode {
        InterfaceMode::New {
            epsilon: self.epsilon,
            n1_bl: self.bl.n1_bl,
            ns_bl: self.bl.ns_bl,
            m1_bl: self.bl.m1_bl,
        }
    }

    /// Tangential permeability scale sqrt((K_eps tau) . tau) used by the
    /// classical slip condition.
    pub fn sqrt_k_eps_tangential(&self) -> f64 {
        self.k_eps[0][0].sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        let doc: EffectiveParameters = serde_json::from_reader(BufReader::new(f))?;
        doc.validate()?;
        Ok(doc)
    }

    /// Physical sanity of a document (also guards hand-edited files).
    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0 && k[0][0] * k[1][1] - k[0][1] * k[1][0] > 0.0) {
            return Err(Error::Config(
                "permeability tensor must be positive definite".into(),
            ));
        }
        if (k[0][1] - k[1][0]).abs() > 1e-6 * k[0][0].max(k[1][1]) {
            return Err(Error::Config(format!(
                "permeability tensor must be symmetric, got k12 {} vs k21 {}",
                k[0][1], k[1][0]
            )));
        }
        if !(self.epsilon > 0.0) || !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(Error::Config(
                "scale separation and porosity must be physical".into(),
            ));
        }
        if self.bl.n1_bl >= 0.0 {
            return Err(Error::Config(format!(
                "shear-slip constant must be negative, got {}",
                self.bl.n1_bl
            )));
        }
        Ok(())
    }
}
