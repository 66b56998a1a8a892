//! Simulation toolkit for coupled free-flow / porous-medium (Stokes-Darcy) systems.
//!
//! The crate computes homogenized effective parameters of a periodic porous
//! medium (permeability from unit-cell problems, interface constants from
//! boundary-layer stripe problems), solves the macroscale coupled problem
//! under classical (Beavers-Joseph) or homogenization-derived interface
//! conditions, and validates both against ensemble-averaged pore-scale
//! reference simulations.

pub mod boundary_layers;
pub mod cell_problems;
pub mod dns;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod macro_solver;
pub mod params;
pub mod stokes;

pub use error::{Error, Result};
