//! Dependent singular trajectories of driftless control-affine systems on a
//! three-dimensional chart.
//!
//! The pipeline runs from a frame of vector fields ([`system`]) to its
//! dependence locus ([`locus`]), the characteristic line field on the locus
//! ([`charfield`]), the Pontryagin lift of its integral curves ([`pmp`]) and an
//! independent rank test of the endpoint mapping ([`endpoint`]). [`perturb`]
//! checks that the whole picture survives small perturbations of the frame.

pub mod charfield;
pub mod endpoint;
pub mod export;
pub mod expr;
pub mod interp;
pub mod locus;
pub mod perturb;
pub mod pmp;
pub mod system;



pub use charfield::Trajectory;
pub use endpoint::{ControlSignal, SingularityVerdict};
pub use locus::{LocusMesh, TangencyReport};
pub use pmp::ExtremalLift;
pub use expr::{parse_expr, ScalarField, Var};


pub use system::{ChartBox, FrameValue, VectorFieldSystem};

/// A point of the chart.
pub type Point = nalgebra::Vector3<f64>;
