//! Power-system state estimation by Gauss-Newton belief propagation.

pub mod bad_data;
pub mod convergence;
pub mod error;
pub mod experiments;
pub mod factor_graph;
pub mod fixtures;
pub mod gnbp;
pub mod measurement;
pub mod network;
pub mod power_flow;
pub mod rng;
pub mod wls;

pub use error::{Error, Result};
pub use measurement::{Measurement, MeasurementKind, MeasurementSet};
pub use network::{load_case, NetworkModel};
pub use power_flow::StateVector;
