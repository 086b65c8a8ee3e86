//! Energy-shaping (IDA-PBC) controller synthesis for a planar hip-exoskeleton biped.
//!
//! * [`model`]: constrained port-controlled Hamiltonian dynamics of the trunk + two-leg model.
//! * [`basis`]: shaping basis functions and the regressor that makes the control law linear.
//! * [`shaping`]: control law, matching residual, closed-loop GRF and energy audits.
//! * [`dataio`]: gait dataset ingestion, training states and EMG effort processing.
//! * [`optim`]: L1-regularized weighted least-squares fitting, SIM/VAF and LOSO cross-validation.

pub mod basis;
pub mod dataio;
pub mod error;
pub mod expr;
pub mod model;
pub mod optim;
pub mod shaping;

pub use error::{BasisError, DataError, ExprError, FitError, ModelError, ShapingError};
