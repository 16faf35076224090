//! First- and second-order optimizers.

mod adam;
mod lbfgs;

pub use adam::{Adam, AdamConfig};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsReport, LbfgsStatus};
