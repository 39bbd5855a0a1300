//! Interactive polygon annotation with a recurrent vertex predictor.

pub mod annotsim;
pub mod data;
pub mod evalbench;
pub mod exec;
pub mod gridcode;
pub mod model;
pub mod polygeom;

pub use exec::Exec;
