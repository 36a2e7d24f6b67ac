//! Ground-truth terrain synthesis and Gaussian-process elevation estimation.

mod gp;
mod grid;

pub use gp::{fit_gp, GpError, GpModel, GpModelData, KernelConfig, KernelVariant};
pub use grid::{
    sample_observations, write_observations_csv, Observation, TerrainError, TerrainGrid,
    TerrainSpec, TerrainStyle,
};
