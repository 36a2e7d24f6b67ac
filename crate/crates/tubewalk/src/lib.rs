//! Reduced-order bipedal navigation over uncertain terrain.
//!
//! The crate wires six subsystems into one planning-and-control stack:
//!
//! - [`terrain`]: synthetic ground-truth heightmaps plus a Gaussian-process
//!   elevation model exposing mean, variance, and mean-gradient queries.
//! - [`conformal`]: split conformal calibration of the GP mean, yielding
//!   distribution-free elevation intervals at a chosen failure rate.
//! - [`rom`]: the reduced-order sagittal walking model — continuous and
//!   discrete linear-inverted-pendulum dynamics, a flywheel torque channel,
//!   the hybrid reset map with its saltation sensitivity, and orbital energy.
//! - [`contraction`]: contraction-metric synthesis for the torque channel,
//!   tracking-error energy bounds, and robust invariant tube profiles.
//! - [`planner`]: receding-horizon footstep MPC with conformal footstep
//!   safety margins and tube-aware orbital-energy constraints.
//! - [`sim`]: a seeded closed-loop Monte-Carlo harness executing
//!   plan/track/reset cycles against the true terrain, with tracking,
//!   invariance, and coverage metrics.

pub mod conformal;
pub mod contraction;
pub mod planner;
pub mod rom;
pub mod sim;
pub mod terrain;

pub use conformal::CalibratedThreshold;
pub use contraction::{CcmData, TubeProfile, TubeVariant};
pub use planner::{MpcConfig, Plan};
pub use rom::{ControlInput, GlobalState, RobotParams, SagittalState};
pub use sim::{CampaignSummary, SimReport, TrialConfig};
pub use terrain::{GpModel, KernelConfig, Observation, TerrainGrid, TerrainSpec, TerrainStyle};
