//! Seeded closed-loop Monte-Carlo harness.
//!
//! Each trial builds a fresh world (terrain, observations, GP fit, conformal
//! calibration, metric synthesis), then walks plan/track/reset cycles:
//! measure the true stance height, replan, track the reference arc with the
//! flywheel feedback against the *true* stance dynamics, score tube
//! membership and coverage at the metric rate, and hand off through the
//! reset. The terrain disturbance is realized physically through the true
//! pendulum frequency rather than as an abstract additive signal.

mod artifacts;

pub use artifacts::emit_artifacts;

use crate::conformal::{calibrate_threshold, nonconformity_scores, split_dataset, ConformalError};
use crate::contraction::{ccm_torque, synthesize_ccm, ContractionError, TubeVariant};
use crate::planner::{plan_with_warm_start, MpcConfig, Plan, PlannerError, SolverConfig};
use crate::rom::{
    integrate_auglipm, lipm_flow, orbital_energy, saltation_matrix, terrain_disturbance_bound,
    wrap_angle, ControlInput, GlobalState, RobotParams, RomError, SagittalState,
};
use crate::terrain::{
    fit_gp, sample_observations, GpError, GpModel, KernelConfig, TerrainError, TerrainGrid,
    TerrainSpec, TerrainStyle,
};
use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Contraction(#[from] ContractionError),
    #[error("planner setup: {0}")]
    Planner(String),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error("calibrated threshold is unbounded at delta = {delta} with {k} calibration points")]
    UnboundedThreshold { delta: f64, k: usize },
    #[error("stance sits {eta} below the apex height; true dynamics undefined")]
    InvalidStance { eta: f64 },
    #[error("artifact i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Which torque law tracks the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    /// Contraction feedback torque, clamped to the torque box.
    Ccm,
    /// Torque forced to zero (ablation).
    Zero,
}

/// Full description of one closed-loop trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialConfig {
    pub terrain: TerrainSpec,
    /// Observations sampled from the grid (without replacement).
    pub samples: usize,
    pub noise_std: f64,
    pub train_fraction: f64,
    /// Conformal failure rate.
    pub delta: f64,
    pub start: [f64; 2],
    pub start_heading: f64,
    pub goal: [f64; 2],
    /// Initial sagittal speed.
    pub v0: f64,
    /// Contraction rate for metric synthesis.
    pub lambda: f64,
    pub rho: Option<f64>,
    /// Sagittal position box feeding the disturbance bound.
    pub x_box: [f64; 2],
    /// Torque box: disturbance-bound corner and the applied clamp.
    pub tau_box: [f64; 2],
    pub max_steps: usize,
    /// Tracking metric sampling rate, Hz.
    pub metric_rate: f64,
    pub goal_tolerance: f64,
    pub controller: ControllerMode,
    pub mpc: MpcConfig,
    /// Elevation kernel; the multi-scale default suits rough styles, a
    /// single tuned scale fits the smooth ones tighter.
    pub kernel: KernelConfig,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            terrain: TerrainSpec {
                style: TerrainStyle::Hilly,
                extent: [8.0, 8.0],
                resolution: 50,
                // Desk-scale map: the height band is scaled with the extent
                // so slopes match the larger reference maps.
                height_band: [0.0, 0.35],
                seed: 1,
            },
            samples: 700,
            noise_std: 0.005,
            train_fraction: 0.7,
            delta: 0.15,
            start: [1.2, 1.2],
            start_heading: 0.78,
            goal: [6.8, 6.8],
            v0: 0.9,
            lambda: 16.0,
            rho: None,
            x_box: [-0.35, 0.35],
            tau_box: [-25.0, 25.0],
            max_steps: 40,
            metric_rate: 200.0,
            goal_tolerance: 0.3,
            controller: ControllerMode::Ccm,
            mpc: {
                let mut mpc = MpcConfig {
                    solver: SolverConfig {
                        restarts: 2,
                        max_sweeps: 150,
                        ..SolverConfig::default()
                    },
                    ..MpcConfig::default()
                };
                // Moderate forward gaits: fast gaits take long steps whose
                // height changes defeat the clearance on rough maps.
                mpc.state_lower[3] = 0.1;
                mpc.state_upper[3] = 1.15;
                // Weight terminal heading strongly so pass-through plans
                // beat goal-circling ones near the goal.
                mpc.heading_weight = 6.0;
                mpc
            },
            kernel: KernelConfig::single_rbf(0.05, 1.2),
            seed: 1,
        }
    }
}

/// One tracking sample at the metric rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepSample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub x_ref: f64,
    pub v_ref: f64,
    pub radius: f64,
}

/// Everything recorded about one executed walking step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub samples: Vec<StepSample>,
    /// Tracking error inside the tube at every sample of this step.
    pub tube_invariant: bool,
    /// True stance height inside the calibrated interval.
    pub cp_covered: bool,
    /// True executed height change within the clearance.
    pub footstep_safe: bool,
    pub control: ControlInput,
    pub true_stance_height: f64,
    pub estimated_stance_height: f64,
    /// Saltation-propagated tube energy at the handoff (diagnostic).
    pub handoff_energy: f64,
}

/// Aggregated outcome of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    /// Mean tracking-error norm across every sample of every step.
    pub ane: f64,
    /// Fraction of steps fully inside their tube.
    pub p_tube: f64,
    /// Fraction of steps whose stance truth was covered.
    pub cp_coverage: f64,
    /// Fraction of steps whose executed height change respected the clearance.
    pub footstep_safety_rate: f64,
    pub steps: usize,
    pub steps_to_goal: Option<usize>,
    pub reached: bool,
    pub failed: bool,
    pub threshold: f64,
    pub w_bar: f64,
    pub seed: u64,
    #[serde(skip_serializing, default)]
    pub wall_time_s: f64,
}

/// True sagittal pendulum frequency at a stance: the apex height is offset
/// by the gap between true and estimated terrain there.
pub fn realize_true_omega(
    grid: &TerrainGrid,
    gp: &GpModel,
    stance: &Vector2<f64>,
    p: &RobotParams,
) -> Result<f64, SimError> {
    let eta = grid.height_at(stance) - gp.mean(stance);
    let denom = p.apex_height + eta;
    if denom <= 0.0 {
        return Err(SimError::InvalidStance { eta });
    }
    Ok((p.gravity / denom).sqrt())
}

struct World {
    grid: TerrainGrid,
    gp: GpModel,
    threshold: crate::conformal::CalibratedThreshold,
    ccm: crate::contraction::CcmData,
    w_bar: f64,
    mpc: MpcConfig,
}

fn build_world(cfg: &TrialConfig) -> Result<World, SimError> {
    let grid = TerrainGrid::generate(&cfg.terrain)?;
    let obs = sample_observations(&grid, cfg.samples, cfg.noise_std, cfg.seed ^ 0x5EED)?;
    let (train, cal) = split_dataset(&obs, cfg.train_fraction, cfg.seed ^ 0x5911);
    let noise_var = (cfg.noise_std * cfg.noise_std).max(1e-8);
    let gp = fit_gp(&train, cfg.kernel.clone(), noise_var)?;
    let scores = nonconformity_scores(&gp, &cal)?;
    let threshold = calibrate_threshold(&scores, cfg.delta)?;
    if threshold.is_unbounded() {
        return Err(SimError::UnboundedThreshold {
            delta: cfg.delta,
            k: threshold.calibration_count,
        });
    }
    let mut mpc = cfg.mpc.clone();
    mpc.goal = cfg.goal;
    mpc.tube_dt = 1.0 / cfg.metric_rate;
    mpc.solver.seed = cfg.seed;
    // Keep planned positions on the map with a margin.
    let margin = 0.2;
    mpc.state_lower[0] = mpc.state_lower[0].max(grid.origin[0] + margin);
    mpc.state_lower[1] = mpc.state_lower[1].max(grid.origin[1] + margin);
    mpc.state_upper[0] = mpc.state_upper[0].min(grid.origin[0] + grid.extent[0] - margin);
    mpc.state_upper[1] = mpc.state_upper[1].min(grid.origin[1] + grid.extent[1] - margin);
    let ccm = synthesize_ccm(&mpc.robot, cfg.lambda, cfg.rho)?;
    let bound = terrain_disturbance_bound(threshold.threshold, &mpc.robot, cfg.x_box, cfg.tau_box)?;
    Ok(World {
        grid,
        gp,
        threshold,
        ccm,
        w_bar: bound.w_bar,
        mpc,
    })
}

/// Run one closed-loop trial.
pub fn run_trial(cfg: &TrialConfig) -> Result<(SimReport, Vec<StepRecord>), SimError> {
    let t_start = std::time::Instant::now();
    let world = build_world(cfg)?;
    let p = world.mpc.robot;
    let dt = 1.0 / cfg.metric_rate;
    let (sh, ch) = (
        (p.omega * p.step_duration).sinh(),
        (p.omega * p.step_duration).cosh(),
    );

    // Start on a steady stance for the initial speed.
    let steady_offset = cfg.v0 * (ch - 1.0) / (p.omega * sh);
    let mut x_loc = -steady_offset;
    let start = Vector2::new(cfg.start[0], cfg.start[1]);
    let mut global = GlobalState::new(
        start.x,
        start.y,
        world.grid.height_at(&start),
        cfg.v0,
        cfg.start_heading,
    );

    let mut records: Vec<StepRecord> = Vec::new();
    let mut reached = false;
    let mut failed = false;
    let mut err_sum = 0.0f64;
    let mut err_count = 0usize;
    let mut warm: Option<Plan> = None;

    for index in 0..cfg.max_steps {
        let stance = global.planar();
        let z_true = world.grid.height_at(&stance);
        let z_est = world.gp.mean(&stance);
        let cp_covered = (z_true - z_est).abs() <= world.threshold.threshold;

        // Replan from the measured state.
        let mut x_init = global;
        x_init.position.z = z_true;
        let plan = match plan_with_warm_start(
            &x_init,
            x_loc,
            z_true,
            &world.gp,
            &world.threshold,
            &world.ccm,
            world.w_bar,
            &world.mpc,
            warm.as_ref(),
        ) {
            Ok(plan) => plan,
            Err(PlannerError::Infeasible(best_effort)) => {
                if std::env::var_os("TUBEWALK_TRACE").is_some() {
                    eprintln!(
                        "[trace] step {index}: infeasible replan at ({:.3},{:.3}) v={:.3} th={:.3}: foot {:?} orbital {:?} box {:.2e}",
                        global.position.x,
                        global.position.y,
                        global.v_loc,
                        global.heading,
                        best_effort.report.footstep_residuals,
                        best_effort.report.orbital_residuals,
                        best_effort.report.state_box_violation,
                    );
                }
                failed = true;
                break;
            }
            Err(e) => return Err(SimError::Planner(e.to_string())),
        };
        let control = plan.controls[0];
        let reference_start = SagittalState::new(x_loc, global.v_loc);
        let tube = &plan.tubes[0];

        // Track against the true stance dynamics. The frequency gap enters
        // as the terrain disturbance channel of the nominal model, which is
        // algebraically identical to integrating with the true frequency.
        let omega_true = realize_true_omega(&world.grid, &world.gp, &stance, &p)?;
        let c_delta = omega_true * omega_true - p.omega * p.omega;
        let mg = p.mass * p.gravity;
        let controller = cfg.controller;
        let ccm = world.ccm;
        let tau_box = cfg.tau_box;
        let torque_fn = move |t: f64, s: &SagittalState| -> f64 {
            match controller {
                ControllerMode::Ccm => {
                    let reference = lipm_flow(&reference_start, 0.0, t, &p);
                    ccm_torque(&ccm, s, &reference, &p).clamp(tau_box[0], tau_box[1])
                }
                ControllerMode::Zero => 0.0,
            }
        };
        let w_fn = move |t: f64, s: &SagittalState| -> f64 {
            c_delta * (s.x - torque_fn(t, s) / mg)
        };
        let trajectory = match integrate_auglipm(
            &reference_start,
            torque_fn,
            w_fn,
            p.step_duration,
            dt,
            &p,
        ) {
            Ok(t) => t,
            Err(RomError::Diverged { .. }) => {
                failed = true;
                break;
            }
            Err(e) => return Err(SimError::Rom(e)),
        };

        // Score the step at the metric rate.
        let mut tube_invariant = true;
        let mut samples = Vec::with_capacity(trajectory.len());
        for (i, knot) in trajectory.iter().enumerate() {
            let reference = lipm_flow(&reference_start, 0.0, knot.t, &p);
            let err = knot.state.error_to(&reference).norm();
            err_sum += err;
            err_count += 1;
            let radius = tube.radius[i];
            if err > radius {
                tube_invariant = false;
            }
            samples.push(StepSample {
                t: knot.t,
                x: knot.state.x,
                v: knot.state.v,
                x_ref: reference.x,
                v_ref: reference.v,
                radius,
            });
        }

        let end = trajectory.last().expect("trajectory has knots").state;
        if end.x.abs() > 2.0 || end.v.abs() > 5.0 {
            failed = true;
            records.push(StepRecord {
                index,
                samples,
                tube_invariant,
                cp_covered,
                footstep_safe: false,
                control,
                true_stance_height: z_true,
                estimated_stance_height: z_est,
                handoff_energy: f64::NAN,
            });
            break;
        }

        // Executed planar displacement over the step including the switch
        // drift, rotated by the heading held during the step.
        let displacement = end.x + end.v * p.switch_duration - x_loc;
        let dir = Vector2::new(global.heading.cos(), global.heading.sin());
        let next_planar = stance + dir * displacement;
        let next_z_true = world.grid.height_at(&next_planar);
        let footstep_safe = (next_z_true - z_true).abs() <= world.mpc.max_height_step;

        // Foot switch at the planned placement; the reference end feeds the
        // saltation handoff diagnostic.
        let ref_end = lipm_flow(&reference_start, 0.0, p.step_duration, &p);
        let u_next = plan.controls[1].foot_offset;
        let u_reset = ref_end.x + ref_end.v * p.switch_duration + u_next;
        let handoff_energy = saltation_matrix(&ref_end, u_reset, &p)
            .map(|xi| {
                crate::contraction::propagate_tube_across_reset(
                    tube.end_radius(),
                    &xi,
                    &ccm.metric,
                )
            })
            .unwrap_or(f64::NAN);

        if std::env::var_os("TUBEWALK_TRACE").is_some() {
            eprintln!(
                "[trace] step {index}: at ({:.3},{:.3}) v={:.3} th={:.3} -> uf={:.3} dth={:.3}",
                stance.x, stance.y, global.v_loc, global.heading,
                control.foot_offset, control.heading_change,
            );
        }
        records.push(StepRecord {
            index,
            samples,
            tube_invariant,
            cp_covered,
            footstep_safe,
            control,
            true_stance_height: z_true,
            estimated_stance_height: z_est,
            handoff_energy,
        });

        // Advance the global bookkeeping with the executed motion; the
        // height follows the estimated slope along the displacement.
        let slope = world.gp.mean_gradient(&stance);
        let x_plus = end.x + end.v * p.switch_duration - u_reset;
        let v_plus = end.v;
        global = GlobalState::new(
            next_planar.x,
            next_planar.y,
            global.position.z + slope.dot(&dir) * displacement,
            v_plus,
            wrap_angle(global.heading + control.heading_change),
        );
        x_loc = x_plus;
        warm = Some(plan);

        if orbital_energy(x_loc, global.v_loc, p.omega) < 0.0 {
            failed = true;
            break;
        }
        // Goal capture counts the closest pass of the CoM segment walked
        // this step, not just the stance points.
        let goal_point = Vector2::new(cfg.goal[0], cfg.goal[1]);
        if segment_distance(&stance, &next_planar, &goal_point) <= cfg.goal_tolerance {
            reached = true;
            break;
        }
    }

    let steps = records.len();
    let frac = |f: &dyn Fn(&StepRecord) -> bool| -> f64 {
        if steps == 0 {
            0.0
        } else {
            records.iter().filter(|r| f(r)).count() as f64 / steps as f64
        }
    };
    let report = SimReport {
        ane: if err_count == 0 {
            0.0
        } else {
            err_sum / err_count as f64
        },
        p_tube: frac(&|r| r.tube_invariant),
        cp_coverage: frac(&|r| r.cp_covered),
        footstep_safety_rate: frac(&|r| r.footstep_safe),
        steps,
        steps_to_goal: reached.then_some(steps),
        reached,
        failed,
        threshold: world.threshold.threshold,
        w_bar: world.w_bar,
        seed: cfg.seed,
        wall_time_s: t_start.elapsed().as_secs_f64(),
    };
    Ok((report, records))
}

/// Run `trials` independent trials; terrain and sampling seeds are derived
/// per trial, everything else comes from the base config.
pub fn run_campaign(
    base: &TrialConfig,
    trials: usize,
) -> Vec<Result<(SimReport, Vec<StepRecord>), SimError>> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1));
            cfg.terrain.seed = cfg.seed ^ 0x7E44;
            run_trial(&cfg)
        })
        .collect()
}

/// Campaign-level aggregates with binomial two-sigma half-widths, pooled
/// over steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: usize,
    pub completed: usize,
    pub reached: usize,
    pub failed: usize,
    pub mean_ane: f64,
    pub mean_steps: f64,
    pub total_steps: usize,
    pub p_tube: f64,
    pub p_tube_half_width: f64,
    pub cp_coverage: f64,
    pub cp_coverage_half_width: f64,
    pub footstep_safety_rate: f64,
    pub footstep_safety_half_width: f64,
    /// Fraction of trials whose every step stayed in its tube.
    pub whole_trial_invariance_rate: f64,
    pub whole_trial_half_width: f64,
    pub mean_threshold: f64,
}

/// Distance from a point to the segment `[a, b]`.
fn segment_distance(a: &Vector2<f64>, b: &Vector2<f64>, point: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 1e-18 {
        return (point - a).norm();
    }
    let t = ((point - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (point - (a + ab * t)).norm()
}

fn binomial_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        2.0 * (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Aggregate per-trial outcomes; step-level rates are pooled across trials.
pub fn aggregate(results: &[(SimReport, Vec<StepRecord>)]) -> CampaignSummary {
    let trials = results.len();
    let mut total_steps = 0usize;
    let mut tube_steps = 0usize;
    let mut covered_steps = 0usize;
    let mut safe_steps = 0usize;
    let mut whole_ok = 0usize;
    let mut ane_sum = 0.0;
    let mut thr_sum = 0.0;
    let mut reached = 0usize;
    let mut failed = 0usize;
    for (report, records) in results {
        total_steps += records.len();
        tube_steps += records.iter().filter(|r| r.tube_invariant).count();
        covered_steps += records.iter().filter(|r| r.cp_covered).count();
        safe_steps += records.iter().filter(|r| r.footstep_safe).count();
        if !records.is_empty() && records.iter().all(|r| r.tube_invariant) {
            whole_ok += 1;
        }
        ane_sum += report.ane;
        thr_sum += report.threshold;
        if report.reached {
            reached += 1;
        }
        if report.failed {
            failed += 1;
        }
    }
    let rate = |num: usize| {
        if total_steps == 0 {
            0.0
        } else {
            num as f64 / total_steps as f64
        }
    };
    let p_tube = rate(tube_steps);
    let cp = rate(covered_steps);
    let safe = rate(safe_steps);
    let whole = if trials == 0 {
        0.0
    } else {
        whole_ok as f64 / trials as f64
    };
    CampaignSummary {
        trials,
        completed: trials,
        reached,
        failed,
        mean_ane: if trials == 0 { 0.0 } else { ane_sum / trials as f64 },
        mean_steps: if trials == 0 {
            0.0
        } else {
            total_steps as f64 / trials as f64
        },
        total_steps,
        p_tube,
        p_tube_half_width: binomial_half_width(p_tube, total_steps),
        cp_coverage: cp,
        cp_coverage_half_width: binomial_half_width(cp, total_steps),
        footstep_safety_rate: safe,
        footstep_safety_half_width: binomial_half_width(safe, total_steps),
        whole_trial_invariance_rate: whole,
        whole_trial_half_width: binomial_half_width(whole, trials),
        mean_threshold: if trials == 0 { 0.0 } else { thr_sum / trials as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_config() -> TrialConfig {
        TrialConfig {
            terrain: TerrainSpec {
                style: TerrainStyle::FlatRough,
                extent: [8.0, 8.0],
                resolution: 50,
                height_band: [0.0, 0.0],
                seed: 3,
            },
            // Tiny but nonzero: an exactly-zero threshold makes the tube
            // zero-width, and integrator truncation (~1e-12) would count as
            // an exit.
            noise_std: 1e-5,
            goal: [5.0, 5.0],
            start: [1.2, 1.2],
            start_heading: 0.78,
            max_steps: 25,
            seed: 3,
            ..TrialConfig::default()
        }
    }

    #[test]
    fn true_omega_matches_estimate_gap() {
        let cfg = flat_config();
        let world = build_world(&cfg).unwrap();
        let p = world.mpc.robot;
        let stance = Vector2::new(2.0, 2.0);
        let omega_true = realize_true_omega(&world.grid, &world.gp, &stance, &p).unwrap();
        let eta = world.grid.height_at(&stance) - world.gp.mean(&stance);
        assert_relative_eq!(
            omega_true * omega_true,
            p.gravity / (p.apex_height + eta),
            max_relative = 1e-12
        );
    }

    #[test]
    fn disturbed_flow_identity() {
        // Integrating the nominal channel with w = c_delta (x - tau/(m g))
        // equals integrating with the true frequency directly.
        let p = RobotParams::default();
        let eta = 0.04;
        let omega_true = (p.gravity / (p.apex_height + eta)).sqrt();
        let c_delta = omega_true * omega_true - p.omega * p.omega;
        let mg = p.mass * p.gravity;
        let s0 = SagittalState::new(-0.12, 0.8);
        let tau = |t: f64, _s: &SagittalState| 6.0 * (4.0 * t).cos();
        let via_nominal = integrate_auglipm(
            &s0,
            tau,
            |t, s| c_delta * (s.x - tau(t, s) / mg),
            0.4,
            1.0 / 200.0,
            &p,
        )
        .unwrap();
        // True plant: frequency omega_true with the torque channel scaled
        // accordingly: xdd = w_true^2 (x - tau/(m g)).
        let mut p_true = p;
        p_true.apex_height = p.apex_height + eta;
        p_true.omega = omega_true;
        p_true.validate().unwrap();
        // torque gain of p_true is w_true^2/(m g), matching the identity.
        let via_true =
            integrate_auglipm(&s0, tau, |_, _| 0.0, 0.4, 1.0 / 200.0, &p_true).unwrap();
        for (a, b) in via_nominal.iter().zip(via_true.iter()) {
            assert!(
                (a.state.x - b.state.x).abs() < 1e-10 && (a.state.v - b.state.v).abs() < 1e-10,
                "mismatch at t={}: {:?} vs {:?}",
                a.t,
                a.state,
                b.state
            );
        }
    }

    #[test]
    fn flat_trial_is_perfect_and_deterministic() {
        let cfg = flat_config();
        let (report, records) = run_trial(&cfg).unwrap();
        assert!(!report.failed, "flat trial must not fail");
        assert!(report.steps > 3);
        assert_eq!(report.p_tube, 1.0);
        assert_eq!(report.cp_coverage, 1.0);
        assert_eq!(report.footstep_safety_rate, 1.0);
        assert!(report.ane < 1e-7, "ane {}", report.ane);
        assert_eq!(records.len(), report.steps);
        // Sample shape at the metric rate.
        assert_eq!(records[0].samples.len(), 81);

        let (report2, _) = run_trial(&cfg).unwrap();
        let mut a = report.clone();
        let mut b = report2;
        a.wall_time_s = 0.0;
        b.wall_time_s = 0.0;
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn hilly_trial_reaches_goal() {
        let cfg = TrialConfig {
            max_steps: 30,
            ..TrialConfig::default()
        };
        let (report, records) = run_trial(&cfg).unwrap();
        assert!(!report.failed, "trial failed after {} steps", report.steps);
        assert!(report.reached, "goal not reached in {} steps", report.steps);
        assert!(report.p_tube >= 0.7, "p_tube {}", report.p_tube);
        // The executed trajectory ends near the goal.
        let last = records.last().unwrap();
        assert!(last.samples.len() == 81);
    }

    #[test]
    fn aggregate_single_report_matches() {
        let cfg = flat_config();
        let out = run_trial(&cfg).unwrap();
        let summary = aggregate(std::slice::from_ref(&out));
        assert_eq!(summary.trials, 1);
        assert_relative_eq!(summary.p_tube, out.0.p_tube, max_relative = 1e-12);
        assert_relative_eq!(summary.mean_ane, out.0.ane, max_relative = 1e-12);
        assert_eq!(summary.total_steps, out.0.steps);
        assert_eq!(summary.whole_trial_invariance_rate, 1.0);
    }

    #[test]
    fn aggregate_flags_all_failed() {
        let report = SimReport {
            ane: 0.1,
            p_tube: 0.0,
            cp_coverage: 0.0,
            footstep_safety_rate: 0.0,
            steps: 0,
            steps_to_goal: None,
            reached: false,
            failed: true,
            threshold: 0.01,
            w_bar: 0.05,
            seed: 1,
            wall_time_s: 0.0,
        };
        let summary = aggregate(&[(report, vec![])]);
        assert_eq!(summary.failed, 1);
        assert_eq!(summary.reached, 0);
        assert_eq!(summary.whole_trial_invariance_rate, 0.0);
    }

    #[test]
    fn unbounded_threshold_is_rejected() {
        let cfg = TrialConfig {
            delta: 0.001,
            samples: 100, // 30 calibration points cannot certify 99.9%
            ..flat_config()
        };
        assert!(matches!(
            run_trial(&cfg),
            Err(SimError::UnboundedThreshold { .. })
        ));
    }

    #[test]
    fn zero_torque_tracks_worse() {
        let base = TrialConfig {
            max_steps: 12,
            goal: [6.8, 6.8],
            ..TrialConfig::default()
        };
        let (with_ccm, _) = run_trial(&base).unwrap();
        let zero = TrialConfig {
            controller: ControllerMode::Zero,
            ..base
        };
        let (without, _) = run_trial(&zero).unwrap();
        assert!(
            with_ccm.ane < without.ane,
            "ccm ane {} vs zero-torque ane {}",
            with_ccm.ane,
            without.ane
        );
    }
}
