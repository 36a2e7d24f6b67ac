//! Receding-horizon footstep MPC over the global five-state walking model.
//!
//! The planner chooses stance offsets and heading changes over a horizon,
//! rolling the global state forward by construction (single shooting) and
//! scoring goal distance, terminal heading, and accumulated terrain slope.
//! Two safety constraint families are enforced through escalating exact
//! penalties:
//!
//! - footstep safety: consecutive stance heights may differ by at most the
//!   step clearance minus the calibrated elevation uncertainty;
//! - orbital energy: every point of each step's reference arc, inflated by
//!   the tracking tube radius, must keep positive orbital energy so the
//!   plan stays on the stable side of the phase-space asymptotes.
//!
//! Tubes are chained across the horizon: each step's initial tracking
//! energy is the previous tube's end radius pushed through the saltation
//! matrix of the planned foot switch.

use crate::conformal::CalibratedThreshold;
use crate::contraction::{
    disturbance_amplitude, propagate_tube_across_reset, tube_profile, CcmData, TubeProfile,
    TubeVariant,
};
use crate::rom::{
    global_step, lipm_flow, orbital_energy, saltation_matrix, wrap_angle, ControlInput,
    GlobalState, RobotParams, SagittalState,
};
use crate::terrain::GpModel;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("elevation threshold is unbounded; footstep safety cannot be certified")]
    UncertifiableThreshold,
    #[error("initial state outside the state box: {0}")]
    StartOutsideBox(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no feasible plan found across restarts")]
    Infeasible(Box<Plan>),
}

/// Solver knobs for the penalty multi-start search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub restarts: usize,
    pub max_sweeps: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_sweeps: 400,
            penalty_initial: 100.0,
            penalty_growth: 10.0,
            penalty_max: 1e6,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

/// MPC configuration: horizon, weights, boxes, clearance, goal, solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Terminal planar goal weight.
    pub goal_weight: f64,
    /// Terminal heading weight.
    pub heading_weight: f64,
    /// Accumulated slope-norm weight.
    pub slope_weight: f64,
    /// Lower/upper box on (x, y, z, v_loc, heading).
    pub state_lower: [f64; 5],
    pub state_upper: [f64; 5],
    /// Lower/upper box on (foot_offset, heading_change).
    pub control_lower: [f64; 2],
    pub control_upper: [f64; 2],
    /// Maximum stance-height change per step, metres.
    pub max_height_step: f64,
    /// Lipschitz constant of the clearance constraint in its second
    /// argument; the absolute-difference form gives exactly 1.
    pub lipschitz: f64,
    pub goal: [f64; 2],
    /// Terminal heading target; `None` means the bearing towards the goal.
    pub goal_heading: Option<f64>,
    /// Strictness margin on the orbital-energy residual.
    pub orbital_margin: f64,
    pub tube_variant: TubeVariant,
    /// Tube/reference sampling interval, seconds.
    pub tube_dt: f64,
    pub robot: RobotParams,
    pub solver: SolverConfig,
}

impl MpcConfig {
    pub fn with_goal(goal: [f64; 2]) -> Self {
        Self {
            goal,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PlannerError> {
        if self.horizon < 2 {
            return Err(PlannerError::InvalidConfig(format!(
                "horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        if !(self.max_height_step > 0.0) {
            return Err(PlannerError::InvalidConfig(
                "max_height_step must be positive".into(),
            ));
        }
        if !(self.lipschitz > 0.0) {
            return Err(PlannerError::InvalidConfig("lipschitz must be positive".into()));
        }
        if !(self.tube_dt > 0.0) {
            return Err(PlannerError::InvalidConfig("tube_dt must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            goal_weight: 10.0,
            heading_weight: 1.0,
            slope_weight: 5.0,
            state_lower: [
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                -1.5,
                f64::NEG_INFINITY,
            ],
            state_upper: [f64::INFINITY, f64::INFINITY, f64::INFINITY, 1.5, f64::INFINITY],
            control_lower: [-0.1, -0.6],
            control_upper: [0.45, 0.6],
            max_height_step: 0.15,
            lipschitz: 1.0,
            goal: [5.0, 5.0],
            goal_heading: None,
            orbital_margin: 1e-4,
            tube_variant: TubeVariant::Standard,
            tube_dt: 1.0 / 200.0,
            robot: RobotParams::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Per-constraint residuals of a candidate plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `clearance - |dz| - L*threshold` per step; feasible at `>= 0`.
    pub footstep_residuals: Vec<f64>,
    /// Disk-minimum orbital energy per step; feasible above the margin.
    pub orbital_residuals: Vec<f64>,
    pub state_box_violation: f64,
    pub penalty_level: f64,
    pub restart_index: usize,
}

/// A shot plan: states by construction, controls, per-step reference arcs
/// and tubes, and the residual report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plan {
    pub states: Vec<GlobalState>,
    pub controls: Vec<ControlInput>,
    /// Reference sagittal arcs, one per step, sampled on the tube grid.
    pub references: Vec<Vec<SagittalState>>,
    pub tubes: Vec<TubeProfile>,
    pub report: FeasibilityReport,
    pub cost: f64,
}

impl Plan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// First control of a feasible plan; the caller executes it, re-measures
/// the stance height, and replans.
pub fn receding_horizon_step(plan: &Plan) -> ControlInput {
    plan.controls[0]
}

/// Footstep safety residual `clearance - |z_next - z_current| - L*threshold`.
/// Unbounded thresholds cannot certify anything and are rejected.
pub fn footstep_safety_residual(
    z_current: f64,
    z_next_mean: f64,
    thr: &CalibratedThreshold,
    cfg: &MpcConfig,
) -> Result<f64, PlannerError> {
    if thr.is_unbounded() {
        return Err(PlannerError::UncertifiableThreshold);
    }
    Ok(cfg.max_height_step - (z_next_mean - z_current).abs() - cfg.lipschitz * thr.threshold)
}

/// Minimum of the orbital energy over the closed disk of radius `r` centred
/// at `(x, v)`.
///
/// The energy is an indefinite quadratic (Hessian `diag(-w2, 1)`), so the
/// minimum over the disk sits on the boundary; it is found from the
/// trust-region secular equation on the multiplier, with the degenerate
/// zero-gradient-component case handled explicitly.
pub fn orbital_disk_min(x: f64, v: f64, r: f64, omega: f64) -> f64 {
    let w2 = omega * omega;
    let center = orbital_energy(x, v, omega);
    if r <= 0.0 {
        return center;
    }
    let gx = -w2 * x;
    let gv = v;
    let eval = |dx: f64, dv: f64| orbital_energy(x + dx, v + dv, omega);

    let scale = gx.abs().max(gv.abs()).max(1e-12);
    let (dx, dv) = if gx.abs() <= 1e-14 * scale {
        // Hard case: the x-component of the gradient vanishes, so the
        // multiplier pins to the negative curvature bound.
        let dv_at = -gv / (w2 + 1.0);
        if dv_at.abs() >= r {
            (0.0, -gv.signum() * r)
        } else {
            ((r * r - dv_at * dv_at).sqrt(), dv_at)
        }
    } else {
        // phi(mu) = |d(mu)|^2 is strictly decreasing on (w2, inf).
        let phi = |mu: f64| -> f64 {
            let dx = -gx / (mu - w2);
            let dv = -gv / (mu + 1.0);
            dx * dx + dv * dv
        };
        let mut lo = w2 + gx.abs() / (10.0 * r);
        while phi(lo) < r * r {
            lo = w2 + (lo - w2) * 0.25;
        }
        let mut hi = w2 + 1.0;
        while phi(hi) >= r * r {
            hi = w2 + (hi - w2) * 4.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) >= r * r {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi.abs().max(1.0) {
                break;
            }
        }
        let mu = 0.5 * (lo + hi);
        (-gx / (mu - w2), -gv / (mu + 1.0))
    };

    // Guard candidates keep the result conservative under any numerical
    // slip in the multiplier solve.
    let mut best = eval(dx, dv);
    for (cx, cv) in [(r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)] {
        best = best.min(eval(cx, cv));
    }
    best.min(center)
}

/// Worst-case orbital-energy residual of one step: the minimum over the
/// sampled reference arc of the disk-minimum energy at the tube radius.
pub fn orbital_energy_residual(
    reference: &[SagittalState],
    tube: &TubeProfile,
    omega: f64,
) -> f64 {
    assert_eq!(
        reference.len(),
        tube.radius.len(),
        "reference and tube must share the sampling grid"
    );
    reference
        .iter()
        .zip(tube.radius.iter())
        .map(|(s, r)| orbital_disk_min(s.x, s.v, *r, omega))
        .fold(f64::INFINITY, f64::min)
}

/// Shooting cost: terminal goal distance, wrapped terminal heading error,
/// and the accumulated slope-norm penalty along the visited states.
pub fn mpc_cost(
    states: &[GlobalState],
    controls: &[ControlInput],
    gp: &GpModel,
    cfg: &MpcConfig,
) -> f64 {
    assert_eq!(states.len(), controls.len() + 1, "states must be controls + 1");
    let goal = Vector2::new(cfg.goal[0], cfg.goal[1]);
    let last = states.last().expect("nonempty state sequence");
    let goal_heading = cfg.goal_heading.unwrap_or_else(|| {
        bearing_or(states[0].planar(), goal, states[0].heading)
    });
    let dp = last.planar() - goal;
    let dth = wrap_angle(last.heading - goal_heading);
    let mut cost = cfg.goal_weight * dp.norm_squared() + cfg.heading_weight * dth * dth;
    for s in &states[..states.len() - 1] {
        cost += cfg.slope_weight * gp.mean_gradient(&s.planar()).norm_squared();
    }
    cost
}

fn bearing_or(from: Vector2<f64>, to: Vector2<f64>, fallback: f64) -> f64 {
    let d = to - from;
    if d.norm() < 1e-9 {
        fallback
    } else {
        d.y.atan2(d.x)
    }
}

/// Everything the hot rollout needs to evaluate one decision vector.
struct RolloutContext<'a> {
    gp: &'a GpModel,
    threshold: f64,
    ccm: &'a CcmData,
    w_bar: f64,
    cfg: &'a MpcConfig,
    x_init: GlobalState,
    z_true: f64,
    /// Precomputed pieces of the tube recursion.
    d_bar: f64,
    eig_min: f64,
    knots: usize,
}

/// Violations and cost of one rollout, without materializing arcs or tubes.
struct RolloutEval {
    cost: f64,
    violation: f64,
    footstep_residuals: Vec<f64>,
    orbital_residuals: Vec<f64>,
    box_violation: f64,
}

impl RolloutEval {
    fn feasible(&self, cfg: &MpcConfig) -> bool {
        self.footstep_residuals.iter().all(|r| *r >= -1e-9)
            && self
                .orbital_residuals
                .iter()
                .all(|r| *r >= cfg.orbital_margin * 0.5)
            && self.box_violation <= 1e-6
    }
}

/// Decision vector layout: `[v_2 .. v_H, dth_0 .. dth_{H-1}]`.
///
/// The walk is parameterized by per-step target speeds instead of raw foot
/// offsets: the speed recursion has an unstable multiplier `cosh(w T)`, so
/// offsets act globally while target speeds act locally, which keeps the
/// coordinate search well conditioned. The first stance offset is pinned to
/// the measured stance (`-x_loc0`), which also pins `v_1`; the remaining
/// offsets are recovered from `uf_q = (cosh(wT) v_q - v_{q+1}) / (w sinh(wT))`.
fn decision_dim(h: usize) -> usize {
    (h - 1) + h
}

fn controls_from_vector(
    theta: &[f64],
    h: usize,
    x_loc0: f64,
    v0: f64,
    p: &RobotParams,
) -> Vec<ControlInput> {
    let (sh, ch) = (
        (p.omega * p.step_duration).sinh(),
        (p.omega * p.step_duration).cosh(),
    );
    let mut out = Vec::with_capacity(h);
    let mut v = v0;
    for q in 0..h {
        let foot_offset = if q == 0 {
            -x_loc0
        } else {
            (ch * v - theta[q - 1]) / (p.omega * sh)
        };
        let heading_change = theta[(h - 1) + q];
        out.push(ControlInput {
            foot_offset,
            heading_change,
        });
        v = ch * v - p.omega * sh * foot_offset;
    }
    out
}

impl<'a> RolloutContext<'a> {
    fn new(
        gp: &'a GpModel,
        thr: &CalibratedThreshold,
        ccm: &'a CcmData,
        w_bar: f64,
        cfg: &'a MpcConfig,
        x_init: &GlobalState,
        z_true: f64,
    ) -> Self {
        let (eig_min, _) = ccm.metric_eig_bounds();
        let knots = (cfg.robot.step_duration / cfg.tube_dt).round().max(1.0) as usize;
        Self {
            gp,
            threshold: thr.threshold,
            ccm,
            w_bar,
            cfg,
            x_init: *x_init,
            z_true,
            d_bar: disturbance_amplitude(&ccm.metric, w_bar, ccm.lambda),
            eig_min,
            knots,
        }
    }

    /// Roll the plan out and score it. Shared by the optimizer (light) and
    /// the plan builder; `collect` additionally materializes arcs and tubes.
    fn evaluate(&self, controls: &[ControlInput], collect: Option<&mut PlanParts>) -> RolloutEval {
        let cfg = self.cfg;
        let p = &cfg.robot;
        let h = cfg.horizon;
        let dt = p.step_duration / self.knots as f64;
        let w = p.omega;
        // Per-knot recurrences: hyperbolic rotation for the arc, geometric
        // decay for the energy envelope amplitude.
        let (sd, cd) = ((w * dt).sinh(), (w * dt).cosh());
        let decay_step = (-self.ccm.lambda * dt).exp();
        let sqrt_eig_min = self.eig_min.sqrt();

        let mut states = Vec::with_capacity(h + 1);
        states.push(self.x_init);
        let mut footstep_residuals = Vec::with_capacity(h);
        let mut orbital_residuals = Vec::with_capacity(h);
        let mut box_violation = 0.0f64;
        let mut violation = 0.0f64;
        let mut e0 = 0.0f64; // replanning starts each executed step at zero error
        let mut collect = collect;

        let mut z_prev = self.z_true;
        let (_, mut slope) = self.gp.mean_with_gradient(&self.x_init.planar());
        let mut slope_cost = 0.0;
        for q in 0..h {
            let state = states[q];
            let u = controls[q];
            // Reference arc: origin-pivot flow from the stance offset.
            let start = SagittalState::new(-u.foot_offset, state.v_loc);
            let (orbital, arc_end) = if let Some(parts) = collect.as_deref_mut() {
                let mut arc = Vec::with_capacity(self.knots + 1);
                for i in 0..=self.knots {
                    let t = i as f64 * dt;
                    arc.push(lipm_flow(&start, 0.0, t, p));
                }
                let tube = tube_profile(
                    self.ccm,
                    e0,
                    self.w_bar,
                    p.step_duration,
                    dt,
                    cfg.tube_variant,
                );
                let orbital = orbital_energy_residual(&arc, &tube, p.omega);
                let arc_end = *arc.last().expect("arc has at least one knot");
                parts.references.push(arc);
                parts.tubes.push(tube);
                (orbital, arc_end)
            } else {
                let mut orbital = f64::INFINITY;
                let mut sx = start.x;
                let mut sv = start.v;
                let mut amp_decay = 1.0;
                let e0_sqrt = e0.max(0.0).sqrt();
                for i in 0..=self.knots {
                    if i > 0 {
                        let nx = sx * cd + sv * sd / w;
                        let nv = sx * w * sd + sv * cd;
                        sx = nx;
                        sv = nv;
                        amp_decay *= decay_step;
                    }
                    let amp = e0_sqrt * amp_decay + self.d_bar * (1.0 - amp_decay);
                    let radius = amp / sqrt_eig_min;
                    orbital = orbital.min(orbital_disk_min(sx, sv, radius, w));
                }
                (orbital, SagittalState::new(sx, sv))
            };
            orbital_residuals.push(orbital);
            violation += neg_part(orbital - cfg.orbital_margin);

            // Global five-state shot. The slope of the current stance feeds
            // both the height update and the traversal cost.
            slope_cost += slope.norm_squared();
            let next = global_step(&state, &u, &slope, p);
            let (z_next, slope_next) = self.gp.mean_with_gradient(&next.planar());
            let foot =
                cfg.max_height_step - (z_next - z_prev).abs() - cfg.lipschitz * self.threshold;
            footstep_residuals.push(foot);
            violation += neg_part(foot);
            z_prev = z_next;
            slope = slope_next;

            // State 1's speed is pinned by the measured stance (first offset
            // and current speed), so it is not a constraint on decisions.
            box_violation += box_violation_of(&next, cfg, q == 0);
            // The recovered stance offsets must respect the control box
            // (the pinned first offset is a measurement, not a choice).
            if q > 0 {
                box_violation += neg_part(u.foot_offset - cfg.control_lower[0]);
                box_violation += neg_part(cfg.control_upper[0] - u.foot_offset);
            }
            states.push(next);

            // Tube handoff to the next step via the saltation sensitivity.
            if q + 1 < h {
                let end_amp = e0.max(0.0).sqrt() * (-self.ccm.lambda * p.step_duration).exp()
                    + self.d_bar * (1.0 - (-self.ccm.lambda * p.step_duration).exp());
                let end_radius = end_amp / sqrt_eig_min;
                let u_reset =
                    arc_end.x + arc_end.v * p.switch_duration + controls[q + 1].foot_offset;
                match saltation_matrix(&arc_end, u_reset, p) {
                    Ok(xi) => {
                        e0 = propagate_tube_across_reset(end_radius, &xi, &self.ccm.metric);
                    }
                    Err(_) => {
                        // Standing swap: with no approach velocity the switch
                        // is clocked, and deviations cross through the reset
                        // Jacobian alone.
                        let jac = nalgebra::Matrix2::new(1.0, p.switch_duration, 0.0, 1.0);
                        e0 = propagate_tube_across_reset(end_radius, &jac, &self.ccm.metric);
                    }
                }
            }
        }

        violation += box_violation;
        // Terminal goal terms plus the accumulated slope penalty; matches
        // `mpc_cost` on the same rollout.
        let goal = Vector2::new(cfg.goal[0], cfg.goal[1]);
        let last = states.last().expect("rollout has states");
        let goal_heading = cfg
            .goal_heading
            .unwrap_or_else(|| bearing_or(states[0].planar(), goal, states[0].heading));
        let dp = last.planar() - goal;
        let dth = wrap_angle(last.heading - goal_heading);
        let cost = cfg.goal_weight * dp.norm_squared()
            + cfg.heading_weight * dth * dth
            + cfg.slope_weight * slope_cost;
        if let Some(parts) = collect.as_deref_mut() {
            parts.states = states;
        }
        RolloutEval {
            cost,
            violation,
            footstep_residuals,
            orbital_residuals,
            box_violation,
        }
    }
}

fn neg_part(v: f64) -> f64 {
    (-v).max(0.0)
}

fn box_violation_of(s: &GlobalState, cfg: &MpcConfig, skip_speed: bool) -> f64 {
    let vals = [s.position.x, s.position.y, s.position.z, s.v_loc, s.heading];
    let mut acc = 0.0;
    for i in 0..5 {
        if skip_speed && i == 3 {
            continue;
        }
        acc += neg_part(vals[i] - cfg.state_lower[i]);
        acc += neg_part(cfg.state_upper[i] - vals[i]);
    }
    acc
}

#[derive(Default)]
struct PlanParts {
    states: Vec<GlobalState>,
    references: Vec<Vec<SagittalState>>,
    tubes: Vec<TubeProfile>,
}

/// Bounded coordinate pattern search minimizing `f`; deterministic.
fn bounded_pattern_search(
    f: &dyn Fn(&[f64]) -> f64,
    mut x: Vec<f64>,
    lb: &[f64],
    ub: &[f64],
    mut steps: Vec<f64>,
    max_sweeps: usize,
    tol: f64,
) -> (Vec<f64>, f64) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
    let mut fx = f(&x);
    for _ in 0..max_sweeps {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let old = x[i];
                let cand = (old + dir * steps[i]).clamp(lb[i], ub[i]);
                if cand == old {
                    continue;
                }
                x[i] = cand;
                let fc = f(&x);
                if fc < fx {
                    fx = fc;
                    improved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !improved {
            if steps.iter().all(|s| *s < tol) {
                break;
            }
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (x, fx)
}

/// Plan from the current state. `x_loc0` is the measured sagittal offset of
/// the CoM in the stance frame (it pins the first stance control);
/// `z_true_at_stance` is the measured stance height. Returns the best
/// feasible plan, or `Infeasible` carrying the best effort with its
/// residual report.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    x_init: &GlobalState,
    x_loc0: f64,
    z_true_at_stance: f64,
    gp: &GpModel,
    thr: &CalibratedThreshold,
    ccm: &CcmData,
    w_bar: f64,
    cfg: &MpcConfig,
) -> Result<Plan, PlannerError> {
    plan_with_warm_start(x_init, x_loc0, z_true_at_stance, gp, thr, ccm, w_bar, cfg, None)
}

/// Like [`plan`], seeding the first restart from a previous solution's
/// controls shifted by one step.
#[allow(clippy::too_many_arguments)]
pub fn plan_with_warm_start(
    x_init: &GlobalState,
    x_loc0: f64,
    z_true_at_stance: f64,
    gp: &GpModel,
    thr: &CalibratedThreshold,
    ccm: &CcmData,
    w_bar: f64,
    cfg: &MpcConfig,
    warm: Option<&Plan>,
) -> Result<Plan, PlannerError> {
    cfg.validate()?;
    if thr.is_unbounded() {
        return Err(PlannerError::UncertifiableThreshold);
    }
    let vals = [
        x_init.position.x,
        x_init.position.y,
        x_init.position.z,
        x_init.v_loc,
        x_init.heading,
    ];
    // The start state is a measurement; allow physical slack against the
    // planning box before refusing outright.
    for i in 0..5 {
        if vals[i] < cfg.state_lower[i] - 1e-3 || vals[i] > cfg.state_upper[i] + 1e-3 {
            return Err(PlannerError::StartOutsideBox(format!(
                "component {i} = {} outside [{}, {}]",
                vals[i], cfg.state_lower[i], cfg.state_upper[i]
            )));
        }
    }

    let ctx = RolloutContext::new(gp, thr, ccm, w_bar, cfg, x_init, z_true_at_stance);
    let h = cfg.horizon;
    let dim = decision_dim(h);

    // Heuristic initial guess: hold the current speed across the horizon,
    // turning towards the goal over the first few steps.
    let p = &cfg.robot;
    let v0 = x_init.v_loc;
    let goal = Vector2::new(cfg.goal[0], cfg.goal[1]);
    let bearing = bearing_or(x_init.planar(), goal, x_init.heading);
    let turn = wrap_angle(bearing - x_init.heading);
    let turn_steps = 3.min(h);
    let mut base = vec![0.0; dim];
    for q in 1..h {
        base[q - 1] = v0;
    }
    for q in 0..h {
        base[(h - 1) + q] = if q < turn_steps {
            (turn / turn_steps as f64).clamp(cfg.control_lower[1], cfg.control_upper[1])
        } else {
            0.0
        };
    }
    // Warm seed: the previous solution shifted left by one step. The fresh
    // heuristic is always kept as its own restart so a curved local optimum
    // cannot lock in across replans.
    let mut warm_base = base.clone();
    if let Some(prev) = warm {
        if prev.horizon() == h {
            for q in 1..h {
                let src = (q + 2).min(h);
                warm_base[q - 1] = prev.states[src].v_loc;
            }
            for q in 0..h {
                let src = (q + 1).min(h - 1);
                warm_base[(h - 1) + q] = prev.controls[src].heading_change;
            }
        }
    }

    let mut lb = vec![0.0; dim];
    let mut ub = vec![0.0; dim];
    let mut steps0 = vec![0.0; dim];
    for q in 1..h {
        // Sit a hair inside the speed box so executed trajectories with
        // small tracking error stay legal for the next replan.
        lb[q - 1] = cfg.state_lower[3] + 1e-3;
        ub[q - 1] = cfg.state_upper[3] - 1e-3;
        steps0[q - 1] = 0.08;
    }
    for q in 0..h {
        lb[(h - 1) + q] = cfg.control_lower[1];
        ub[(h - 1) + q] = cfg.control_upper[1];
        steps0[(h - 1) + q] = 0.15;
    }
    for v in base.iter_mut().zip(lb.iter().zip(ub.iter())) {
        *v.0 = v.0.clamp(*v.1 .0, *v.1 .1);
    }

    struct Candidate {
        theta: Vec<f64>,
        eval: RolloutEval,
        penalty_level: f64,
        restart: usize,
    }

    let run_restart = |restart: usize| -> Candidate {
        let mut theta = match restart {
            0 => warm_base.clone(),
            1 => base.clone(),
            r if r % 2 == 0 => warm_base.clone(),
            _ => base.clone(),
        };
        if restart > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed ^ 0x9E37_79B9_7F4A_7C15);
            rng.set_stream(restart as u64);
            for (i, v) in theta.iter_mut().enumerate() {
                let sigma = if i < h - 1 { 0.15 } else { 0.2 };
                let jitter: f64 = rng.gen_range(-1.0..1.0) * sigma;
                *v = (*v + jitter).clamp(lb[i], ub[i]);
            }
        }
        let mut penalty = cfg.solver.penalty_initial;
        let mut last_violation = f64::INFINITY;
        loop {
            let objective = |t: &[f64]| -> f64 {
                let controls = controls_from_vector(t, h, x_loc0, v0, p);
                let e = ctx.evaluate(&controls, None);
                e.cost + penalty * e.violation
            };
            let (sol, _) = bounded_pattern_search(
                &objective,
                theta.clone(),
                &lb,
                &ub,
                steps0.clone(),
                cfg.solver.max_sweeps,
                cfg.solver.tolerance,
            );
            let controls = controls_from_vector(&sol, h, x_loc0, v0, p);
            let eval = ctx.evaluate(&controls, None);
            let feasible = eval.feasible(cfg);
            theta = sol;
            // Stop on success, on the penalty cap, or once escalation past
            // 1e4 stops buying constraint improvement.
            let stalled = penalty >= 1e4 && eval.violation >= last_violation - 1e-15;
            if feasible || penalty >= cfg.solver.penalty_max || stalled {
                return Candidate {
                    theta,
                    eval,
                    penalty_level: penalty,
                    restart,
                };
            }
            last_violation = eval.violation;
            penalty *= cfg.solver.penalty_growth;
        }
    };

    let candidates: Vec<Candidate> = (0..cfg.solver.restarts.max(1))
        .into_par_iter()
        .map(run_restart)
        .collect();

    // Deterministic selection: feasibility first, then cost (violation sum
    // as the tie-break for infeasible plans), then restart index.
    let mut best: Option<&Candidate> = None;
    for cand in &candidates {
        let better = match best {
            None => true,
            Some(cur) => {
                let (cf, bf) = (cand.eval.feasible(cfg), cur.eval.feasible(cfg));
                if cf != bf {
                    cf
                } else if cf {
                    cand.eval.cost < cur.eval.cost
                } else {
                    (cand.eval.violation, cand.eval.cost) < (cur.eval.violation, cur.eval.cost)
                }
            }
        };
        if better {
            best = Some(cand);
        }
    }
    let chosen = best.expect("at least one restart ran");

    // Materialize the winning rollout.
    let controls = controls_from_vector(&chosen.theta, h, x_loc0, v0, p);
    let mut parts = PlanParts::default();
    let eval = ctx.evaluate(&controls, Some(&mut parts));
    let feasible = eval.feasible(cfg);
    let plan = Plan {
        states: parts.states,
        controls,
        references: parts.references,
        tubes: parts.tubes,
        report: FeasibilityReport {
            feasible,
            footstep_residuals: eval.footstep_residuals,
            orbital_residuals: eval.orbital_residuals,
            state_box_violation: eval.box_violation,
            penalty_level: chosen.penalty_level,
            restart_index: chosen.restart,
        },
        cost: eval.cost,
    };
    if feasible {
        Ok(plan)
    } else {
        Err(PlannerError::Infeasible(Box::new(plan)))
    }
}
