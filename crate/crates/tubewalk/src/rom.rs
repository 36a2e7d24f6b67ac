//! Reduced-order sagittal walking model.
//!
//! Continuous stance-phase dynamics are a linear inverted pendulum about a
//! pivot: `xdd = w2 (x - u)` with `w2 = g / z_apex`. A flywheel torque
//! channel and an additive disturbance extend this to
//! `xdd = w2 x - (w2/(m g)) tau + w`. Walking steps are stitched by a reset
//! map that shifts the stance frame and preserves velocity; the saltation
//! matrix is the first-order sensitivity of that hybrid transition.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("invalid robot parameters: {0}")]
    InvalidParams(String),
    #[error("state diverged (non-finite) at t = {t}")]
    Diverged { t: f64 },
    #[error("near-tangential guard crossing: |v| = {speed:e} below 1e-9")]
    TangentialCrossing { speed: f64 },
    #[error("integration step invalid: {0}")]
    InvalidStep(String),
    #[error("uncertainty {c} reaches the apex height {z_apex}; slope interval is unbounded")]
    InfeasibleBound { c: f64, z_apex: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Physical constants of the reduced-order walker. `omega` is derived from
/// gravity and apex height at construction and kept consistent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobotParams {
    pub mass: f64,
    pub gravity: f64,
    pub apex_height: f64,
    pub omega: f64,
    pub step_duration: f64,
    pub switch_duration: f64,
}

impl RobotParams {
    pub fn new(
        mass: f64,
        gravity: f64,
        apex_height: f64,
        step_duration: f64,
        switch_duration: f64,
    ) -> Result<Self, RomError> {
        let p = Self {
            mass,
            gravity,
            apex_height,
            omega: (gravity / apex_height).sqrt(),
            step_duration,
            switch_duration,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RomError> {
        for (name, v) in [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("apex_height", self.apex_height),
            ("step_duration", self.step_duration),
        ] {
            if !(v > 0.0) {
                return Err(RomError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.switch_duration < 0.0 {
            return Err(RomError::InvalidParams(format!(
                "switch_duration must be nonnegative, got {}",
                self.switch_duration
            )));
        }
        let derived = (self.gravity / self.apex_height).sqrt();
        if (self.omega - derived).abs() > 1e-12 * derived.max(1.0) {
            return Err(RomError::InvalidParams(format!(
                "omega {} inconsistent with sqrt(g/z) = {}",
                self.omega, derived
            )));
        }
        Ok(())
    }

    /// Torque gain into sagittal acceleration, `w2 / (m g)`.
    pub fn torque_gain(&self) -> f64 {
        self.omega * self.omega / (self.mass * self.gravity)
    }
}

impl Default for RobotParams {
    /// A Digit-class walker: 45 kg, apex 0.981 m (so `omega^2 = 10`),
    /// 0.4 s steps with a 0.05 s double-support switch.
    fn default() -> Self {
        Self::new(45.0, 9.81, 0.981, 0.4, 0.05).expect("default params are valid")
    }
}

/// Sagittal CoM state in the current stance-foot frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SagittalState {
    pub x: f64,
    pub v: f64,
}

impl SagittalState {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.v)
    }

    pub fn error_to(&self, other: &SagittalState) -> Vector2<f64> {
        Vector2::new(self.x - other.x, self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite()
    }
}

/// Global walker state: CoM position, local sagittal speed, heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub position: Vector3<f64>,
    pub v_loc: f64,
    pub heading: f64,
}

impl GlobalState {
    pub fn new(x: f64, y: f64, z: f64, v_loc: f64, heading: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            v_loc,
            heading: wrap_angle(heading),
        }
    }

    pub fn planar(&self) -> Vector2<f64> {
        Vector2::new(self.position.x, self.position.y)
    }
}

/// Per-step control: sagittal stance-foot offset and heading change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub foot_offset: f64,
    pub heading_change: f64,
}

/// Terrain-induced disturbance budget for the torque channel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisturbanceBound {
    /// Interval of the squared-frequency perturbation, 1/s^2.
    pub c_delta: [f64; 2],
    /// Worst-case additive sagittal acceleration, m/s^2.
    pub w_bar: f64,
    pub x_box: [f64; 2],
    pub tau_box: [f64; 2],
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Closed-form stance-phase flow of `xdd = w2 (x - foot_offset)` from `s0`
/// over time `t`.
pub fn lipm_flow(s0: &SagittalState, foot_offset: f64, t: f64, p: &RobotParams) -> SagittalState {
    let w = p.omega;
    let (sh, ch) = ((w * t).sinh(), (w * t).cosh());
    let rel = s0.x - foot_offset;
    SagittalState {
        x: foot_offset + rel * ch + s0.v * sh / w,
        v: w * rel * sh + s0.v * ch,
    }
}

/// One discrete step of the sagittal map: the flow evaluated at the step
/// duration.
pub fn discrete_step(s: &SagittalState, foot_offset: f64, p: &RobotParams) -> SagittalState {
    lipm_flow(s, foot_offset, p.step_duration, p)
}

/// One step of the global five-state map. The planar displacement is the
/// discrete sagittal increment rotated by the current heading; the height
/// follows the estimated terrain slope along that displacement.
pub fn global_step(
    s: &GlobalState,
    u: &ControlInput,
    slope: &Vector2<f64>,
    p: &RobotParams,
) -> GlobalState {
    let w = p.omega;
    let (sh, ch) = ((w * p.step_duration).sinh(), (w * p.step_duration).cosh());
    let dx_loc = sh / w * s.v_loc + (1.0 - ch) * u.foot_offset;
    let dir = Vector2::new(s.heading.cos(), s.heading.sin());
    let dz = slope.dot(&dir) * dx_loc;
    GlobalState {
        position: Vector3::new(
            s.position.x + dx_loc * dir.x,
            s.position.y + dx_loc * dir.y,
            s.position.z + dz,
        ),
        v_loc: ch * s.v_loc - w * sh * u.foot_offset,
        heading: wrap_angle(s.heading + u.heading_change),
    }
}

/// Time derivative of the torque-augmented sagittal dynamics,
/// `(dx, dv) = (v, w2 x - (w2/(m g)) tau + w)`.
pub fn auglipm_deriv(s: &SagittalState, torque: f64, w: f64, p: &RobotParams) -> (f64, f64) {
    (
        s.v,
        p.omega * p.omega * s.x - p.torque_gain() * torque + w,
    )
}

/// One recorded integration knot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: SagittalState,
    pub torque: f64,
    pub disturbance: f64,
}

/// Fixed-step RK4 integration of the torque-augmented dynamics with
/// state-feedback torque and disturbance closures. Returns samples at every
/// knot including both endpoints; fails fast on non-finite states.
pub fn integrate_auglipm<F, G>(
    s0: &SagittalState,
    torque_fn: F,
    w_fn: G,
    duration: f64,
    dt: f64,
    p: &RobotParams,
) -> Result<Vec<TrajectorySample>, RomError>
where
    F: Fn(f64, &SagittalState) -> f64,
    G: Fn(f64, &SagittalState) -> f64,
{
    if !(dt > 0.0) || dt > duration + 1e-15 {
        return Err(RomError::InvalidStep(format!(
            "dt = {dt} must satisfy 0 < dt <= duration = {duration}"
        )));
    }
    if dt > 1e-2 + 1e-15 {
        return Err(RomError::InvalidStep(format!("dt = {dt} exceeds 1e-2 s")));
    }
    let n = (duration / dt).round().max(1.0) as usize;
    let h = duration / n as f64;

    let deriv = |t: f64, s: &SagittalState| -> (f64, f64) {
        auglipm_deriv(s, torque_fn(t, s), w_fn(t, s), p)
    };

    let mut out = Vec::with_capacity(n + 1);
    let mut s = *s0;
    let mut t = 0.0;
    out.push(TrajectorySample {
        t,
        state: s,
        torque: torque_fn(t, &s),
        disturbance: w_fn(t, &s),
    });
    for i in 0..n {
        let (k1x, k1v) = deriv(t, &s);
        let s2 = SagittalState::new(s.x + 0.5 * h * k1x, s.v + 0.5 * h * k1v);
        let (k2x, k2v) = deriv(t + 0.5 * h, &s2);
        let s3 = SagittalState::new(s.x + 0.5 * h * k2x, s.v + 0.5 * h * k2v);
        let (k3x, k3v) = deriv(t + 0.5 * h, &s3);
        let s4 = SagittalState::new(s.x + h * k3x, s.v + h * k3v);
        let (k4x, k4v) = deriv(t + h, &s4);
        s = SagittalState::new(
            s.x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
            s.v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        );
        t = (i + 1) as f64 * h;
        if !s.is_finite() {
            return Err(RomError::Diverged { t });
        }
        out.push(TrajectorySample {
            t,
            state: s,
            torque: torque_fn(t, &s),
            disturbance: w_fn(t, &s),
        });
    }
    Ok(out)
}

/// Hybrid reset at foot switch: the frame shifts by the new stance offset
/// after the double-support drift, velocity carries over unchanged.
pub fn reset_map(s_minus: &SagittalState, foot_offset: f64, p: &RobotParams) -> SagittalState {
    SagittalState {
        x: s_minus.x + s_minus.v * p.switch_duration - foot_offset,
        v: s_minus.v,
    }
}

/// First-order sensitivity of the hybrid transition at `s_minus`.
///
/// The guard is a position threshold (the predicted end-of-step position),
/// so its gradient is `(1, 0)`; the reset Jacobian carries the switch drift.
/// With the pre/post vector fields `F = (v, w2 x)` this evaluates
/// `J + (F_post - J F_pre) g' / (g' F_pre)`.
pub fn saltation_matrix(
    s_minus: &SagittalState,
    foot_offset: f64,
    p: &RobotParams,
) -> Result<Matrix2<f64>, RomError> {
    let w2 = p.omega * p.omega;
    let denom = s_minus.v; // guard gradient dotted with the pre vector field
    if denom.abs() < 1e-9 {
        return Err(RomError::TangentialCrossing { speed: denom.abs() });
    }
    let jac_reset = Matrix2::new(1.0, p.switch_duration, 0.0, 1.0);
    let s_plus = reset_map(s_minus, foot_offset, p);
    let f_pre = Vector2::new(s_minus.v, w2 * s_minus.x);
    let f_post = Vector2::new(s_plus.v, w2 * s_plus.x);
    let gap = f_post - jac_reset * f_pre;
    Ok(jac_reset + gap * Vector2::new(1.0, 0.0).transpose() / denom)
}

/// Worst-case disturbance budget induced by a calibrated height uncertainty
/// `c`: the squared-frequency interval and the bilinear corner maximum of
/// `|c_delta| * |x - tau/(m g)|` over the state and torque boxes.
pub fn terrain_disturbance_bound(
    c: f64,
    p: &RobotParams,
    x_box: [f64; 2],
    tau_box: [f64; 2],
) -> Result<DisturbanceBound, RomError> {
    if !c.is_finite() || c < 0.0 {
        return Err(RomError::InvalidBox(format!(
            "height uncertainty must be finite and nonnegative, got {c}"
        )));
    }
    if c >= p.apex_height {
        return Err(RomError::InfeasibleBound {
            c,
            z_apex: p.apex_height,
        });
    }
    for (name, b) in [("x_box", x_box), ("tau_box", tau_box)] {
        if !(b[0] <= b[1]) || !b.iter().all(|v| v.is_finite()) {
            return Err(RomError::InvalidBox(format!("{name} must be finite [lo, hi], got {b:?}")));
        }
    }
    let g = p.gravity;
    let zh = p.apex_height;
    let lo = -g * c / (zh * (zh + c));
    let hi = g * c / (zh * (zh - c));
    let c_abs = lo.abs().max(hi.abs());
    let mg = p.mass * g;
    let mut w_bar = 0.0f64;
    for &x in &x_box {
        for &tau in &tau_box {
            w_bar = w_bar.max(c_abs * (x - tau / mg).abs());
        }
    }
    Ok(DisturbanceBound {
        c_delta: [lo, hi],
        w_bar,
        x_box,
        tau_box,
    })
}

/// Orbital energy of a sagittal state about the stance foot,
/// `(v^2 - w2 x^2) / 2`. Positive energy means the CoM carries enough
/// momentum to cross over the foot; zero marks the asymptote lines
/// `v = +/- omega x`.
pub fn orbital_energy(x: f64, v: f64, omega: f64) -> f64 {
    0.5 * (v * v - omega * omega * x * x)
}

/// Dump a trajectory as `t,x,v,tau,w` CSV rows.
pub fn write_trajectory_csv(
    samples: &[TrajectorySample],
    mut w: impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(w, "t,x_loc,v_loc,tau,w")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.t, s.state.x, s.state.v, s.torque, s.disturbance
        )?;
    }
    Ok(())
}
