//! Mount attitude math and the open-loop servo model.

use serde::{Deserialize, Serialize};

use crate::geodesy::{normalize_deg, LosAngles};

pub const PITCH_MIN_DEG: f64 = -30.0;
pub const PITCH_MAX_DEG: f64 = 90.0;

/// Signed rotation in (-180, 180] taking `current` onto `target`.
/// An exact half-turn resolves to +180.
pub fn shortest_rotation(current_deg: f64, target_deg: f64) -> f64 {
    let d = normalize_deg(target_deg - current_deg);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoConfig {
    pub quant_step_deg: f64,
    pub slew_dps: f64,
    pub actuation_latency_ms: f64,
    /// Slip-ring yaw axis: unlimited rotation in both directions.
    pub yaw_continuous: bool,
    pub pitch_range_deg: [f64; 2],
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            quant_step_deg: 0.9,
            slew_dps: 360.0,
            actuation_latency_ms: 20.0,
            yaw_continuous: true,
            pitch_range_deg: [PITCH_MIN_DEG, PITCH_MAX_DEG],
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.quant_step_deg > 0.0) {
            return Err("quant_step_deg must be positive".into());
        }
        if !(self.slew_dps > 0.0) {
            return Err("slew_dps must be positive".into());
        }
        if !(self.actuation_latency_ms >= 0.0) {
            return Err("actuation_latency_ms must be non-negative".into());
        }
        if !(self.pitch_range_deg[0] < self.pitch_range_deg[1]) {
            return Err("pitch range is empty".into());
        }
        Ok(())
    }

    pub fn latency_ns(&self) -> i64 {
        (self.actuation_latency_ms * 1e6).round() as i64
    }
}

/// Rounds to the nearest multiple of `step`, ties away from zero.
pub fn quantize(deg: f64, step: f64) -> f64 {
    let k = (deg / step).round();
    // snap away representation noise so 37 * 0.9 reads back as 33.3
    let q = k * step;
    (q * 1e9).round() / 1e9
}

/// Linear move of both axes between two instants. Yaw angles are unwrapped
/// so `end_yaw_deg - start_yaw_deg` is the travelled rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPlan {
    pub start_t_ns: i64,
    pub end_t_ns: i64,
    pub start_yaw_deg: f64,
    pub end_yaw_deg: f64,
    pub start_pitch_deg: f64,
    pub end_pitch_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointingState {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub target_yaw_deg: f64,
    pub target_pitch_deg: f64,
    pub motion: Option<MotionPlan>,
}

impl Default for PointingState {
    fn default() -> Self {
        Self::at_rest(0.0, 0.0)
    }
}

impl PointingState {
    pub fn at_rest(yaw_deg: f64, pitch_deg: f64) -> Self {
        Self {
            yaw_deg: normalize_deg(yaw_deg),
            pitch_deg,
            target_yaw_deg: normalize_deg(yaw_deg),
            target_pitch_deg: pitch_deg,
            motion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoCommand {
    pub state: PointingState,
    /// The requested pitch was outside the mechanical range and got clamped.
    pub pitch_clamped: bool,
}

/// Issues a move toward `target`. The motion starts after the actuation
/// latency and runs at the slew rate of the axis with the larger excursion.
pub fn command_servo(state: &PointingState, target: &LosAngles, cfg: &ServoConfig, now_ns: i64) -> ServoCommand {
    let [lo, hi] = cfg.pitch_range_deg;
    let clamped_pitch = target.pitch_deg.clamp(lo, hi);
    let pitch_clamped = clamped_pitch != target.pitch_deg;
    let step = cfg.quant_step_deg;
    let q_yaw = normalize_deg(quantize(normalize_deg(target.yaw_deg), step));
    let mut q_pitch = quantize(clamped_pitch, step);
    if q_pitch > hi {
        q_pitch -= step;
    } else if q_pitch < lo {
        q_pitch += step;
    }

    let start_t_ns = now_ns + cfg.latency_ns();
    let (start_yaw, start_pitch) = attitude_at(state, start_t_ns);
    let d_yaw = if cfg.yaw_continuous { shortest_rotation(start_yaw, q_yaw) } else { q_yaw - start_yaw };
    let d_pitch = q_pitch - start_pitch;
    let travel = d_yaw.abs().max(d_pitch.abs());
    let end_t_ns = start_t_ns + (travel / cfg.slew_dps * 1e9).round() as i64;

    ServoCommand {
        state: PointingState {
            yaw_deg: start_yaw,
            pitch_deg: start_pitch,
            target_yaw_deg: q_yaw,
            target_pitch_deg: q_pitch,
            motion: Some(MotionPlan {
                start_t_ns,
                end_t_ns,
                start_yaw_deg: start_yaw,
                end_yaw_deg: start_yaw + d_yaw,
                start_pitch_deg: start_pitch,
                end_pitch_deg: q_pitch,
            }),
        },
        pitch_clamped,
    }
}

/// Mount angles `(yaw in [0,360), pitch)` at time `t_ns`.
pub fn attitude_at(state: &PointingState, t_ns: i64) -> (f64, f64) {
    let Some(m) = state.motion else {
        return (normalize_deg(state.yaw_deg), state.pitch_deg);
    };
    if t_ns <= m.start_t_ns {
        return (normalize_deg(m.start_yaw_deg), m.start_pitch_deg);
    }
    if t_ns >= m.end_t_ns {
        return (normalize_deg(m.end_yaw_deg), m.end_pitch_deg);
    }
    let f = (t_ns - m.start_t_ns) as f64 / (m.end_t_ns - m.start_t_ns) as f64;
    (normalize_deg(m.start_yaw_deg + f * (m.end_yaw_deg - m.start_yaw_deg)), m.start_pitch_deg + f * (m.end_pitch_deg - m.start_pitch_deg))
}

/// Great-circle angle between two boresight directions.
pub fn pointing_error_deg(mount: (f64, f64), los: &LosAngles) -> f64 {
    let (y1, p1) = (mount.0.to_radians(), mount.1.to_radians());
    let (y2, p2) = (los.yaw_deg.to_radians(), los.pitch_deg.to_radians());
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * (y1 - y2).cos();
    // acos loses precision near 1; the haversine form keeps small angles exact
    if c > 0.999 {
        let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((y2 - y1) / 2.0).sin().powi(2);
        (2.0 * h.sqrt().min(1.0).asin()).to_degrees()
    } else {
        c.clamp(-1.0, 1.0).acos().to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AntennaPattern {
    pub boresight_gain_dbi: f64,
    pub hpbw_deg: f64,
    pub floor_dbi: f64,
}

impl Default for AntennaPattern {
    fn default() -> Self {
        Self { boresight_gain_dbi: 22.0, hpbw_deg: 15.0, floor_dbi: -10.0 }
    }
}

/// Gaussian main lobe, -3 dB at half the beamwidth, floored at the back-lobe level.
pub fn gain_dbi(pattern: &AntennaPattern, offaxis_deg: f64) -> f64 {
    let x = offaxis_deg.abs() / pattern.hpbw_deg;
    (pattern.boresight_gain_dbi - 12.0 * x * x).max(pattern.floor_dbi)
}
