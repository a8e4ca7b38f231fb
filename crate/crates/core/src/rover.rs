//! Skid-steer rover kinematics.
//!
//! The body is a planar unicycle driven by a left and a right wheel pair.
//! Gravity and friction enter only through the traction limit: no wheel can
//! change speed faster than `a_max = μ·g`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::terrain::Heightfield;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoverGeometry {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Wheel-center spacing between the left and right sides.
    pub track_width: f64,
    pub goal_radius: f64,
}

impl Default for RoverGeometry {
    fn default() -> Self {
        Self {
            length: 1.89,
            width: 1.12,
            height: 0.77,
            track_width: 0.95,
            goal_radius: 0.5,
        }
    }
}

impl RoverGeometry {
    /// Radius of the circular collision footprint.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * self.width
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
            ("track_width", self.track_width),
            ("goal_radius", self.goal_radius),
        ];
        for (name, v) in dims {
            if !(v > 0.0) {
                return Err(format!("rover.{name} must be > 0, got {v}"));
            }
        }
        if self.track_width >= self.width {
            return Err(format!(
                "rover.track_width {} must be smaller than width {}",
                self.track_width, self.width
            ));
        }
        Ok(())
    }
}

/// Control-rate and command limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoverLimits {
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RoverLimits {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 1.5,
            omega_max: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyCommand {
    pub v: f64,
    pub omega: f64,
}

impl BodyCommand {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn clamped(self, limits: &RoverLimits) -> Self {
        Self {
            v: self.v.clamp(-limits.v_max, limits.v_max),
            omega: self.omega.clamp(-limits.omega_max, limits.omega_max),
        }
    }

    /// Maps a normalized policy action in `[-1, 1]²` onto the command limits.
    /// Components outside the box are clamped first.
    pub fn from_normalized(action: [f64; 2], limits: &RoverLimits) -> Self {
        Self {
            v: action[0].clamp(-1.0, 1.0) * limits.v_max,
            omega: action[1].clamp(-1.0, 1.0) * limits.omega_max,
        }
    }
}

/// Surface parameters that bound wheel acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Traction {
    pub gravity: f64,
    pub friction: f64,
}

impl Traction {
    pub fn max_accel(&self) -> f64 {
        self.friction * self.gravity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoverState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Heading from the x-axis, in `(-π, π]`.
    pub heading: f64,
    /// Front-left, front-right, rear-left, rear-right.
    pub wheel_speeds: [f64; 4],
    pub out_of_bounds: bool,
}

impl RoverState {
    /// A stationary rover at `(x, y)` resting on the terrain.
    pub fn at_rest(x: f64, y: f64, heading: f64, hf: &Heightfield) -> Self {
        let (z, out_of_bounds) = match hf.height_at(x, y) {
            Ok(z) => (z, false),
            Err(_) => (0.0, true),
        };
        Self {
            x,
            y,
            z,
            heading: wrap_angle(heading),
            wheel_speeds: [0.0; 4],
            out_of_bounds,
        }
    }

    pub fn left_speed(&self) -> f64 {
        self.wheel_speeds[0]
    }

    pub fn right_speed(&self) -> f64 {
        self.wheel_speeds[1]
    }

    /// Body twist `(v, ω)` implied by the current wheel speeds.
    pub fn body_twist(&self, track_width: f64) -> (f64, f64) {
        body_twist_from_wheels(self.left_speed(), self.right_speed(), track_width)
    }
}

/// `v = (vr + vl) / 2`, `ω = (vr − vl) / L`.
pub fn body_twist_from_wheels(vl: f64, vr: f64, track_width: f64) -> (f64, f64) {
    ((vr + vl) / 2.0, (vr - vl) / track_width)
}

/// Inverse of [`body_twist_from_wheels`]: `(vl, vr)`.
pub fn wheels_from_body_twist(cmd: BodyCommand, track_width: f64) -> (f64, f64) {
    let half = cmd.omega * track_width / 2.0;
    (cmd.v - half, cmd.v + half)
}

fn approach(current: f64, target: f64, max_delta: f64) -> f64 {
    current + (target - current).clamp(-max_delta, max_delta)
}

/// Advances the rover by one control step of length `dt`.
///
/// Wheel speeds move toward the commanded targets by at most `μ·g·dt`; the
/// pose is then integrated with the twist of the new wheel speeds. Leaving
/// the terrain extent sets `out_of_bounds` and leaves `z` at its last value.
pub fn step_pose(
    state: &RoverState,
    cmd: BodyCommand,
    traction: Traction,
    geometry: &RoverGeometry,
    hf: &Heightfield,
    dt: f64,
) -> RoverState {
    let (target_l, target_r) = wheels_from_body_twist(cmd, geometry.track_width);
    let max_delta = traction.max_accel() * dt;
    let left = approach(state.left_speed(), target_l, max_delta);
    let right = approach(state.right_speed(), target_r, max_delta);
    let (v, omega) = body_twist_from_wheels(left, right, geometry.track_width);

    let x = state.x + v * state.heading.cos() * dt;
    let y = state.y + v * state.heading.sin() * dt;
    let heading = wrap_angle(state.heading + omega * dt);
    let (z, out_of_bounds) = match hf.height_at(x, y) {
        Ok(z) => (z, state.out_of_bounds),
        Err(_) => (state.z, true),
    };
    RoverState {
        x,
        y,
        z,
        heading,
        wheel_speeds: [left, right, left, right],
        out_of_bounds,
    }
}
