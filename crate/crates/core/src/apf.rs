//! Artificial-potential-field reference generator.
//!
//! The field is the sum of an obstacle Gaussian, a lane-marking Gaussian, an
//! inverse-square road-edge term and a linear velocity term. The negative
//! gradient gives a heading, and integrating the planar kinematics along that
//! heading produces the (yaw, lateral position) reference the MPC tracks.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// obstacle peak potential
    pub a_o: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// lane-marking peak potential
    pub a_l: f64,
    /// lateral position of the lane marking, m
    pub y_c: f64,
    pub sigma_l: f64,
    /// road-edge scale
    pub a_r: f64,
    /// signed lateral positions of the two road edges, m
    pub y_lr: f64,
    pub y_rr: f64,
    /// slope of the velocity field
    pub gamma_v: f64,
    /// desired speed, m/s; above the current speed so the field pulls forward
    pub v_d: f64,
    pub x_obs: f64,
    pub y_obs: f64,
}

impl FieldParams {
    /// Single obstacle `obstacle_ahead` metres in front of `x0`, just left of
    /// the start lane centre, on a road whose edges sit at +-5.4 m.
    pub fn standard(x0: f64, vx: f64, obstacle_ahead: f64) -> Self {
        FieldParams {
            a_o: 1.2,
            sigma_x: 12.0,
            sigma_y: 1.2,
            a_l: 0.2,
            y_c: 3.6,
            sigma_l: 0.8,
            a_r: 8.0,
            y_lr: -5.4,
            y_rr: 5.4,
            gamma_v: 0.5,
            v_d: vx + 2.0,
            x_obs: x0 + obstacle_ahead,
            y_obs: -0.5,
        }
    }

    pub fn without_obstacle(mut self) -> Self {
        self.a_o = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_l", self.sigma_l),
            ("a_l", self.a_l),
            ("a_r", self.a_r),
            ("v_d", self.v_d),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("field parameter {name} = {v} must be positive")));
            }
        }
        if !(self.a_o >= 0.0) {
            return Err(Error::Config(format!("obstacle amplitude {} must be non-negative", self.a_o)));
        }
        if self.y_lr == self.y_rr {
            return Err(Error::Config("road edges coincide".into()));
        }
        Ok(())
    }

    fn check_interior(&self, y: f64) -> Result<()> {
        let (lo, hi) = if self.y_lr < self.y_rr { (self.y_lr, self.y_rr) } else { (self.y_rr, self.y_lr) };
        if y > lo && y < hi {
            Ok(())
        } else {
            Err(Error::RoadEdge { y })
        }
    }

    fn obstacle_gauss(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.x_obs;
        let dy = y - self.y_obs;
        (-(dx * dx / (2.0 * self.sigma_x * self.sigma_x) + dy * dy / (2.0 * self.sigma_y * self.sigma_y))).exp()
    }

    fn lane_gauss(&self, y: f64) -> f64 {
        let d = y - self.y_c;
        (-(d * d) / (2.0 * self.sigma_l * self.sigma_l)).exp()
    }
}

/// Individual contributions to the total potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialTerms {
    pub obstacle: f64,
    pub lane: f64,
    pub road: f64,
    pub velocity: f64,
}

impl PotentialTerms {
    pub fn total(&self) -> f64 {
        self.obstacle + self.lane + self.road + self.velocity
    }
}

pub fn potential_terms(x: f64, y: f64, vx: f64, p: &FieldParams) -> Result<PotentialTerms> {
    p.check_interior(y)?;
    let dl = y - p.y_lr;
    let dr = y - p.y_rr;
    Ok(PotentialTerms {
        obstacle: p.a_o * p.obstacle_gauss(x, y),
        lane: p.a_l * p.lane_gauss(y),
        road: p.a_r * (1.0 / (dl * dl) + 1.0 / (dr * dr)),
        velocity: p.gamma_v * (vx - p.v_d) * x,
    })
}

pub fn total_potential(x: f64, y: f64, vx: f64, p: &FieldParams) -> Result<f64> {
    potential_terms(x, y, vx, p).map(|t| t.total())
}

/// Closed-form negative gradient (F_TX, F_TY) of the total potential.
pub fn total_force(x: f64, y: f64, vx: f64, p: &FieldParams) -> Result<(f64, f64)> {
    p.check_interior(y)?;
    let obs = p.a_o * p.obstacle_gauss(x, y);
    let dpo_dx = -obs * (x - p.x_obs) / (p.sigma_x * p.sigma_x);
    let dpo_dy = -obs * (y - p.y_obs) / (p.sigma_y * p.sigma_y);
    let dpv_dx = p.gamma_v * (vx - p.v_d);
    let dpl_dy = -p.a_l * p.lane_gauss(y) * (y - p.y_c) / (p.sigma_l * p.sigma_l);
    let dl = y - p.y_lr;
    let dr = y - p.y_rr;
    let dpr_dy = -2.0 * p.a_r * (1.0 / (dl * dl * dl) + 1.0 / (dr * dr * dr));
    Ok((-(dpo_dx + dpv_dx), -(dpo_dy + dpl_dy + dpr_dy)))
}

/// Heading of the force vector: atan(F_TY/F_TX) ahead, offset by pi when the
/// force points backwards; wrapped to (-pi, pi].
pub fn heading(ftx: f64, fty: f64) -> Result<f64> {
    if ftx == 0.0 && fty == 0.0 {
        return Err(Error::ZeroForce);
    }
    // equal to atan(F_TY/F_TX) (+ pi when F_TX < 0) modulo 2 pi, and
    // continuous across F_TX = 0
    Ok(fty.atan2(ftx))
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStart {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: f64,
    pub phi: f64,
    pub y: f64,
}

/// Integrates the planar kinematics along the field heading for
/// `horizon_steps` steps of `h` seconds. Entry k holds the heading and
/// lateral position reached after k + 1 steps. Speeds are held constant.
pub fn rollout_reference(start: RolloutStart, p: &FieldParams, horizon_steps: usize, h: f64) -> Result<Vec<ReferencePoint>> {
    let mut x = start.x;
    let mut y = start.y;
    let mut phi = field_heading(x, y, start.vx, p)?;
    let mut out = Vec::with_capacity(horizon_steps);
    for _ in 0..horizon_steps {
        let (s, c) = phi.sin_cos();
        x += (start.vx * c - start.vy * s) * h;
        y += (start.vx * s + start.vy * c) * h;
        phi = field_heading(x, y, start.vx, p)?;
        out.push(ReferencePoint { x, phi, y });
    }
    Ok(out)
}

fn field_heading(x: f64, y: f64, vx: f64, p: &FieldParams) -> Result<f64> {
    let (fx, fy) = total_force(x, y, vx, p)?;
    heading(fx, fy)
}

/// Lateral reference at an arbitrary longitudinal position, linearly
/// interpolated along a rollout. Clamps outside the rollout.
pub fn reference_y_at(path: &[ReferencePoint], x: f64) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    let i = path.partition_point(|r| r.x < x);
    if i == 0 {
        return path[0].y;
    }
    if i >= path.len() {
        return path[path.len() - 1].y;
    }
    let (a, b) = (&path[i - 1], &path[i]);
    let t = (x - a.x) / (b.x - a.x);
    a.y + t * (b.y - a.y)
}
