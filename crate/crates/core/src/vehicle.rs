//! Lateral vehicle models: the linear error-state bicycle model and a
//! kinematic bicycle for the nonlinear experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Front cornering stiffness (N/rad, negative).
    pub k1: f64,
    /// Rear cornering stiffness (N/rad, negative).
    pub k2: f64,
    /// CG to front axle (m).
    pub a: f64,
    /// CG to rear axle (m).
    pub b: f64,
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg·m²).
    pub izz: f64,
    /// Longitudinal speed (m/s).
    pub vx: f64,
    /// Steering bound (rad).
    pub delta_max: f64,
}

impl Default for VehicleParams {
    /// Passenger-car parameters at 15 m/s with a 0.35 rad steering limit.
    fn default() -> Self {
        Self {
            k1: -88000.0,
            k2: -94000.0,
            a: 1.14,
            b: 1.4,
            m: 1500.0,
            izz: 2420.0,
            vx: 15.0,
            delta_max: 0.35,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("m", self.m),
            ("izz", self.izz),
            ("vx", self.vx),
            ("delta_max", self.delta_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("vehicle.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("k1", self.k1), ("k2", self.k2)] {
            if !(v < 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("vehicle.{name} must be negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Tracking error state `[d, phi, r, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingState {
    /// Lateral position error (m).
    pub d: f64,
    /// Heading error (rad).
    pub phi: f64,
    /// Yaw rate (rad/s).
    pub r: f64,
    /// Lateral velocity (m/s).
    pub vy: f64,
}

impl TrackingState {
    pub fn new(d: f64, phi: f64, r: f64, vy: f64) -> Self {
        Self { d, phi, r, vy }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.d, self.phi, self.r, self.vy]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Front-wheel steering angle (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub delta: f64,
}

impl Control {
    pub fn new(delta: f64) -> Self {
        Self { delta }
    }

    pub fn saturate(self, bound: f64) -> Self {
        Self::new(self.delta.clamp(-bound, bound))
    }
}

/// `ẋ = A x + B δ` for the error-state model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDynamics {
    pub a: [[f64; 4]; 4],
    pub b: [f64; 4],
}

impl LinearDynamics {
    pub fn new(p: &VehicleParams) -> Result<Self> {
        if p.vx == 0.0 {
            return Err(Error::SingularModel("longitudinal speed vx is zero".into()));
        }
        p.validate()?;
        let VehicleParams {
            k1,
            k2,
            a,
            b,
            m,
            izz,
            vx,
            ..
        } = *p;
        Ok(Self {
            a: [
                [0.0, vx, 0.0, 1.0],
                [0.0, 0.0, 1.0, 0.0],
                [
                    0.0,
                    0.0,
                    (a * a * k1 + b * b * k2) / (izz * vx),
                    (a * k1 - b * k2) / (izz * vx),
                ],
                [
                    0.0,
                    0.0,
                    (a * k1 - b * k2) / (m * vx) - vx,
                    (k1 + k2) / (m * vx),
                ],
            ],
            b: [0.0, 0.0, -a * k1 / izz, -k1 / m],
        })
    }

    /// `A x + B δ` on raw arrays.
    #[inline]
    pub fn eval(&self, x: &[f64], u: f64, out: &mut [f64]) {
        for i in 0..4 {
            let row = &self.a[i];
            out[i] = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3] + self.b[i] * u;
        }
    }

    pub fn derivative(&self, x: &TrackingState, u: Control) -> [f64; 4] {
        let mut out = [0.0; 4];
        self.eval(&x.to_array(), u.delta, &mut out);
        out
    }
}

/// Planar pose of the vehicle CG.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }
}

/// Sideslip angle at the CG for a front steering angle.
#[inline]
pub fn sideslip(p: &VehicleParams, delta: f64) -> f64 {
    (p.b * delta.tan() / (p.a + p.b)).atan()
}

/// CG-referenced kinematic bicycle: returns `[ẋ, ẏ, θ̇]`.
pub fn kinematic_bicycle_derivative(p: &VehicleParams, pose: &Pose, u: Control) -> [f64; 3] {
    let beta = sideslip(p, u.delta);
    let (s, c) = (pose.heading + beta).sin_cos();
    [p.vx * c, p.vx * s, p.vx / p.b * beta.sin()]
}

/// Lateral and heading error of `pose` against the tangent line through the
/// reference point `(y_r, theta_r)`.
pub fn error_state(pose: &Pose, y_ref: f64, theta_ref: f64) -> Result<(f64, f64)> {
    let c = theta_ref.cos();
    if theta_ref.abs() >= std::f64::consts::FRAC_PI_2 || c.abs() < 1e-12 {
        return Err(Error::DegenerateReference(theta_ref));
    }
    Ok(((pose.y - y_ref) * c, pose.heading - theta_ref))
}
