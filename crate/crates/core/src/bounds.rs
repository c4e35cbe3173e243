use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Rectangular azimuth/elevation region (radians) observable by the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleBounds {
    pub theta_min: f64,
    pub theta_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for AngleBounds {
    /// Azimuth 110..150 deg, elevation 10..80 deg.
    fn default() -> Self {
        Self::from_degrees(110.0, 150.0, 10.0, 80.0).expect("valid default")
    }
}

impl AngleBounds {
    pub fn new(theta_min: f64, theta_max: f64, phi_min: f64, phi_max: f64) -> Result<Self> {
        let ok = [theta_min, theta_max, phi_min, phi_max]
            .iter()
            .all(|v| v.is_finite())
            && theta_max > theta_min
            && phi_max > phi_min;
        if !ok {
            return Err(CoreError::Config(format!(
                "angle bounds [{theta_min}, {theta_max}] x [{phi_min}, {phi_max}]"
            )));
        }
        Ok(Self {
            theta_min,
            theta_max,
            phi_min,
            phi_max,
        })
    }

    pub fn from_degrees(
        theta_min: f64,
        theta_max: f64,
        phi_min: f64,
        phi_max: f64,
    ) -> Result<Self> {
        Self::new(
            theta_min.to_radians(),
            theta_max.to_radians(),
            phi_min.to_radians(),
            phi_max.to_radians(),
        )
    }

    pub fn contains(&self, theta: f64, phi: f64) -> bool {
        (self.theta_min..=self.theta_max).contains(&theta)
            && (self.phi_min..=self.phi_max).contains(&phi)
    }

    pub fn theta_span(&self) -> f64 {
        self.theta_max - self.theta_min
    }

    pub fn phi_span(&self) -> f64 {
        self.phi_max - self.phi_min
    }

    /// Maps angles to `[0, 1]^2`.
    pub fn normalize(&self, theta: f64, phi: f64) -> (f64, f64) {
        (
            (theta - self.theta_min) / self.theta_span(),
            (phi - self.phi_min) / self.phi_span(),
        )
    }

    /// Inverse of [`AngleBounds::normalize`].
    pub fn denormalize(&self, a: f64, b: f64) -> (f64, f64) {
        (
            a * self.theta_span() + self.theta_min,
            b * self.phi_span() + self.phi_min,
        )
    }

    pub fn midpoint(&self) -> (f64, f64) {
        self.denormalize(0.5, 0.5)
    }

    /// Bounds shrunk by `margin` radians on every side.
    pub fn shrink(&self, margin: f64) -> Result<Self> {
        Self::new(
            self.theta_min + margin,
            self.theta_max - margin,
            self.phi_min + margin,
            self.phi_max - margin,
        )
    }
}
