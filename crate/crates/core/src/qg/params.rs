use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and numerical configuration of a two-layer QG model.
///
/// The deformation radius is not stored: it follows from the reduced
/// gravity, the Coriolis parameter and the layer depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Domain edge length (m).
    pub l: f64,
    /// Grid points per side.
    pub nx: usize,
    pub h1: f64,
    pub h2: f64,
    pub f0: f64,
    pub beta: f64,
    pub g_prime: f64,
    /// Bottom drag coefficient (1/s).
    pub r_ek: f64,
    pub u1: f64,
    pub u2: f64,
    /// Timestep (s).
    pub dt: f64,
    #[serde(default)]
    pub case_label: String,
}

impl ModelParams {
    /// Builds parameters from a target deformation radius, solving for `g'`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_deformation_radius(
        l: f64,
        nx: usize,
        h1: f64,
        h2: f64,
        f0: f64,
        beta: f64,
        rd: f64,
        r_ek: f64,
        u1: f64,
        u2: f64,
        dt: f64,
        case_label: impl Into<String>,
    ) -> Result<Self> {
        if !(rd > 0.0) {
            return Err(Error::Config(format!("deformation radius must be positive, got {rd}")));
        }
        let h = h1 + h2;
        let g_prime = rd * rd * f0 * f0 * h / (h1 * h2);
        let p = ModelParams {
            l,
            nx,
            h1,
            h2,
            f0,
            beta,
            g_prime,
            r_ek,
            u1,
            u2,
            dt,
            case_label: case_label.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.l,
            self.h1,
            self.h2,
            self.f0,
            self.beta,
            self.g_prime,
            self.r_ek,
            self.u1,
            self.u2,
            self.dt,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("non-finite model parameter".into()));
        }
        if !(self.h1 > 0.0 && self.h2 > 0.0) {
            return Err(Error::Config("layer depths must be positive".into()));
        }
        if self.nx < 16 || !self.nx.is_multiple_of(2) {
            return Err(Error::Config(format!("nx must be even and >= 16, got {}", self.nx)));
        }
        if !(self.dt > 0.0) || !(self.l > 0.0) {
            return Err(Error::Config("dt and L must be positive".into()));
        }
        if !(self.g_prime > 0.0) || self.f0 == 0.0 {
            return Err(Error::Config("g' must be positive and f0 non-zero".into()));
        }
        if self.r_ek < 0.0 {
            return Err(Error::Config("bottom drag must be non-negative".into()));
        }
        Ok(())
    }

    /// Stretching coefficient `f0^2 / (g' H_m)` for layer `m` in {0, 1}.
    pub fn stretching(&self, m: usize) -> f64 {
        let hm = if m == 0 { self.h1 } else { self.h2 };
        self.f0 * self.f0 / (self.g_prime * hm)
    }

    /// Mean PV gradient of layer `m` in {0, 1}.
    pub fn beta_m(&self, m: usize) -> f64 {
        let sign = if m == 0 { 1.0 } else { -1.0 };
        self.beta + sign * self.stretching(m) * (self.u1 - self.u2)
    }

    pub fn mean_velocity(&self, m: usize) -> f64 {
        if m == 0 {
            self.u1
        } else {
            self.u2
        }
    }

    pub fn deformation_radius(&self) -> f64 {
        (self.g_prime / (self.f0 * self.f0) * self.h1 * self.h2 / (self.h1 + self.h2)).sqrt()
    }

    pub fn dx(&self) -> f64 {
        self.l / self.nx as f64
    }

    /// Same physics at another resolution.
    pub fn with_resolution(&self, nx: usize) -> Self {
        ModelParams {
            nx,
            ..self.clone()
        }
    }
}

/// Grid spacing and `r_d / dx` for a square domain.
pub fn resolution_ratio(rd: f64, l: f64, nx: usize) -> (f64, f64) {
    let dx = l / nx as f64;
    (dx, rd / dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eddy(nx: usize) -> ModelParams {
        ModelParams::from_deformation_radius(
            1e6, nx, 500.0, 2000.0, 1e-4, 1.5e-11, 15_000.0, 5.787e-7, 0.025, 0.0, 3600.0, "case0",
        )
        .unwrap()
    }

    #[test]
    fn deformation_radius_is_derived() {
        let p = eddy(64);
        let rd2 = p.g_prime / (p.f0 * p.f0) * p.h1 * p.h2 / (p.h1 + p.h2);
        assert!((p.deformation_radius().powi(2) - rd2).abs() / rd2 < 1e-12);
        assert!((p.deformation_radius() - 15_000.0).abs() / 15_000.0 < 1e-12);
    }

    #[test]
    fn resolution_rule_arithmetic() {
        assert_eq!(resolution_ratio(20_000.0, 1e6, 256), (3906.25, 5.12));
        assert_eq!(resolution_ratio(20_000.0, 1e6, 64), (15_625.0, 1.28));
    }

    #[test]
    fn layer_gradients() {
        let p = eddy(64);
        let du = p.u1 - p.u2;
        assert_eq!(p.beta_m(0), p.beta + p.stretching(0) * du);
        assert_eq!(p.beta_m(1), p.beta - p.stretching(1) * du);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut p = eddy(64);
        p.nx = 15;
        assert!(p.validate().is_err());
        p.nx = 8;
        assert!(p.validate().is_err());
        p.nx = 64;
        p.h2 = 0.0;
        assert!(p.validate().is_err());
    }
}
