//! Model parameters and the stationary Gamma law of the volatility factor.
//!
//! The three-factor system
//!
//! ```text
//! dR = k(θ − R) dt      + α √(|vR|) dW¹
//! dθ = k_θ(ζ − θ) dt    + αβ √(|vθ|) dW²
//! dv = k_v(η − v) dt    + γ √(|v|) dW³
//! ```
//!
//! is driven by a correlated Brownian motion with Corr(dW¹,dW²) = ρ_θ,
//! Corr(dW¹,dW³) = ρ_v, Corr(dW²,dW³) = 0, subject to
//! ρ̄ := 1 − ρ_θ² − ρ_v² > 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{0}` must be strictly positive and finite")]
    NonPositiveParameter(&'static str),
    #[error("correlation `{0}` must lie in [-1, 1]")]
    CorrelationOutOfRange(&'static str),
    #[error("1 - rho_theta^2 - rho_v^2 must be positive (computed rho_bar = {0})")]
    RhoBarNotPositive(f64),
}

/// The eight positive rate/volatility parameters plus the two correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Mean-reversion speed of the rate factor R.
    pub k: f64,
    /// Mean-reversion speed of the stochastic mean θ.
    pub k_theta: f64,
    /// Mean-reversion speed of the volatility factor v.
    pub k_v: f64,
    /// Volatility scale of R.
    pub alpha: f64,
    /// Volatility ratio of θ (enters as αβ).
    pub beta: f64,
    /// Volatility of v.
    pub gamma: f64,
    /// Long-run mean of θ.
    pub zeta: f64,
    /// Long-run mean of v.
    pub eta: f64,
    /// Correlation of dW¹ with dW².
    pub rho_theta: f64,
    /// Correlation of dW¹ with dW³.
    pub rho_v: f64,
}

impl ModelParams {
    /// Checks positivity of the rate/vol parameters and the ρ̄ > 0 constraint.
    ///
    /// Returns the same values unchanged when all invariants hold, so
    /// validation is idempotent.
    pub fn validate(self) -> Result<Self, ParamError> {
        let positives = [
            ("k", self.k),
            ("k_theta", self.k_theta),
            ("k_v", self.k_v),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("zeta", self.zeta),
            ("eta", self.eta),
        ];
        for (name, value) in positives {
            if !value.is_finite() || value <= 0.0 {
                return Err(ParamError::NonPositiveParameter(name));
            }
        }
        for (name, value) in [("rho_theta", self.rho_theta), ("rho_v", self.rho_v)] {
            if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
                return Err(ParamError::CorrelationOutOfRange(name));
            }
        }
        let rho_bar = self.rho_bar();
        if rho_bar <= 0.0 {
            return Err(ParamError::RhoBarNotPositive(rho_bar));
        }
        Ok(self)
    }

    /// ρ̄ = 1 − ρ_θ² − ρ_v².
    pub fn rho_bar(&self) -> f64 {
        1.0 - self.rho_theta * self.rho_theta - self.rho_v * self.rho_v
    }

    /// Feller condition 2 k_v η ≥ γ² for the v-factor.
    ///
    /// Not enforced: the ergodicity results hold without it. When it fails
    /// the stationary Gamma shape drops below 1 and samplers must take the
    /// shape < 1 branch, so callers may want to surface an advisory.
    pub fn feller_holds(&self) -> bool {
        2.0 * self.k_v * self.eta >= self.gamma * self.gamma
    }

    /// Stationary Gamma law of the autonomous v-factor.
    pub fn stationary_gamma(&self) -> GammaStationary {
        GammaStationary {
            shape: 2.0 * self.k_v * self.eta / (self.gamma * self.gamma),
            scale: self.gamma * self.gamma / (2.0 * self.k_v),
        }
    }
}

/// Shape/scale of the Gamma limit distribution of v.
///
/// shape = 2 k_v η / γ², scale = γ² / (2 k_v); the product recovers the
/// long-run mean η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaStationary {
    pub shape: f64,
    pub scale: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> ModelParams {
        ModelParams {
            k: 1.0,
            k_theta: 1.0,
            k_v: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            zeta: 1.0,
            eta: 1.0,
            rho_theta: 0.0,
            rho_v: 0.0,
        }
    }

    #[test]
    fn unit_params_valid_with_rho_bar_one() {
        let p = unit_params().validate().unwrap();
        assert_eq!(p.rho_bar(), 1.0);
    }

    #[test]
    fn rho_bar_from_single_correlation() {
        let p = ModelParams {
            rho_theta: 0.6,
            rho_v: 0.0,
            ..unit_params()
        }
        .validate()
        .unwrap();
        assert!((p.rho_bar() - 0.64).abs() < 1e-15);
    }

    #[test]
    fn rho_bar_violation_reported() {
        let err = ModelParams {
            rho_theta: 0.8,
            rho_v: 0.7,
            ..unit_params()
        }
        .validate()
        .unwrap_err();
        match err {
            ParamError::RhoBarNotPositive(rb) => assert!((rb + 0.13).abs() < 1e-12),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_positive_parameter_named() {
        let err = ModelParams {
            gamma: 0.0,
            ..unit_params()
        }
        .validate()
        .unwrap_err();
        assert_eq!(err, ParamError::NonPositiveParameter("gamma"));
        let err = ModelParams {
            k_v: f64::NAN,
            ..unit_params()
        }
        .validate()
        .unwrap_err();
        assert_eq!(err, ParamError::NonPositiveParameter("k_v"));
    }

    #[test]
    fn validate_is_idempotent() {
        let p = unit_params().validate().unwrap();
        assert_eq!(p, p.validate().unwrap());
    }

    #[test]
    fn stationary_gamma_unit_reduction() {
        // gamma^2 = 2 collapses to the standard exponential.
        let p = ModelParams {
            gamma: std::f64::consts::SQRT_2,
            ..unit_params()
        }
        .validate()
        .unwrap();
        let g = p.stationary_gamma();
        assert!((g.shape - 1.0).abs() < 1e-15);
        assert!((g.scale - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stationary_gamma_shape_two() {
        let g = unit_params().validate().unwrap().stationary_gamma();
        assert_eq!(g.shape, 2.0);
        assert_eq!(g.scale, 0.5);
    }

    #[test]
    fn stationary_mean_matches_eta() {
        // shape * scale = eta across random parameter draws.
        let mut x = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            0.05 + 3.0 * (x >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let p = ModelParams {
                k_v: next(),
                gamma: next(),
                eta: next(),
                ..unit_params()
            }
            .validate()
            .unwrap();
            let g = p.stationary_gamma();
            let rel = (g.shape * g.scale - p.eta).abs() / p.eta;
            assert!(rel < 4.0 * f64::EPSILON, "rel {rel}");
        }
    }

    #[test]
    fn feller_condition_advisory() {
        assert!(unit_params().validate().unwrap().feller_holds());
        let stressed = ModelParams {
            gamma: 2.0,
            ..unit_params()
        }
        .validate()
        .unwrap();
        assert!(!stressed.feller_holds());
        // Stationary law still well defined, with shape < 1.
        assert!(stressed.stationary_gamma().shape < 1.0);
    }
}
