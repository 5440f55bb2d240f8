//! Random-features ridge regression in the proportional limit.
//!
//! Solves the coupled Stieltjes equations for (m₁, m₂) along the ridge axis,
//! evaluates the asymptotic test risk, its infinite-width closed forms and
//! the width rates, and checks all of it against finite-size Monte Carlo.

mod closed;
mod mc;
mod moments;
mod stieltjes;

pub use closed::{
    closed_forms_inf, numeric_leading_coefficients, optimal_lambda, rf_rates, risk_inf, ClosedFormInf,
    LeadingCoefficients, RateReport, RateRow,
};
pub use mc::{calibrate_lambda_scale, monte_carlo_rf, McEstimate, RidgeTrial};
pub use moments::{gauss_hermite, hermite_moments, ActivationMoments, NormalizedActivation, RfActivation};
pub use stieltjes::{risk, risk_fd, solve_stieltjes, RiskPoint, StieltjesSolution};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfSetting {
    /// Samples per input dimension, N/d.
    pub psi1: f64,
    /// Features per input dimension, n/d.
    pub psi2: f64,
    pub sigma_eps_sq: f64,
}

impl RfSetting {
    pub fn new(psi1: f64, psi2: f64, sigma_eps_sq: f64) -> Result<Self> {
        if !(psi1 > 0.0 && psi2 > 0.0) {
            return invalid("psi1 and psi2 must be positive");
        }
        if !(sigma_eps_sq >= 0.0) {
            return invalid("noise variance must be nonnegative");
        }
        Ok(Self { psi1, psi2, sigma_eps_sq })
    }

    /// η = ψ₁/ψ₂.
    pub fn eta(&self) -> f64 {
        self.psi1 / self.psi2
    }

    pub fn with_psi2(&self, psi2: f64) -> Self {
        Self { psi2, ..*self }
    }

    /// tanh student, ReLU teacher, ψ₁ = 4, σ_ε = 1/4.
    pub fn reference(psi2: f64) -> Self {
        Self { psi1: 4.0, psi2, sigma_eps_sq: 1.0 / 16.0 }
    }
}
