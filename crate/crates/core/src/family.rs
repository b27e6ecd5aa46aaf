//! Canonical-link GLM families.
//!
//! Every family is described by its log-partition function `g`; the mean is
//! `g'` and the variance function is `g''`. Only the terms that depend on the
//! linear predictor are kept, so per-observation losses are `-y*eta + g(eta)`.

use serde::{Deserialize, Serialize};

use crate::error::{PsmError, Result};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GlmFamily {
    Gaussian {
        dispersion: f64,
    },
    #[default]
    Logistic,
}

#[inline]
fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

#[inline]
pub(crate) fn sigmoid(eta: f64) -> f64 {
    let eta = clamp_eta(eta);
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
#[inline]
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

impl GlmFamily {
    pub fn gaussian() -> Self {
        GlmFamily::Gaussian { dispersion: 1.0 }
    }

    pub fn logistic() -> Self {
        GlmFamily::Logistic
    }

    pub fn with_dispersion(dispersion: f64) -> Result<Self> {
        if !(dispersion.is_finite() && dispersion > 0.0) {
            return Err(PsmError::InvalidArgument(format!(
                "dispersion must be positive and finite, got {dispersion}"
            )));
        }
        Ok(GlmFamily::Gaussian { dispersion })
    }

    pub fn name(&self) -> &'static str {
        match self {
            GlmFamily::Gaussian { .. } => "gaussian",
            GlmFamily::Logistic => "logistic",
        }
    }

    pub fn dispersion(&self) -> f64 {
        match *self {
            GlmFamily::Gaussian { dispersion } => dispersion,
            GlmFamily::Logistic => 1.0,
        }
    }

    /// Log-partition function `g`.
    #[inline]
    pub fn log_partition(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian { .. } => 0.5 * eta * eta,
            GlmFamily::Logistic => softplus(eta),
        }
    }

    /// Mean function `g'`.
    #[inline]
    pub fn mean(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian { .. } => eta,
            GlmFamily::Logistic => sigmoid(eta),
        }
    }

    /// Variance function `g''`.
    #[inline]
    pub fn variance(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian { .. } => 1.0,
            GlmFamily::Logistic => {
                let mu = sigmoid(eta);
                mu * (1.0 - mu)
            }
        }
    }

    /// Unchecked loss `-y*eta + g(eta)`, used inside the solvers.
    #[inline]
    pub(crate) fn loss(&self, y: f64, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian { .. } => -y * eta + 0.5 * eta * eta,
            // `g(eta) - eta = g(-eta)` avoids cancellation for large |eta|.
            GlmFamily::Logistic => (1.0 - y) * softplus(eta) + y * softplus(-eta),
        }
    }

    /// Negative log-likelihood of one observation with terms constant in
    /// `eta` dropped: `-y*eta + g(eta)`.
    pub fn neg_log_lik(&self, y: f64, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(PsmError::Domain(format!("linear predictor must be finite, got {eta}")));
        }
        Ok(self.loss(y, eta))
    }

    /// Log density of `y` given `eta`.
    ///
    /// Exact for the logistic family. For the gaussian family the
    /// `c(y, phi)` normaliser is omitted; it does not depend on `eta`, so
    /// ratios across linear predictors are exact.
    #[inline]
    pub fn log_density(&self, y: f64, eta: f64) -> f64 {
        match *self {
            GlmFamily::Gaussian { dispersion } => {
                let r = y - clamp_eta(eta);
                -0.5 * r * r / dispersion
            }
            GlmFamily::Logistic => -self.loss(y, eta),
        }
    }

    pub fn density(&self, y: f64, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(PsmError::Domain(format!("linear predictor must be finite, got {eta}")));
        }
        Ok(self.log_density(y, eta).exp())
    }

    /// Checks that `y` lies in the support of the family.
    pub fn validate_outcome(&self, y: f64) -> Result<()> {
        match self {
            GlmFamily::Gaussian { .. } if y.is_finite() => Ok(()),
            GlmFamily::Logistic if y == 0.0 || y == 1.0 => Ok(()),
            _ => Err(PsmError::Domain(format!(
                "outcome {y} is outside the support of the {} family",
                self.name()
            ))),
        }
    }
}
