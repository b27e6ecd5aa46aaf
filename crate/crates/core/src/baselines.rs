//! Comparison methods.
//!
//! * `naive_lasso`: one lasso GLM on the target study, ignoring `z`.
//! * `lca_glm`: latent classes and mixture lasso fitted on the target alone,
//!   i.e. the full pipeline on a target-only collection with the correction
//!   disabled.
//! * `trans_glm`: pooled lasso over all studies followed by a target-only
//!   correction, without latent classes (the pipeline with one class). Every
//!   source is used; there is no informative-set selection.
//! * `targeted_psm` / `targeted_psm_1`: the full pipeline, iterated or with a
//!   single EM pass.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{CoefRole, CoefficientMatrix, MembershipMatrix, MembershipStage, Study, StudyCollection};
use crate::error::{PsmError, Result};
use crate::family::GlmFamily;
use crate::glm::{solve_weighted_lasso_glm, WeightedGlmProblem};
use crate::lca::{LcaFitConfig, LcaModel};
use crate::transfer::{
    auto_tune_lambda, fit_targeted_psm, predict_risk, LambdaSpec, LcaSource, TransferConfig, TransferFit, TuneStage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    TargetedPsm,
    #[serde(rename = "targeted_psm_1")]
    TargetedPsm1,
    LcaGlm,
    TransGlm,
    NaiveLasso,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [
        MethodId::TargetedPsm,
        MethodId::TargetedPsm1,
        MethodId::LcaGlm,
        MethodId::TransGlm,
        MethodId::NaiveLasso,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::TargetedPsm => "targeted_psm",
            MethodId::TargetedPsm1 => "targeted_psm_1",
            MethodId::LcaGlm => "lca_glm",
            MethodId::TransGlm => "trans_glm",
            MethodId::NaiveLasso => "naive_lasso",
        }
    }

    /// Whether coefficient MSE against the class-specific truth is defined.
    pub fn has_mse(&self) -> bool {
        matches!(self, MethodId::TargetedPsm | MethodId::TargetedPsm1 | MethodId::LcaGlm)
    }

    pub fn uses_mixture(&self) -> bool {
        self.has_mse()
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = PsmError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        MethodId::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            PsmError::InvalidArgument(format!(
                "unknown method {s:?}; expected one of targeted_psm, targeted_psm_1, lca_glm, trans_glm, naive_lasso"
            ))
        })
    }
}

/// A fitted method, ready for prediction on target-population subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum FittedModel {
    Mixture {
        method: MethodId,
        fit: TransferFit,
    },
    Single {
        method: MethodId,
        family: GlmFamily,
        coefs: CoefficientMatrix,
        /// Penalties used, in fitting order.
        lambdas: Vec<f64>,
    },
}

impl FittedModel {
    pub fn method(&self) -> MethodId {
        match self {
            FittedModel::Mixture { method, .. } | FittedModel::Single { method, .. } => *method,
        }
    }

    /// Final target coefficients.
    pub fn coefficients(&self) -> &CoefficientMatrix {
        match self {
            FittedModel::Mixture { fit, .. } => &fit.b0_hat,
            FittedModel::Single { coefs, .. } => coefs,
        }
    }

    pub fn mixture(&self) -> Option<&TransferFit> {
        match self {
            FittedModel::Mixture { fit, .. } => Some(fit),
            FittedModel::Single { .. } => None,
        }
    }

    /// Mixture methods average class predictions with the structure-variable
    /// posterior; single-model methods ignore `z`.
    pub fn predict(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        match self {
            FittedModel::Mixture { fit, .. } => predict_risk(fit, x, z),
            FittedModel::Single { family, coefs, .. } => {
                if x.len() != coefs.p() {
                    return Err(PsmError::DimensionMismatch(format!(
                        "model has p={}, got {} predictors",
                        coefs.p(),
                        x.len()
                    )));
                }
                Ok(family.mean(coefs.linear_predictor(x, 0)))
            }
        }
    }

    pub fn predict_study(&self, study: &Study) -> Result<Vec<f64>> {
        (0..study.n())
            .map(|i| {
                let x: Vec<f64> = study.x.row(i).iter().copied().collect();
                let z: Vec<f64> = study.z.row(i).iter().copied().collect();
                self.predict(&x, &z)
            })
            .collect()
    }
}

/// Lasso GLM on the target study alone. Returns the one-column coefficients
/// and the penalty used.
pub fn fit_naive_lasso(
    target: &Study,
    family: GlmFamily,
    lambda: &LambdaSpec,
    config: &TransferConfig,
) -> Result<(CoefficientMatrix, f64)> {
    if target.n() == 0 {
        return Err(PsmError::InvalidArgument("target study is empty".into()));
    }
    target.validate_outcomes(&family)?;
    let lam = match lambda.resolve(1)? {
        Some(l) => l[0],
        None => {
            let data = StudyCollection::target_only(target.clone())?;
            let v = MembershipMatrix::single_class(&data, MembershipStage::InitialV);
            auto_tune_lambda(&data, &v, family, TuneStage::Pool, None, config)?[0]
        }
    };
    let w = vec![1.0; target.n()];
    let prob = WeightedGlmProblem::new(family, &target.x, &target.y, &w)
        .lambda(family.dispersion() * lam)
        .intercept(config.intercept);
    let sol = solve_weighted_lasso_glm(&prob, None, &config.solver)?;
    let slopes = nalgebra::DMatrix::from_column_slice(target.p(), 1, sol.beta.as_slice());
    let coefs = CoefficientMatrix::new(CoefRole::TargetB0, DVector::from_element(1, sol.intercept), slopes)?;
    Ok((coefs, lam))
}

/// Latent classes and mixture lasso from the target study alone; no
/// correction stage, so `B0 = B`.
pub fn fit_lca_glm(
    target: &Study,
    n_classes: usize,
    family: GlmFamily,
    config: &TransferConfig,
    lca: LcaSource,
) -> Result<TransferFit> {
    if target.n() == 0 {
        return Err(PsmError::InvalidArgument("target study is empty".into()));
    }
    let data = StudyCollection::target_only(target.clone())?;
    let config = TransferConfig {
        lambda_bias: LambdaSpec::Uniform(f64::INFINITY),
        ..config.clone()
    };
    fit_targeted_psm(&data, n_classes, family, &config, lca)
}

/// Pooled-then-corrected lasso without latent classes.
pub fn fit_trans_glm(data: &StudyCollection, family: GlmFamily, config: &TransferConfig) -> Result<TransferFit> {
    if data.n_sources() == 0 {
        return Err(PsmError::InvalidArgument(
            "trans_glm needs at least one source study".into(),
        ));
    }
    fit_targeted_psm(data, 1, family, config, LcaSource::Fit(LcaFitConfig::default()))
}

/// Fit `method` on `data`. `lca` is reused by the methods that fit the latent
/// class model on every study.
pub fn fit_method(
    method: MethodId,
    data: &StudyCollection,
    n_classes: usize,
    family: GlmFamily,
    config: &TransferConfig,
    lca_config: &LcaFitConfig,
    lca: Option<&LcaModel>,
) -> Result<FittedModel> {
    let source = || match lca {
        Some(m) => LcaSource::Prefitted(m.clone()),
        None => LcaSource::Fit(*lca_config),
    };
    Ok(match method {
        MethodId::TargetedPsm => FittedModel::Mixture {
            method,
            fit: fit_targeted_psm(data, n_classes, family, config, source())?,
        },
        MethodId::TargetedPsm1 => {
            let config = TransferConfig {
                one_step: true,
                ..config.clone()
            };
            FittedModel::Mixture {
                method,
                fit: fit_targeted_psm(data, n_classes, family, &config, source())?,
            }
        }
        MethodId::LcaGlm => FittedModel::Mixture {
            method,
            fit: fit_lca_glm(&data.target, n_classes, family, config, LcaSource::Fit(*lca_config))?,
        },
        MethodId::TransGlm => {
            let fit = fit_trans_glm(data, family, config)?;
            FittedModel::Single {
                method,
                family,
                lambdas: vec![fit.lambda_pool[0], fit.lambda_bias[0]],
                coefs: fit.b0_hat,
            }
        }
        MethodId::NaiveLasso => {
            let (coefs, lam) = fit_naive_lasso(&data.target, family, &config.lambda_pool, config)?;
            FittedModel::Single {
                method,
                family,
                coefs,
                lambdas: vec![lam],
            }
        }
    })
}
