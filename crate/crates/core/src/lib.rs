//! Targeted transfer learning for generalized linear models via
//! probabilistic subpopulation matching.
//!
//! The pipeline has two stages. A latent class model with shared class
//! prevalences and study-specific mixing proportions is fitted jointly on
//! the binary structure variables of every study ([`lca`]), giving each
//! subject a probability of belonging to each subpopulation. Those
//! probabilities then drive an EM algorithm that pools all studies to fit
//! subpopulation-specific lasso GLMs and corrects the pooled estimate on the
//! target study alone ([`transfer`]).
//!
//! Supporting modules provide the weighted lasso-GLM solver ([`glm`]),
//! comparison methods ([`baselines`]), a simulation generator
//! ([`simulate`]) and the evaluation harness ([`eval`]).

// Negated comparisons are how the validators reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod family;
pub mod glm;
pub mod io;
pub mod lca;
pub mod rng;
pub mod simulate;
pub mod transfer;

mod serde_matrix;

pub use baselines::{FittedModel, MethodId};
pub use data::{
    clip_to_simplex, CoefRole, CoefficientMatrix, MembershipMatrix, MembershipStage, Study, StudyCollection, EPS_CLIP,
};
pub use error::{PsmError, Result};
pub use family::GlmFamily;
pub use glm::{
    kkt_residual, soft_threshold, solve_weighted_lasso_glm, LassoSolution, SolverSettings, WeightedGlmProblem,
};
pub use lca::{fit_lca, initial_memberships, lca_class_density, lca_log_lik, LcaFitConfig, LcaModel};
pub use transfer::{fit_targeted_psm, predict_risk, LambdaSpec, TransferConfig, TransferFit};
