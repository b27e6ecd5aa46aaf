//! Subpopulation-matched transfer learning.
//!
//! Given initial membership probabilities `v` from the latent class model,
//! two EM loops are run. The joint loop pools every study under a working
//! assumption of shared coefficients `B` and alternates
//!
//! * E-step: `w_ic = v_ic f(y_i | beta_c) / sum_c' v_ic' f(y_i | beta_c')`
//!   (with `w = v` on the first pass), and
//! * M-step: one weighted lasso GLM per class with weights `w_.c`.
//!
//! The correction loop repeats the same scheme on the target study alone for
//! `Delta`, holding `B` fixed through per-row offsets. The final estimate is
//! `B0 = B + Delta`.
//!
//! Per-class penalties are anchored to the class's initial weight mass
//! `W0_c = sum_i v_ic`: the EM objective is
//!
//! ```text
//! -sum_i log sum_c v_ic f(y_i | eta_ic) + sum_c lambda_c * W0_c * ||beta_c||_1
//! ```
//!
//! and the M-step for class `c` is solved with the weight-normalized penalty
//! `phi * lambda_c * W0_c / W_c`, where `W_c` is the current class mass. On the
//! first pass `W_c = W0_c`, so `lambda_c` is exactly the solver penalty.

mod tuning;

pub use tuning::{auto_tune_lambda, TuneStage};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{
    clip_to_simplex, log_sum_exp, CoefRole, CoefficientMatrix, MembershipMatrix, MembershipStage, Study,
    StudyCollection, EPS_CLIP,
};
use crate::error::{PsmError, Result, ResultExt};
use crate::family::GlmFamily;
use crate::glm::{solve_weighted_lasso_glm, SolverSettings, WeightedGlmProblem};
use crate::lca::{fit_lca, initial_memberships, LcaFitConfig, LcaModel};

/// Penalty choice for one stage: cross-validated, one value for every
/// class, or one value per class. An infinite bias penalty disables the
/// correction for that class.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum LambdaSpec {
    #[default]
    Auto,
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl LambdaSpec {
    pub fn is_auto(&self) -> bool {
        matches!(self, LambdaSpec::Auto)
    }

    /// Concrete per-class values, or `None` for [`LambdaSpec::Auto`].
    pub fn resolve(&self, n_classes: usize) -> Result<Option<Vec<f64>>> {
        let values = match self {
            LambdaSpec::Auto => return Ok(None),
            LambdaSpec::Uniform(v) => vec![*v; n_classes],
            LambdaSpec::PerClass(v) => {
                if v.len() != n_classes {
                    return Err(PsmError::InvalidArgument(format!(
                        "{} penalties given for {n_classes} classes",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(PsmError::InvalidArgument(format!(
                "penalty must be nonnegative, got {bad}"
            )));
        }
        Ok(Some(values))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Word(String),
    Scalar(f64),
    List(Vec<f64>),
}

impl Serialize for LambdaSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaSpec::Auto => LambdaRepr::Word("auto".into()),
            LambdaSpec::Uniform(v) if v.is_infinite() => LambdaRepr::Word("inf".into()),
            LambdaSpec::Uniform(v) => LambdaRepr::Scalar(*v),
            LambdaSpec::PerClass(v) => LambdaRepr::List(v.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LambdaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match LambdaRepr::deserialize(d)? {
            LambdaRepr::Word(w) if w.eq_ignore_ascii_case("auto") => Ok(LambdaSpec::Auto),
            LambdaRepr::Word(w) if w.eq_ignore_ascii_case("inf") => Ok(LambdaSpec::Uniform(f64::INFINITY)),
            LambdaRepr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"auto\", \"inf\", a number or a list of numbers, got {w:?}"
            ))),
            LambdaRepr::Scalar(v) => Ok(LambdaSpec::Uniform(v)),
            LambdaRepr::List(v) => Ok(LambdaSpec::PerClass(v)),
        }
    }
}

/// Penalty vectors may hold `+inf`; JSON has no infinity, so it is written as `null`.
mod serde_penalties {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::INFINITY))
            .collect())
    }
}

/// Ten log-spaced multipliers from 0.01 to 10.
pub fn default_multipliers() -> Vec<f64> {
    (0..10).map(|i| 0.01 * 1000f64.powf(i as f64 / 9.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub lambda_pool: LambdaSpec,
    pub lambda_bias: LambdaSpec,
    /// Relative coefficient change that stops each EM loop.
    pub tau: f64,
    /// Maximum EM iterations per loop.
    pub max_iter: usize,
    /// Run a single E/M pass per loop (weights fixed at the LCA memberships).
    pub one_step: bool,
    pub cv_folds: usize,
    /// Multipliers `c` of the penalty scale `sqrt(log p / n_eff)` tried by
    /// cross-validation.
    pub grid: Vec<f64>,
    pub intercept: bool,
    /// Seed for cross-validation fold assignment.
    pub seed: u64,
    pub solver: SolverSettings,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lambda_pool: LambdaSpec::Auto,
            lambda_bias: LambdaSpec::Auto,
            tau: 1e-4,
            max_iter: 100,
            one_step: false,
            cv_folds: 5,
            grid: default_multipliers(),
            intercept: true,
            seed: 0,
            solver: SolverSettings::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(PsmError::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.max_iter == 0 {
            return Err(PsmError::InvalidArgument("max_iter must be at least 1".into()));
        }
        if (self.lambda_pool.is_auto() || self.lambda_bias.is_auto()) && self.cv_folds < 2 {
            return Err(PsmError::InvalidArgument(format!(
                "cv_folds must be at least 2 for automatic tuning, got {}",
                self.cv_folds
            )));
        }
        if self.grid.is_empty() || self.grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(PsmError::InvalidArgument(
                "tuning grid must hold positive multipliers".into(),
            ));
        }
        Ok(())
    }

    /// Iteration cap actually used by each EM loop.
    pub fn iterations(&self) -> usize {
        if self.one_step {
            1
        } else {
            self.max_iter
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Penalized objective after each joint-estimation M-step.
    pub joint: Vec<f64>,
    /// Penalized objective after each bias-correction M-step.
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFit {
    pub family: GlmFamily,
    pub n_classes: usize,
    pub b_hat: CoefficientMatrix,
    pub delta_hat: CoefficientMatrix,
    pub b0_hat: CoefficientMatrix,
    /// Clipped posterior memberships at the final joint estimate.
    pub refined_weights: MembershipMatrix,
    pub lca: LcaModel,
    pub trace: EmTrace,
    #[serde(with = "serde_penalties")]
    pub lambda_pool: Vec<f64>,
    #[serde(with = "serde_penalties")]
    pub lambda_bias: Vec<f64>,
    pub joint_iterations: usize,
    pub bias_iterations: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TransferFit {
    pub fn predict(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        predict_risk(self, x, z)
    }
}

/// Where the latent class model comes from.
#[derive(Clone, Debug)]
pub enum LcaSource {
    Fit(LcaFitConfig),
    Prefitted(LcaModel),
}

/// Intercept, slopes and optional solver warning of one class.
type ColumnFit = (f64, DVector<f64>, Option<String>);

/// One EM loop over stacked rows.
struct EmLoop<'a> {
    family: GlmFamily,
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    /// `N x C` prior memberships.
    prior: &'a DMatrix<f64>,
    /// `N x C` fixed per-class offsets (correction loop only).
    offsets: Option<&'a DMatrix<f64>>,
    lambda: &'a [f64],
    /// Infinite penalty zeroes the whole class column, intercept included.
    zero_if_infinite: bool,
    intercept: bool,
    label: &'static str,
}

struct EmOutcome {
    coefs: CoefficientMatrix,
    trace: Vec<f64>,
    iterations: usize,
    warnings: Vec<String>,
}

impl EmLoop<'_> {
    fn n_classes(&self) -> usize {
        self.prior.ncols()
    }

    /// `N x C` linear predictors.
    fn linear_predictors(&self, coefs: &CoefficientMatrix) -> DMatrix<f64> {
        let mut eta = self.x * &coefs.slopes;
        for (c, mut col) in eta.column_iter_mut().enumerate() {
            col.add_scalar_mut(coefs.intercepts[c]);
        }
        if let Some(off) = self.offsets {
            eta += off;
        }
        eta
    }

    fn log_terms(&self, eta: &DMatrix<f64>, i: usize) -> Vec<f64> {
        (0..self.n_classes())
            .map(|c| self.prior[(i, c)].ln() + self.family.log_density(self.y[i], eta[(i, c)]))
            .collect()
    }

    /// Exact (unclipped) posterior memberships.
    fn posterior(&self, coefs: &CoefficientMatrix) -> DMatrix<f64> {
        let eta = self.linear_predictors(coefs);
        let n = self.y.len();
        let mut w = DMatrix::zeros(n, self.n_classes());
        for i in 0..n {
            let terms = self.log_terms(&eta, i);
            let lse = log_sum_exp(&mut terms.clone());
            for (c, t) in terms.iter().enumerate() {
                w[(i, c)] = (t - lse).exp();
            }
        }
        w
    }

    fn objective(&self, coefs: &CoefficientMatrix, anchor: &[f64]) -> f64 {
        let eta = self.linear_predictors(coefs);
        let nll: f64 = (0..self.y.len())
            .map(|i| -log_sum_exp(&mut self.log_terms(&eta, i)))
            .sum();
        let penalty: f64 = (0..self.n_classes())
            .map(|c| {
                let l1: f64 = coefs.slopes.column(c).iter().map(|b| b.abs()).sum();
                if l1 == 0.0 {
                    0.0
                } else {
                    self.lambda[c] * anchor[c] * l1
                }
            })
            .sum();
        nll + penalty
    }

    fn run(&self, role: CoefRole, tau: f64, max_iter: usize, solver: &SolverSettings) -> Result<EmOutcome> {
        let c_count = self.n_classes();
        let p = self.x.ncols();
        let phi = self.family.dispersion();
        let anchor: Vec<f64> = self.prior.column_iter().map(|c| c.sum()).collect();
        let min_mass = 10.0 * p as f64 * EPS_CLIP;
        let mut warnings = Vec::new();
        let mut trace = Vec::new();
        let mut current: Option<CoefficientMatrix> = None;
        let mut iterations = 0;

        for t in 1..=max_iter {
            iterations = t;
            let weights = match &current {
                None => self.prior.clone(),
                Some(b) => self.posterior(b),
            };
            let mass: Vec<f64> = weights.column_iter().map(|c| c.sum()).collect();
            let offsets: Option<Vec<Vec<f64>>> = self
                .offsets
                .map(|o| o.column_iter().map(|c| c.iter().copied().collect()).collect());

            let columns: Vec<Result<ColumnFit>> = (0..c_count)
                .into_par_iter()
                .map(|c| {
                    let (b_prev, beta_prev) = match &current {
                        Some(b) => (b.intercepts[c], b.slopes.column(c).into_owned()),
                        None => (0.0, DVector::zeros(p)),
                    };
                    if self.zero_if_infinite && self.lambda[c].is_infinite() {
                        return Ok((0.0, DVector::zeros(p), None));
                    }
                    if mass[c] < min_mass {
                        let msg = format!(
                            "{}: class {} weight mass {:.3e} too small at iteration {t}; coefficients frozen",
                            self.label,
                            c + 1,
                            mass[c]
                        );
                        return Ok((b_prev, beta_prev, Some(msg)));
                    }
                    let w: Vec<f64> = weights.column(c).iter().copied().collect();
                    let lam = phi * self.lambda[c] * (anchor[c] / mass[c]);
                    let mut prob = WeightedGlmProblem::new(self.family, self.x, self.y, &w)
                        .lambda(lam)
                        .intercept(self.intercept);
                    if let Some(off) = &offsets {
                        prob = prob.offset(&off[c]);
                    }
                    let sol = solve_weighted_lasso_glm(&prob, Some((b_prev, &beta_prev)), solver)
                        .with_context(|| format!("{}: iteration {t}, class {}", self.label, c + 1))?;
                    Ok((sol.intercept, sol.beta, None))
                })
                .collect();

            let mut next = CoefficientMatrix::zeros(role, p, c_count);
            for (c, col) in columns.into_iter().enumerate() {
                let (b0, beta, msg) = col?;
                next.intercepts[c] = b0;
                next.slopes.set_column(c, &beta);
                if let Some(msg) = msg {
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
            trace.push(self.objective(&next, &anchor));

            let stop = match &current {
                Some(prev) => {
                    let denom = prev.norm();
                    let diff = (&next.slopes - &prev.slopes).norm_squared()
                        + (&next.intercepts - &prev.intercepts).norm_squared();
                    if denom > 0.0 {
                        diff.sqrt() / denom <= tau
                    } else {
                        next.norm() <= tau
                    }
                }
                None => false,
            };
            current = Some(next);
            if stop {
                break;
            }
        }
        Ok(EmOutcome {
            coefs: current.expect("at least one iteration"),
            trace,
            iterations,
            warnings,
        })
    }
}

fn clipped(mut w: DMatrix<f64>) -> DMatrix<f64> {
    let c = w.ncols();
    let mut row = vec![0.0; c];
    for i in 0..w.nrows() {
        for (k, r) in row.iter_mut().enumerate() {
            *r = w[(i, k)];
        }
        clip_to_simplex(&mut row, EPS_CLIP);
        for (k, r) in row.iter().enumerate() {
            w[(i, k)] = *r;
        }
    }
    w
}

/// Refined memberships `w_ic ∝ v_ic f(y_i | x_i'(beta_c + offset_c))`, clipped.
pub fn e_step_weights(
    family: GlmFamily,
    memberships: &MembershipMatrix,
    b_current: &CoefficientMatrix,
    data: &StudyCollection,
    offset_b: Option<&CoefficientMatrix>,
) -> Result<MembershipMatrix> {
    memberships.check_matches(data)?;
    let c = memberships.n_classes();
    if b_current.n_classes() != c || b_current.p() != data.p() {
        return Err(PsmError::DimensionMismatch(format!(
            "coefficients are {}x{}, data has p={} and memberships C={c}",
            b_current.p(),
            b_current.n_classes(),
            data.p()
        )));
    }
    let coefs = match offset_b {
        Some(o) => b_current.plus(o, b_current.role)?,
        None => b_current.clone(),
    };
    let (x, y) = data.stacked();
    let prior = memberships.stacked();
    let lambda = vec![0.0; c];
    let em = EmLoop {
        family,
        x: &x,
        y: &y,
        prior: &prior,
        offsets: None,
        lambda: &lambda,
        zero_if_infinite: false,
        intercept: true,
        label: "e-step",
    };
    let sizes: Vec<usize> = data.studies().map(Study::n).collect();
    Ok(MembershipMatrix::from_stacked(
        MembershipStage::RefinedW,
        &clipped(em.posterior(&coefs)),
        &sizes,
    ))
}

#[derive(Clone, Debug)]
pub struct JointEstimate {
    pub b_hat: CoefficientMatrix,
    pub refined_weights: MembershipMatrix,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Joint estimation over all studies with per-class penalties `lambda_pool`.
pub fn joint_estimate(
    data: &StudyCollection,
    v: &MembershipMatrix,
    lambda_pool: &[f64],
    config: &TransferConfig,
    family: GlmFamily,
) -> Result<JointEstimate> {
    config.validate()?;
    v.check_matches(data)?;
    check_lambdas(lambda_pool, v.n_classes())?;
    let (x, y) = data.stacked();
    let prior = v.stacked();
    let em = EmLoop {
        family,
        x: &x,
        y: &y,
        prior: &prior,
        offsets: None,
        lambda: lambda_pool,
        zero_if_infinite: false,
        intercept: config.intercept,
        label: "joint estimation",
    };
    let out = em.run(CoefRole::PooledB, config.tau, config.iterations(), &config.solver)?;
    let sizes: Vec<usize> = data.studies().map(Study::n).collect();
    let refined = MembershipMatrix::from_stacked(MembershipStage::RefinedW, &clipped(em.posterior(&out.coefs)), &sizes);
    Ok(JointEstimate {
        b_hat: out.coefs,
        refined_weights: refined,
        trace: out.trace,
        iterations: out.iterations,
        warnings: out.warnings,
    })
}

#[derive(Clone, Debug)]
pub struct BiasCorrection {
    pub delta_hat: CoefficientMatrix,
    /// Clipped posterior memberships of the target subjects at `B + Delta`.
    pub refined_weights: DMatrix<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Per-class offsets `b_c + x_i' beta_c` for every row of `study`.
pub(crate) fn class_offsets(study: &Study, b: &CoefficientMatrix) -> DMatrix<f64> {
    let mut off = &study.x * &b.slopes;
    for (c, mut col) in off.column_iter_mut().enumerate() {
        col.add_scalar_mut(b.intercepts[c]);
    }
    off
}

/// Target-only correction of `b_hat`. `v0` holds the target rows of the
/// initial memberships; the loop restarts from them rather than from the
/// joint step's refined weights.
pub fn bias_correct(
    target: &Study,
    v0: &DMatrix<f64>,
    b_hat: &CoefficientMatrix,
    lambda_bias: &[f64],
    config: &TransferConfig,
    family: GlmFamily,
) -> Result<BiasCorrection> {
    config.validate()?;
    if v0.nrows() != target.n() || v0.ncols() != b_hat.n_classes() || b_hat.p() != target.p() {
        return Err(PsmError::DimensionMismatch(format!(
            "target has {} rows and p={}, memberships are {}x{}, coefficients {}x{}",
            target.n(),
            target.p(),
            v0.nrows(),
            v0.ncols(),
            b_hat.p(),
            b_hat.n_classes()
        )));
    }
    check_lambdas(lambda_bias, b_hat.n_classes())?;
    let offsets = class_offsets(target, b_hat);
    let em = EmLoop {
        family,
        x: &target.x,
        y: &target.y,
        prior: v0,
        offsets: Some(&offsets),
        lambda: lambda_bias,
        zero_if_infinite: true,
        intercept: config.intercept,
        label: "bias correction",
    };
    let out = em.run(
        CoefRole::CorrectionDelta,
        config.tau,
        config.iterations(),
        &config.solver,
    )?;
    let refined = clipped(em.posterior(&out.coefs));
    Ok(BiasCorrection {
        delta_hat: out.coefs,
        refined_weights: refined,
        trace: out.trace,
        iterations: out.iterations,
        warnings: out.warnings,
    })
}

fn check_lambdas(lambda: &[f64], n_classes: usize) -> Result<()> {
    if lambda.len() != n_classes {
        return Err(PsmError::InvalidArgument(format!(
            "{} penalties for {n_classes} classes",
            lambda.len()
        )));
    }
    if let Some(bad) = lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(PsmError::InvalidArgument(format!(
            "penalty must be nonnegative, got {bad}"
        )));
    }
    Ok(())
}

/// Full pipeline: latent class model, initial memberships, joint estimation
/// and bias correction.
pub fn fit_targeted_psm(
    data: &StudyCollection,
    n_classes: usize,
    family: GlmFamily,
    config: &TransferConfig,
    lca: LcaSource,
) -> Result<TransferFit> {
    config.validate()?;
    data.validate_outcomes(&family)?;
    let lca = match lca {
        LcaSource::Fit(cfg) => fit_lca(data, n_classes, &cfg)?,
        LcaSource::Prefitted(model) => {
            if model.n_classes != n_classes {
                return Err(PsmError::InvalidArgument(format!(
                    "prefitted latent class model has {} classes, expected {n_classes}",
                    model.n_classes
                )));
            }
            model
        }
    };
    let v = initial_memberships(&lca, data)?;

    let lambda_pool = match config.lambda_pool.resolve(n_classes)? {
        Some(l) => l,
        None => auto_tune_lambda(data, &v, family, TuneStage::Pool, None, config)?,
    };
    let joint = joint_estimate(data, &v, &lambda_pool, config, family)?;

    let lambda_bias = match config.lambda_bias.resolve(n_classes)? {
        Some(l) => l,
        None => auto_tune_lambda(data, &v, family, TuneStage::Bias, Some(&joint.b_hat), config)?,
    };
    let bias = bias_correct(&data.target, &v.probs[0], &joint.b_hat, &lambda_bias, config, family)?;

    let b0_hat = joint.b_hat.plus(&bias.delta_hat, CoefRole::TargetB0)?;
    let mut warnings = joint.warnings;
    warnings.extend(bias.warnings);
    Ok(TransferFit {
        family,
        n_classes,
        b_hat: joint.b_hat,
        delta_hat: bias.delta_hat,
        b0_hat,
        refined_weights: joint.refined_weights,
        lca,
        trace: EmTrace {
            joint: joint.trace,
            bias: bias.trace,
        },
        lambda_pool,
        lambda_bias,
        joint_iterations: joint.iterations,
        bias_iterations: bias.iterations,
        warnings,
    })
}

/// Risk for a new target-study subject: class-specific GLM means averaged
/// with the subject's latent class posterior under the target mixing row.
pub fn predict_risk(fit: &TransferFit, x_new: &[f64], z_new: &[f64]) -> Result<f64> {
    if x_new.len() != fit.b0_hat.p() {
        return Err(PsmError::DimensionMismatch(format!(
            "model has p={}, got {} predictors",
            fit.b0_hat.p(),
            x_new.len()
        )));
    }
    let post = fit.lca.posterior(0, z_new)?;
    Ok(post
        .iter()
        .enumerate()
        .map(|(c, v)| v * fit.family.mean(fit.b0_hat.linear_predictor(x_new, c)))
        .sum())
}
