//! Dataset containers shared by every stage of the pipeline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PsmError, Result};
use crate::family::GlmFamily;

/// Lower/upper bound applied to every probability the pipeline emits.
pub const EPS_CLIP: f64 = 1e-6;

/// One study: outcomes, predictors (`n x p`) and binary structure variables (`n x q`).
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: usize,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl Study {
    pub fn new(study_id: usize, y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(PsmError::InvalidArgument(format!(
                "study {study_id} has no observations"
            )));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(PsmError::DimensionMismatch(format!(
                "study {study_id}: y has {n} rows, X has {}, Z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if let Some(v) = z.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(PsmError::Domain(format!(
                "study {study_id}: structure variables must be 0/1, found {v}"
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(PsmError::Domain(format!(
                "study {study_id}: non-finite value in outcomes or predictors"
            )));
        }
        Ok(Study { study_id, y, x, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn validate_outcomes(&self, family: &GlmFamily) -> Result<()> {
        for &y in self.y.iter() {
            family
                .validate_outcome(y)
                .map_err(|e| e.context(format!("study {}", self.study_id)))?;
        }
        Ok(())
    }

    /// Rows selected by `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Study {
        Study {
            study_id: self.study_id,
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            x: self.x.select_rows(idx),
            z: self.z.select_rows(idx),
        }
    }
}

/// The target study (id 0) together with `K` source studies.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyCollection {
    pub target: Study,
    pub sources: Vec<Study>,
}

impl StudyCollection {
    pub fn new(target: Study, sources: Vec<Study>) -> Result<Self> {
        if target.study_id != 0 {
            return Err(PsmError::InvalidArgument(format!(
                "target study must have id 0, got {}",
                target.study_id
            )));
        }
        let (p, q) = (target.p(), target.q());
        for (k, s) in sources.iter().enumerate() {
            if s.study_id != k + 1 {
                return Err(PsmError::InvalidArgument(format!(
                    "source studies must carry ids 1..=K in order; position {} has id {}",
                    k + 1,
                    s.study_id
                )));
            }
            if s.p() != p || s.q() != q {
                return Err(PsmError::DimensionMismatch(format!(
                    "study {} has p={}, q={}; target has p={p}, q={q}",
                    s.study_id,
                    s.p(),
                    s.q()
                )));
            }
        }
        Ok(StudyCollection { target, sources })
    }

    /// A collection holding only the target study.
    pub fn target_only(target: Study) -> Result<Self> {
        Self::new(target, Vec::new())
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_studies(&self) -> usize {
        self.sources.len() + 1
    }

    pub fn p(&self) -> usize {
        self.target.p()
    }

    pub fn q(&self) -> usize {
        self.target.q()
    }

    /// Target first, then sources in id order.
    pub fn studies(&self) -> impl Iterator<Item = &Study> {
        std::iter::once(&self.target).chain(self.sources.iter())
    }

    pub fn n_total(&self) -> usize {
        self.studies().map(Study::n).sum()
    }

    pub fn validate_outcomes(&self, family: &GlmFamily) -> Result<()> {
        self.studies().try_for_each(|s| s.validate_outcomes(family))
    }

    /// Stacks every study's rows (target first) into one design.
    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_total();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for s in self.studies() {
            x.rows_mut(row, s.n()).copy_from(&s.x);
            y.rows_mut(row, s.n()).copy_from(&s.y);
            row += s.n();
        }
        (x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefRole {
    PooledB,
    TargetB0,
    CorrectionDelta,
    PerStudyBk,
}

/// Subpopulation-specific GLM coefficients: column `c` belongs to class `c`.
///
/// Intercepts are kept apart from the `p x C` slope matrix so that the
/// slopes line up with generating coefficients, which carry no intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    pub role: CoefRole,
    #[serde(with = "crate::serde_matrix::vector")]
    pub intercepts: DVector<f64>,
    #[serde(with = "crate::serde_matrix::rows")]
    pub slopes: DMatrix<f64>,
}

impl CoefficientMatrix {
    pub fn new(role: CoefRole, intercepts: DVector<f64>, slopes: DMatrix<f64>) -> Result<Self> {
        if intercepts.len() != slopes.ncols() {
            return Err(PsmError::DimensionMismatch(format!(
                "{} intercepts for {} classes",
                intercepts.len(),
                slopes.ncols()
            )));
        }
        if intercepts.iter().chain(slopes.iter()).any(|v| !v.is_finite()) {
            return Err(PsmError::Domain("coefficient matrix has non-finite entries".into()));
        }
        Ok(CoefficientMatrix {
            role,
            intercepts,
            slopes,
        })
    }

    pub fn zeros(role: CoefRole, p: usize, n_classes: usize) -> Self {
        CoefficientMatrix {
            role,
            intercepts: DVector::zeros(n_classes),
            slopes: DMatrix::zeros(p, n_classes),
        }
    }

    pub fn from_slopes(role: CoefRole, slopes: DMatrix<f64>) -> Result<Self> {
        let c = slopes.ncols();
        Self::new(role, DVector::zeros(c), slopes)
    }

    pub fn p(&self) -> usize {
        self.slopes.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.slopes.ncols()
    }

    /// Linear predictor `b_c + x' beta_c` for one row given as a slice of length `p`.
    pub fn linear_predictor(&self, x: &[f64], class: usize) -> f64 {
        let col = self.slopes.column(class);
        self.intercepts[class] + x.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Elementwise sum with another matrix of the same shape.
    pub fn plus(&self, other: &CoefficientMatrix, role: CoefRole) -> Result<Self> {
        if self.slopes.shape() != other.slopes.shape() {
            return Err(PsmError::DimensionMismatch(format!(
                "cannot add {:?} and {:?} coefficient matrices",
                self.slopes.shape(),
                other.slopes.shape()
            )));
        }
        Ok(CoefficientMatrix {
            role,
            intercepts: &self.intercepts + &other.intercepts,
            slopes: &self.slopes + &other.slopes,
        })
    }

    /// Frobenius norm over intercepts and slopes.
    pub fn norm(&self) -> f64 {
        (self.intercepts.norm_squared() + self.slopes.norm_squared()).sqrt()
    }

    pub fn nonzero_counts(&self) -> Vec<usize> {
        self.slopes
            .column_iter()
            .map(|c| c.iter().filter(|v| **v != 0.0).count())
            .collect()
    }

    /// Reorders classes so that new column `c` is old column `perm[c]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (new, &old) in perm.iter().enumerate() {
            out.intercepts[new] = self.intercepts[old];
            out.slopes.set_column(new, &self.slopes.column(old));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipStage {
    InitialV,
    RefinedW,
}

/// Per-study `n_k x C` row-stochastic class membership probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipMatrix {
    pub stage: MembershipStage,
    #[serde(with = "crate::serde_matrix::rows_list")]
    pub probs: Vec<DMatrix<f64>>,
}

impl MembershipMatrix {
    pub fn n_classes(&self) -> usize {
        self.probs.first().map_or(0, |m| m.ncols())
    }

    /// Every subject in class 1 with probability one (the `C = 1` case).
    pub fn single_class(data: &StudyCollection, stage: MembershipStage) -> Self {
        MembershipMatrix {
            stage,
            probs: data.studies().map(|s| DMatrix::from_element(s.n(), 1, 1.0)).collect(),
        }
    }

    pub fn check_matches(&self, data: &StudyCollection) -> Result<()> {
        if self.probs.len() != data.n_studies() {
            return Err(PsmError::DimensionMismatch(format!(
                "memberships cover {} studies, data has {}",
                self.probs.len(),
                data.n_studies()
            )));
        }
        for (m, s) in self.probs.iter().zip(data.studies()) {
            if m.nrows() != s.n() {
                return Err(PsmError::DimensionMismatch(format!(
                    "study {}: {} membership rows for {} subjects",
                    s.study_id,
                    m.nrows(),
                    s.n()
                )));
            }
        }
        Ok(())
    }

    /// All studies' rows stacked in collection order.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n: usize = self.probs.iter().map(|m| m.nrows()).sum();
        let c = self.n_classes();
        let mut out = DMatrix::zeros(n, c);
        let mut row = 0;
        for m in &self.probs {
            out.rows_mut(row, m.nrows()).copy_from(m);
            row += m.nrows();
        }
        out
    }

    /// Splits a stacked matrix back into per-study blocks of the given sizes.
    pub fn from_stacked(stage: MembershipStage, stacked: &DMatrix<f64>, sizes: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(sizes.len());
        let mut row = 0;
        for &n in sizes {
            probs.push(stacked.rows(row, n).into_owned());
            row += n;
        }
        MembershipMatrix { stage, probs }
    }
}

/// Projects a probability row onto `{p : sum p = 1, eps <= p_c}`.
///
/// Entries below `eps` are raised to `eps` and the remaining mass is shared
/// among the other entries in proportion to their current values. Single
/// entry rows are set to one.
pub fn clip_to_simplex(row: &mut [f64], eps: f64) {
    let c = row.len();
    if c == 0 {
        return;
    }
    if c == 1 {
        row[0] = 1.0;
        return;
    }
    let mut clamped = vec![false; c];
    loop {
        let n_clamped = clamped.iter().filter(|b| **b).count();
        let free_mass: f64 = row
            .iter()
            .zip(&clamped)
            .filter(|(_, c)| !**c)
            .map(|(v, _)| v.max(0.0))
            .sum();
        let target = 1.0 - eps * n_clamped as f64;
        let mut changed = false;
        for (v, cl) in row.iter_mut().zip(clamped.iter_mut()) {
            if *cl {
                *v = eps;
                continue;
            }
            let scaled = if free_mass > 0.0 {
                v.max(0.0) * target / free_mass
            } else {
                0.0
            };
            if scaled < eps {
                *cl = true;
                changed = true;
            }
            *v = scaled;
        }
        if !changed {
            break;
        }
        if clamped.iter().all(|b| *b) {
            row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            break;
        }
    }
}

/// Log-sum-exp with the terms summed in ascending order, so the result does
/// not depend on the order in which `terms` are given.
pub(crate) fn log_sum_exp(terms: &mut [f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    terms.sort_by(|a, b| a.total_cmp(b));
    let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + s.ln()
}
