//! Synthetic multi-study data.
//!
//! Each subject draws a latent class from its study's mixing row, binary
//! structure variables from the class prevalences, covariates from
//! `N(0, Sigma)` with `Sigma_ij = rho^|i-j|`, and an outcome from the GLM with
//! `eta = x' beta_{k,class}` (no intercept). Source coefficients are
//! `B_k = B_0 + (h/p) S_k` with `S_k` a matrix of independent fair signs.
//!
//! Class, structure, covariate and outcome draws use separate RNG streams
//! keyed by (study, subject), so adding sources leaves existing studies
//! unchanged.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoefRole, CoefficientMatrix, Study, StudyCollection};
use crate::error::{PsmError, Result};
use crate::family::GlmFamily;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separation {
    Well,
    Less,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevalencePreset {
    WellSeparated,
    LessSeparated,
    /// `C x q` class prevalences.
    Custom(Vec<Vec<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    SmallDiff,
    LargeDiff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingPreset {
    SmallDiff,
    LargeDiff,
    /// Target row followed by one row per source.
    Custom(Vec<Vec<f64>>),
}

const WELL_SEPARATED: [[f64; 5]; 3] = [
    [0.1, 0.5, 0.9, 0.1, 0.5],
    [0.9, 0.1, 0.5, 0.9, 0.1],
    [0.5, 0.9, 0.1, 0.5, 0.9],
];

const SMALL_DIFF: [[f64; 3]; 11] = [
    [0.50, 0.30, 0.20],
    [0.45, 0.35, 0.20],
    [0.55, 0.25, 0.20],
    [0.45, 0.20, 0.35],
    [0.55, 0.20, 0.25],
    [0.50, 0.20, 0.30],
    [0.45, 0.35, 0.20],
    [0.55, 0.25, 0.20],
    [0.45, 0.20, 0.35],
    [0.55, 0.20, 0.25],
    [0.50, 0.20, 0.30],
];

const LARGE_DIFF: [[f64; 3]; 11] = [
    [0.80, 0.10, 0.10],
    [0.10, 0.10, 0.80],
    [0.11, 0.09, 0.80],
    [0.09, 0.11, 0.80],
    [0.10, 0.11, 0.79],
    [0.11, 0.10, 0.79],
    [0.12, 0.10, 0.78],
    [0.10, 0.12, 0.78],
    [0.09, 0.10, 0.81],
    [0.10, 0.09, 0.81],
    [0.09, 0.09, 0.82],
];

/// `3 x 5` prevalence matrix; the less separated version maps 0.1 to 0.3 and
/// 0.9 to 0.7.
pub fn preset_prevalences(separation: Separation) -> DMatrix<f64> {
    DMatrix::from_fn(3, 5, |c, j| {
        let v = WELL_SEPARATED[c][j];
        match (separation, v) {
            (Separation::Less, 0.1) => 0.3,
            (Separation::Less, 0.9) => 0.7,
            _ => v,
        }
    })
}

/// Target row plus the first `k` source rows of the preset table.
pub fn preset_mixing(kind: MixingKind, k: usize) -> Result<DMatrix<f64>> {
    let table = match kind {
        MixingKind::SmallDiff => &SMALL_DIFF,
        MixingKind::LargeDiff => &LARGE_DIFF,
    };
    if k + 1 > table.len() {
        return Err(PsmError::InvalidArgument(format!(
            "mixing presets list {} sources, {k} requested",
            table.len() - 1
        )));
    }
    Ok(DMatrix::from_fn(k + 1, 3, |r, c| table[r][c]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n0: usize,
    pub n_k: usize,
    pub n_sources: usize,
    pub p: usize,
    pub n_classes: usize,
    pub prevalence: PrevalencePreset,
    pub mixing: MixingPreset,
    pub h: f64,
    pub support_sizes: Vec<usize>,
    pub coef_value: f64,
    pub rho: f64,
    pub family: GlmFamily,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n0: 1500,
            n_k: 1000,
            n_sources: 5,
            p: 100,
            n_classes: 3,
            prevalence: PrevalencePreset::WellSeparated,
            mixing: MixingPreset::SmallDiff,
            h: 5.0,
            support_sizes: vec![1, 2, 6],
            coef_value: 0.5,
            rho: 0.5,
            family: GlmFamily::Logistic,
            seed: 0,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> PsmError {
    PsmError::InvalidArgument(format!("scenario.{field}: {msg}"))
}

impl ScenarioConfig {
    /// Reduced design for quick runs: `n0 = 500`, `n_k = 400`, `p = 50`.
    pub fn figure1_mini() -> Self {
        ScenarioConfig {
            n0: 500,
            n_k: 400,
            p: 50,
            ..Default::default()
        }
    }

    pub fn prevalences(&self) -> Result<DMatrix<f64>> {
        match &self.prevalence {
            PrevalencePreset::WellSeparated => Ok(preset_prevalences(Separation::Well)),
            PrevalencePreset::LessSeparated => Ok(preset_prevalences(Separation::Less)),
            PrevalencePreset::Custom(rows) => {
                let q = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != q) {
                    return Err(field_err("prevalence", "rows have unequal lengths"));
                }
                Ok(DMatrix::from_fn(rows.len(), q, |c, j| rows[c][j]))
            }
        }
    }

    pub fn mixing_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.mixing {
            MixingPreset::SmallDiff => preset_mixing(MixingKind::SmallDiff, self.n_sources),
            MixingPreset::LargeDiff => preset_mixing(MixingKind::LargeDiff, self.n_sources),
            MixingPreset::Custom(rows) => {
                if rows.len() != self.n_sources + 1 {
                    return Err(field_err(
                        "mixing",
                        format!("{} rows given for {} studies", rows.len(), self.n_sources + 1),
                    ));
                }
                let c = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != c) {
                    return Err(field_err("mixing", "rows have unequal lengths"));
                }
                Ok(DMatrix::from_fn(rows.len(), c, |r, j| rows[r][j]))
            }
        }
        .map_err(|e| match e {
            PsmError::InvalidArgument(m) if !m.starts_with("scenario.") => field_err("mixing", m),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n0", self.n0),
            ("n_k", self.n_k),
            ("p", self.p),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(field_err(name, "must be positive"));
            }
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return Err(field_err("rho", format!("must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return Err(field_err(
                "h",
                format!("must be finite and nonnegative, got {}", self.h),
            ));
        }
        if !self.coef_value.is_finite() {
            return Err(field_err("coef_value", "must be finite"));
        }
        if self.support_sizes.len() != self.n_classes {
            return Err(field_err(
                "support_sizes",
                format!("{} sizes for {} classes", self.support_sizes.len(), self.n_classes),
            ));
        }
        if let Some(s) = self.support_sizes.iter().find(|&&s| s > self.p) {
            return Err(field_err("support_sizes", format!("{s} exceeds p = {}", self.p)));
        }
        if let GlmFamily::Gaussian { dispersion } = self.family {
            if !(dispersion > 0.0 && dispersion.is_finite()) {
                return Err(field_err("family.dispersion", "must be positive"));
            }
        }
        let pi = self.prevalences()?;
        if pi.nrows() != self.n_classes || pi.ncols() == 0 {
            return Err(field_err(
                "prevalence",
                format!("expected {} rows with at least one column", self.n_classes),
            ));
        }
        if pi.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(field_err("prevalence", "entries must lie in [0, 1]"));
        }
        let lam = self.mixing_matrix()?;
        if lam.ncols() != self.n_classes {
            return Err(field_err(
                "mixing",
                format!("rows must have {} entries", self.n_classes),
            ));
        }
        for (r, row) in lam.row_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(field_err(
                    "mixing",
                    format!("row {r} is not on the probability simplex"),
                ));
            }
        }
        Ok(())
    }

    pub fn n_studies(&self) -> usize {
        self.n_sources + 1
    }

    fn study_size(&self, k: usize) -> usize {
        if k == 0 {
            self.n0
        } else {
            self.n_k
        }
    }
}

/// Ground truth behind a generated collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(with = "crate::serde_matrix::rows")]
    pub prevalences: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix::rows")]
    pub mixing: DMatrix<f64>,
    /// `B_0, B_1, ..., B_K`.
    pub coefficients: Vec<CoefficientMatrix>,
    /// Latent class (0-based) of every subject, per study.
    pub classes: Vec<Vec<usize>>,
}

/// `B_0` followed by `B_k = B_0 + (h/p) S_k` for each source.
pub fn make_coefficients(config: &ScenarioConfig) -> Result<Vec<CoefficientMatrix>> {
    config.validate()?;
    let (p, c) = (config.p, config.n_classes);
    let b0 = DMatrix::from_fn(p, c, |j, k| {
        if j < config.support_sizes[k] {
            config.coef_value
        } else {
            0.0
        }
    });
    let step = config.h / p as f64;
    let mut out = vec![CoefficientMatrix::from_slopes(CoefRole::TargetB0, b0.clone())?];
    for k in 1..=config.n_sources {
        let mut rng = substream(config.seed, "signs", k as u64);
        let bk = b0.map(|b| if rng.random::<bool>() { b + step } else { b - step });
        out.push(CoefficientMatrix::from_slopes(CoefRole::PerStudyBk, bk)?);
    }
    Ok(out)
}

/// Lower Cholesky factor of the AR(rho) covariance.
fn ar_cholesky(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32));
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| PsmError::Domain("covariate covariance is not positive definite".into()))
}

struct StreamLabels {
    class: &'static str,
    z: &'static str,
    x: &'static str,
    y: &'static str,
}

const TRAIN: StreamLabels = StreamLabels {
    class: "class",
    z: "z",
    x: "x",
    y: "y",
};

const TEST: StreamLabels = StreamLabels {
    class: "test-class",
    z: "test-z",
    x: "test-x",
    y: "test-y",
};

struct StudySpec<'a> {
    seed: u64,
    index: usize,
    n: usize,
    mixing: Vec<f64>,
    prevalences: &'a DMatrix<f64>,
    chol: &'a DMatrix<f64>,
    coefs: &'a CoefficientMatrix,
    family: GlmFamily,
}

fn draw_class(rng: &mut impl Rng, mixing: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, m) in mixing.iter().enumerate() {
        acc += m;
        if u < acc {
            return c;
        }
    }
    // Rounding left `u` above the cumulative sum; use the last class with mass.
    mixing.iter().rposition(|m| *m > 0.0).unwrap_or(0)
}

fn generate_study(spec: &StudySpec<'_>, labels: &StreamLabels) -> Result<(Study, Vec<usize>)> {
    let (p, q) = (spec.chol.nrows(), spec.prevalences.ncols());
    let mut x = DMatrix::zeros(spec.n, p);
    let mut z = DMatrix::zeros(spec.n, q);
    let mut y = DVector::zeros(spec.n);
    let mut classes = Vec::with_capacity(spec.n);
    let sd = spec.family.dispersion().sqrt();
    for i in 0..spec.n {
        let idx = ((spec.index as u64) << 32) | i as u64;
        let class = draw_class(&mut substream(spec.seed, labels.class, idx), &spec.mixing);
        classes.push(class);

        let mut rng = substream(spec.seed, labels.z, idx);
        for j in 0..q {
            z[(i, j)] = if rng.random::<f64>() < spec.prevalences[(class, j)] {
                1.0
            } else {
                0.0
            };
        }

        let mut rng = substream(spec.seed, labels.x, idx);
        let e = DVector::<f64>::from_fn(p, |_, _| rng.sample(StandardNormal));
        let xi = spec.chol * e;
        x.row_mut(i).copy_from(&xi.transpose());

        let eta = xi.dot(&spec.coefs.slopes.column(class)) + spec.coefs.intercepts[class];
        let mut rng = substream(spec.seed, labels.y, idx);
        y[i] = match spec.family {
            GlmFamily::Logistic => {
                if rng.random::<f64>() < spec.family.mean(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            GlmFamily::Gaussian { .. } => eta + sd * rng.sample::<f64, _>(StandardNormal),
        };
    }
    Ok((Study::new(spec.index, y, x, z)?, classes))
}

/// Training collection and its ground truth.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<(StudyCollection, Truth)> {
    config.validate()?;
    let prevalences = config.prevalences()?;
    let mixing = config.mixing_matrix()?;
    let coefficients = make_coefficients(config)?;
    let chol = ar_cholesky(config.p, config.rho)?;

    let studies: Vec<(Study, Vec<usize>)> = (0..config.n_studies())
        .into_par_iter()
        .map(|k| {
            let spec = StudySpec {
                seed: config.seed,
                index: k,
                n: config.study_size(k),
                mixing: mixing.row(k).iter().copied().collect(),
                prevalences: &prevalences,
                chol: &chol,
                coefs: &coefficients[k],
                family: config.family,
            };
            generate_study(&spec, &TRAIN)
        })
        .collect::<Result<_>>()?;

    let mut studies = studies.into_iter();
    let (target, c0) = studies.next().expect("target study");
    let mut classes = vec![c0];
    let mut sources = Vec::with_capacity(config.n_sources);
    for (s, c) in studies {
        sources.push(s);
        classes.push(c);
    }
    let data = StudyCollection::new(target, sources)?;
    Ok((
        data,
        Truth {
            prevalences,
            mixing,
            coefficients,
            classes,
        },
    ))
}

/// Fresh target-population sample (same mixing row, prevalences and `B_0`)
/// drawn from streams disjoint from the training data.
pub fn generate_test_set(config: &ScenarioConfig, truth: &Truth, n: usize) -> Result<(Study, Vec<usize>)> {
    if n == 0 {
        return Err(PsmError::InvalidArgument("test set size must be positive".into()));
    }
    let chol = ar_cholesky(config.p, config.rho)?;
    let spec = StudySpec {
        seed: config.seed,
        index: 0,
        n,
        mixing: truth.mixing.row(0).iter().copied().collect(),
        prevalences: &truth.prevalences,
        chol: &chol,
        coefs: &truth.coefficients[0],
        family: config.family,
    };
    generate_study(&spec, &TEST)
}
