//! Latent class analysis with shared class prevalences and study-specific
//! mixing proportions.
//!
//! Each subject's binary structure vector `z` is modelled as
//! `sum_c lambda_kc * prod_j pi_cj^z_j (1 - pi_cj)^(1 - z_j)`, where the
//! prevalences `pi` are common to all studies and the mixing row `lambda_k`
//! belongs to the subject's study. Parameters are estimated by EM with
//! random restarts.

use std::collections::HashMap;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{clip_to_simplex, log_sum_exp, MembershipMatrix, MembershipStage, StudyCollection, EPS_CLIP};
use crate::error::{PsmError, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcaModel {
    pub n_classes: usize,
    /// `C x q` class-conditional prevalences.
    #[serde(with = "crate::serde_matrix::rows")]
    pub prevalences: DMatrix<f64>,
    /// `(K + 1) x C` mixing proportions, target study first.
    #[serde(with = "crate::serde_matrix::rows")]
    pub mixing: DMatrix<f64>,
    pub log_lik: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood at every EM iterate of the selected start.
    #[serde(default)]
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcaFitConfig {
    pub n_starts: usize,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl LcaFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(PsmError::InvalidArgument(
                "LCA fit needs n_starts >= 1, max_iter >= 1 and tol > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LcaFitConfig {
    fn default() -> Self {
        LcaFitConfig {
            n_starts: 10,
            tol: 1e-7,
            max_iter: 500,
            seed: 0,
        }
    }
}

/// `prod_j pi_j^z_j (1 - pi_j)^(1 - z_j)`, evaluated in log space.
pub fn lca_class_density(pi_c: &[f64], z: &[f64]) -> Result<f64> {
    if pi_c.len() != z.len() {
        return Err(PsmError::DimensionMismatch(format!(
            "{} prevalences for {} structure variables",
            pi_c.len(),
            z.len()
        )));
    }
    if let Some(p) = pi_c.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(PsmError::Domain(format!("prevalence {p} is outside (0, 1)")));
    }
    if let Some(v) = z.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(PsmError::Domain(format!("structure variable {v} is not binary")));
    }
    Ok(class_log_density(pi_c.iter().copied(), z.iter().copied()).exp())
}

fn class_log_density(pi: impl Iterator<Item = f64>, z: impl Iterator<Item = f64>) -> f64 {
    pi.zip(z)
        .map(|(p, z)| if z == 1.0 { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

impl LcaModel {
    pub fn n_studies(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn q(&self) -> usize {
        self.prevalences.ncols()
    }

    /// Unclipped posterior class probabilities of `z` for a subject of study `study`.
    pub fn posterior(&self, study: usize, z: &[f64]) -> Result<Vec<f64>> {
        if study >= self.n_studies() {
            return Err(PsmError::DimensionMismatch(format!(
                "model covers {} studies, asked for study {study}",
                self.n_studies()
            )));
        }
        if z.len() != self.q() {
            return Err(PsmError::DimensionMismatch(format!(
                "model has q={}, got {} structure variables",
                self.q(),
                z.len()
            )));
        }
        Ok(self.posterior_unchecked(study, z.iter().copied()))
    }

    fn posterior_unchecked(&self, study: usize, z: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.n_classes)
            .map(|c| {
                self.mixing[(study, c)].ln() + class_log_density(self.prevalences.row(c).iter().copied(), z.clone())
            })
            .collect();
        let lse = log_sum_exp(&mut logs.clone());
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Relabels classes so that new class `c` is old class `perm[c]`.
    pub fn permute_classes(&self, perm: &[usize]) -> LcaModel {
        let mut out = self.clone();
        for (new, &old) in perm.iter().enumerate() {
            out.prevalences.set_row(new, &self.prevalences.row(old));
            out.mixing.set_column(new, &self.mixing.column(old));
        }
        out
    }

    /// Number of free parameters: `C*q` prevalences plus `(K+1)(C-1)` mixing weights.
    pub fn n_parameters(&self) -> usize {
        self.n_classes * self.q() + self.n_studies() * (self.n_classes - 1)
    }

    /// Bayesian information criterion for `n_obs` subjects.
    pub fn bic(&self, n_obs: usize) -> f64 {
        -2.0 * self.log_lik + self.n_parameters() as f64 * (n_obs as f64).ln()
    }

    /// Model with given parameters; `log_lik` is left at zero until
    /// evaluated with [`lca_log_lik`].
    pub fn from_parameters(prevalences: DMatrix<f64>, mixing: DMatrix<f64>) -> Result<Self> {
        let c = prevalences.nrows();
        if c == 0 || mixing.ncols() != c || mixing.nrows() == 0 {
            return Err(PsmError::DimensionMismatch(format!(
                "prevalences have {c} classes, mixing is {}x{}",
                mixing.nrows(),
                mixing.ncols()
            )));
        }
        if prevalences.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(PsmError::Domain("prevalences must lie in (0, 1)".into()));
        }
        for row in mixing.row_iter() {
            if row.iter().any(|v| !(*v > 0.0)) || (row.sum() - 1.0).abs() > 1e-10 {
                return Err(PsmError::Domain("mixing rows must be positive and sum to 1".into()));
            }
        }
        Ok(LcaModel {
            n_classes: c,
            prevalences,
            mixing,
            log_lik: 0.0,
            n_iter: 0,
            converged: false,
            trace: Vec::new(),
        })
    }

    pub(crate) fn check_matches(&self, data: &StudyCollection) -> Result<()> {
        if self.n_studies() != data.n_studies() || self.q() != data.q() {
            return Err(PsmError::DimensionMismatch(format!(
                "model fitted on {} studies with q={}, data has {} studies with q={}",
                self.n_studies(),
                self.q(),
                data.n_studies(),
                data.q()
            )));
        }
        Ok(())
    }
}

/// Distinct structure patterns and their multiplicities per study.
struct PatternCounts {
    patterns: Vec<Vec<f64>>,
    per_study: Vec<Vec<(usize, f64)>>,
    q: usize,
}

impl PatternCounts {
    fn new(data: &StudyCollection) -> Self {
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let mut per_study = Vec::new();
        for s in data.studies() {
            let mut counts: Vec<(usize, f64)> = Vec::new();
            let mut local: HashMap<usize, usize> = HashMap::new();
            for i in 0..s.n() {
                let key: Vec<u8> = s.z.row(i).iter().map(|v| *v as u8).collect();
                let next = patterns.len();
                let u = *index.entry(key).or_insert_with(|| {
                    patterns.push(s.z.row(i).iter().copied().collect());
                    next
                });
                match local.get(&u) {
                    Some(&slot) => counts[slot].1 += 1.0,
                    None => {
                        local.insert(u, counts.len());
                        counts.push((u, 1.0));
                    }
                }
            }
            per_study.push(counts);
        }
        PatternCounts {
            patterns,
            per_study,
            q: data.q(),
        }
    }

    fn class_log_densities(&self, prevalences: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let c = prevalences.nrows();
        self.patterns
            .iter()
            .map(|z| {
                (0..c)
                    .map(|k| class_log_density(prevalences.row(k).iter().copied(), z.iter().copied()))
                    .collect()
            })
            .collect()
    }

    fn log_lik(&self, prevalences: &DMatrix<f64>, mixing: &DMatrix<f64>) -> f64 {
        let lp = self.class_log_densities(prevalences);
        let c = prevalences.nrows();
        let mut total = 0.0;
        let mut terms = vec![0.0; c];
        for (k, counts) in self.per_study.iter().enumerate() {
            for &(u, m) in counts {
                for (cls, t) in terms.iter_mut().enumerate() {
                    *t = mixing[(k, cls)].ln() + lp[u][cls];
                }
                total += m * log_sum_exp(&mut terms);
            }
        }
        total
    }

    /// One EM update; returns the new parameters.
    fn em_step(&self, prevalences: &DMatrix<f64>, mixing: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let c = prevalences.nrows();
        let lp = self.class_log_densities(prevalences);
        let mut new_mix = DMatrix::zeros(mixing.nrows(), c);
        let mut weighted_z = DMatrix::<f64>::zeros(c, self.q);
        let mut mass = vec![0.0; c];
        let mut logs = vec![0.0; c];
        for (k, counts) in self.per_study.iter().enumerate() {
            let mut n_k = 0.0;
            for &(u, m) in counts {
                for (cls, l) in logs.iter_mut().enumerate() {
                    *l = mixing[(k, cls)].ln() + lp[u][cls];
                }
                let lse = log_sum_exp(&mut logs.clone());
                n_k += m;
                for cls in 0..c {
                    let post = m * (logs[cls] - lse).exp();
                    new_mix[(k, cls)] += post;
                    mass[cls] += post;
                    for (j, z) in self.patterns[u].iter().enumerate() {
                        if *z == 1.0 {
                            weighted_z[(cls, j)] += post;
                        }
                    }
                }
            }
            let mut row: Vec<f64> = new_mix.row(k).iter().map(|v| v / n_k).collect();
            clip_to_simplex(&mut row, EPS_CLIP);
            for (cls, v) in row.into_iter().enumerate() {
                new_mix[(k, cls)] = v;
            }
        }
        let mut new_prev = prevalences.clone();
        for cls in 0..c {
            if mass[cls] > 0.0 {
                for j in 0..self.q {
                    new_prev[(cls, j)] = (weighted_z[(cls, j)] / mass[cls]).clamp(EPS_CLIP, 1.0 - EPS_CLIP);
                }
            }
        }
        (new_prev, new_mix)
    }

    fn run_em(&self, mut prevalences: DMatrix<f64>, mut mixing: DMatrix<f64>, config: &LcaFitConfig) -> LcaModel {
        let mut trace = Vec::new();
        let mut prev_ll: Option<f64> = None;
        let mut converged = false;
        let mut n_iter = 0;
        for _ in 0..config.max_iter {
            let ll = self.log_lik(&prevalences, &mixing);
            trace.push(ll);
            if let Some(prev) = prev_ll {
                if (ll - prev).abs() <= config.tol * prev.abs() {
                    converged = true;
                    break;
                }
            }
            prev_ll = Some(ll);
            let (p, m) = self.em_step(&prevalences, &mixing);
            prevalences = p;
            mixing = m;
            n_iter += 1;
        }
        if !converged {
            trace.push(self.log_lik(&prevalences, &mixing));
        }
        LcaModel {
            n_classes: prevalences.nrows(),
            log_lik: *trace.last().unwrap_or(&f64::NAN),
            prevalences,
            mixing,
            n_iter,
            converged,
            trace,
        }
    }
}

/// Fits the latent class model by EM from `config.n_starts` random starts
/// and keeps the start with the highest final log-likelihood. Classes are
/// returned in order of decreasing target-study mixing proportion.
pub fn fit_lca(data: &StudyCollection, n_classes: usize, config: &LcaFitConfig) -> Result<LcaModel> {
    if n_classes == 0 {
        return Err(PsmError::InvalidArgument("number of classes must be at least 1".into()));
    }
    if n_classes > data.n_total() {
        return Err(PsmError::InvalidArgument(format!(
            "{n_classes} classes exceed the total sample size {}",
            data.n_total()
        )));
    }
    config.validate()?;
    let q = data.q();
    if q < 63 && n_classes as u64 > 1u64 << q {
        warn!("{n_classes} classes exceed the 2^{q} distinct structure patterns; the model is not identifiable");
    }
    for s in data.studies() {
        if s.n() < n_classes {
            warn!(
                "study {} has fewer subjects ({}) than classes ({n_classes})",
                s.study_id,
                s.n()
            );
        }
    }

    let counts = PatternCounts::new(data);
    let n_studies = data.n_studies();
    let n_starts = if n_classes == 1 { 1 } else { config.n_starts };

    let fits: Vec<LcaModel> = (0..n_starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = substream(config.seed, "lca-init", start as u64);
            let prev = DMatrix::from_fn(n_classes, q, |_, _| rng.random_range(0.2..0.8));
            let mut mix = DMatrix::zeros(n_studies, n_classes);
            for k in 0..n_studies {
                let mut row: Vec<f64> = (0..n_classes).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                clip_to_simplex(&mut row, EPS_CLIP);
                for (c, v) in row.into_iter().enumerate() {
                    mix[(k, c)] = v;
                }
            }
            counts.run_em(prev, mix, config)
        })
        .collect();

    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.log_lik > fits[best].log_lik {
            best = i;
        }
    }
    let model = fits.into_iter().nth(best).expect("at least one start");
    Ok(canonical_order(model))
}

fn canonical_order(model: LcaModel) -> LcaModel {
    let mut perm: Vec<usize> = (0..model.n_classes).collect();
    perm.sort_by(|&a, &b| model.mixing[(0, b)].total_cmp(&model.mixing[(0, a)]));
    let mut out = model.permute_classes(&perm);
    out.trace = model.trace;
    out
}

/// One EM update from `model`, evaluated on `data`.
pub fn lca_em_step(model: &LcaModel, data: &StudyCollection) -> Result<LcaModel> {
    model.check_matches(data)?;
    let counts = PatternCounts::new(data);
    let (prevalences, mixing) = counts.em_step(&model.prevalences, &model.mixing);
    let log_lik = counts.log_lik(&prevalences, &mixing);
    Ok(LcaModel {
        n_classes: model.n_classes,
        prevalences,
        mixing,
        log_lik,
        n_iter: model.n_iter + 1,
        converged: model.converged,
        trace: Vec::new(),
    })
}

/// `sum_k sum_i log sum_c lambda_kc f(z_ki; pi_c)`.
pub fn lca_log_lik(model: &LcaModel, data: &StudyCollection) -> Result<f64> {
    model.check_matches(data)?;
    Ok(PatternCounts::new(data).log_lik(&model.prevalences, &model.mixing))
}

/// Bayes posterior class probabilities for every subject, clipped to
/// `[EPS_CLIP, 1 - EPS_CLIP]`.
pub fn initial_memberships(model: &LcaModel, data: &StudyCollection) -> Result<MembershipMatrix> {
    model.check_matches(data)?;
    let probs = data
        .studies()
        .enumerate()
        .map(|(k, s)| {
            let mut m = DMatrix::zeros(s.n(), model.n_classes);
            for i in 0..s.n() {
                let mut post = model.posterior_unchecked(k, s.z.row(i).iter().copied());
                clip_to_simplex(&mut post, EPS_CLIP);
                for (c, v) in post.into_iter().enumerate() {
                    m[(i, c)] = v;
                }
            }
            m
        })
        .collect();
    Ok(MembershipMatrix {
        stage: MembershipStage::InitialV,
        probs,
    })
}
