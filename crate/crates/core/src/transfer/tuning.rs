//! Cross-validated per-class penalty selection.
//!
//! Candidates are `c * sqrt(ln max(p, 2) / n_eff)` for each grid multiplier
//! `c`. Each class is tuned on its own with the initial memberships as fixed
//! observation weights, scoring the membership-weighted held-out negative
//! log-likelihood. Folds are stratified by study (and by outcome for binary
//! responses).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{class_offsets, TransferConfig};
use crate::data::{CoefficientMatrix, MembershipMatrix, StudyCollection};
use crate::error::{PsmError, Result};
use crate::family::GlmFamily;
use crate::glm::{solve_weighted_lasso_glm, WeightedGlmProblem};
use crate::rng::substream;

const MAX_FOLD_ATTEMPTS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneStage {
    /// Pooled coefficients over all studies.
    Pool,
    /// Target-only correction with the pooled fit as offset.
    Bias,
}

/// Fold label per row, stratified by `strata`.
fn assign_folds(strata: &[usize], k: usize, seed: u64, attempt: u64) -> Vec<usize> {
    let mut rng = substream(seed, "cv-folds", attempt);
    let n_strata = strata.iter().max().map_or(0, |m| m + 1);
    let mut folds = vec![0; strata.len()];
    // Rotate so small strata do not all land in the first folds.
    for (offset, s) in (0..n_strata).enumerate() {
        let mut idx: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            folds[i] = (pos + offset) % k;
        }
    }
    folds
}

fn folds_usable(family: GlmFamily, y: &DVector<f64>, folds: &[usize], k: usize) -> bool {
    let mut count = vec![[0usize; 2]; k];
    for (i, &f) in folds.iter().enumerate() {
        count[f][usize::from(y[i] > 0.5)] += 1;
    }
    let total = [
        count.iter().map(|c| c[0]).sum::<usize>(),
        count.iter().map(|c| c[1]).sum(),
    ];
    count.iter().all(|c| {
        let held = c[0] + c[1];
        let ok = held > 0 && held < folds.len();
        match family {
            GlmFamily::Logistic => ok && c[0] > 0 && c[1] > 0 && c[0] < total[0] && c[1] < total[1],
            GlmFamily::Gaussian { .. } => ok,
        }
    })
}

/// Per-class penalties chosen by `config.cv_folds`-fold cross-validation.
/// `b_hat` is required for [`TuneStage::Bias`].
pub fn auto_tune_lambda(
    data: &StudyCollection,
    v: &MembershipMatrix,
    family: GlmFamily,
    stage: TuneStage,
    b_hat: Option<&CoefficientMatrix>,
    config: &TransferConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    v.check_matches(data)?;
    let n_classes = v.n_classes();
    let p = data.p();

    let (x, y, weights, offsets, strata) = match stage {
        TuneStage::Pool => {
            let (x, y) = data.stacked();
            let strata = data
                .studies()
                .enumerate()
                .flat_map(|(k, s)| std::iter::repeat_n(k, s.n()))
                .collect::<Vec<_>>();
            (x, y, v.stacked(), None, strata)
        }
        TuneStage::Bias => {
            let b = b_hat
                .ok_or_else(|| PsmError::InvalidArgument("bias-stage tuning needs the pooled coefficients".into()))?;
            let t = &data.target;
            (
                t.x.clone(),
                t.y.clone(),
                v.probs[0].clone(),
                Some(class_offsets(t, b)),
                vec![0; t.n()],
            )
        }
    };
    let n_eff = y.len() as f64;
    let scale = ((p.max(2) as f64).ln() / n_eff).sqrt();
    let mut grid: Vec<f64> = config.grid.iter().map(|c| c * scale).collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.len() == 1 {
        return Ok(vec![grid[0]; n_classes]);
    }

    let k = config.cv_folds;
    if y.len() < k {
        return Err(PsmError::InvalidArgument(format!(
            "{} rows cannot be split into {k} folds",
            y.len()
        )));
    }
    let strata: Vec<usize> = match family {
        GlmFamily::Logistic => strata
            .iter()
            .zip(y.iter())
            .map(|(s, yi)| 2 * s + usize::from(*yi > 0.5))
            .collect(),
        GlmFamily::Gaussian { .. } => strata,
    };
    let folds = (0..MAX_FOLD_ATTEMPTS)
        .map(|a| assign_folds(&strata, k, config.seed, a))
        .find(|f| folds_usable(family, &y, f, k))
        .ok_or_else(|| {
            PsmError::InvalidArgument(format!(
                "could not form {k} cross-validation folds with both outcome values in {MAX_FOLD_ATTEMPTS} attempts"
            ))
        })?;

    let tasks: Vec<(usize, usize)> = (0..n_classes).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let deviances: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(c, f)| fold_path(family, &x, &y, &weights, offsets.as_ref(), &folds, c, f, &grid, config))
        .collect();

    Ok((0..n_classes)
        .map(|c| {
            let mut total = vec![0.0; grid.len()];
            for (t, dev) in tasks.iter().zip(&deviances) {
                if t.0 == c {
                    total.iter_mut().zip(dev).for_each(|(a, d)| *a += d);
                }
            }
            let mut best = 0;
            for g in 1..grid.len() {
                if total[g] < total[best] {
                    best = g;
                }
            }
            log::debug!(
                "class {} penalty {:.4e} (deviance {:.4})",
                c + 1,
                grid[best],
                total[best]
            );
            grid[best]
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn fold_path(
    family: GlmFamily,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &DMatrix<f64>,
    offsets: Option<&DMatrix<f64>>,
    folds: &[usize],
    class: usize,
    fold: usize,
    grid: &[f64],
    config: &TransferConfig,
) -> Vec<f64> {
    let phi = family.dispersion();
    let train_w: Vec<f64> = (0..y.len())
        .map(|i| if folds[i] == fold { 0.0 } else { weights[(i, class)] })
        .collect();
    let off: Option<Vec<f64>> = offsets.map(|o| o.column(class).iter().copied().collect());
    let mut warm: Option<(f64, DVector<f64>)> = None;
    grid.iter()
        .map(|&lam| {
            let mut prob = WeightedGlmProblem::new(family, x, y, &train_w)
                .lambda(phi * lam)
                .intercept(config.intercept);
            if let Some(o) = &off {
                prob = prob.offset(o);
            }
            let init = warm.as_ref().map(|(b, beta)| (*b, beta));
            let sol = match solve_weighted_lasso_glm(&prob, init, &config.solver) {
                Ok(s) => s,
                Err(e) => match e.root() {
                    PsmError::SolverFailure { best: Some(b), .. } => (**b).clone(),
                    _ => return f64::INFINITY,
                },
            };
            let eta = prob.linear_predictor(sol.intercept, &sol.beta);
            let dev = (0..y.len())
                .filter(|&i| folds[i] == fold)
                .map(|i| weights[(i, class)] * family.loss(y[i], eta[i]))
                .sum::<f64>();
            warm = Some((sol.intercept, sol.beta));
            dev
        })
        .collect()
}
