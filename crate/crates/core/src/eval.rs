//! Metrics and the replicated simulation harness.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_method, FittedModel, MethodId};
use crate::data::CoefficientMatrix;
use crate::error::{PsmError, Result};
use crate::family::GlmFamily;
use crate::lca::{fit_lca, LcaFitConfig, LcaModel};
use crate::rng::derive_seed;
use crate::simulate::{generate_scenario, generate_test_set, MixingPreset, ScenarioConfig};
use crate::transfer::{LambdaSpec, TransferConfig};

const MAX_ALIGN_CLASSES: usize = 8;
/// Largest tolerated fraction of failed replicates per (method, K).
pub const MAX_FAILURE_RATE: f64 = 0.2;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn check_shapes(estimate: &CoefficientMatrix, truth: &CoefficientMatrix) -> Result<()> {
    if estimate.p() != truth.p() || estimate.n_classes() != truth.n_classes() {
        return Err(PsmError::DimensionMismatch(format!(
            "estimate is {}x{}, truth is {}x{}",
            estimate.p(),
            estimate.n_classes(),
            truth.p(),
            truth.n_classes()
        )));
    }
    Ok(())
}

/// Column permutation of `estimate` closest to `truth` in Frobenius norm
/// (slopes only). `perm[c]` is the estimate column placed at position `c`;
/// ties go to the lexicographically first permutation.
pub fn align_classes(
    estimate: &CoefficientMatrix,
    truth: &CoefficientMatrix,
) -> Result<(Vec<usize>, CoefficientMatrix)> {
    check_shapes(estimate, truth)?;
    let c = estimate.n_classes();
    if c > MAX_ALIGN_CLASSES {
        return Err(PsmError::InvalidArgument(format!(
            "exhaustive alignment supports at most {MAX_ALIGN_CLASSES} classes, got {c}"
        )));
    }
    // Pairwise squared column distances, then score each permutation.
    let dist: Vec<Vec<f64>> = (0..c)
        .map(|t| {
            (0..c)
                .map(|e| (estimate.slopes.column(e) - truth.slopes.column(t)).norm_squared())
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let d: f64 = perm.iter().enumerate().map(|(t, &e)| dist[t][e]).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let aligned = estimate.permute_classes(&perm);
    Ok((perm, aligned))
}

/// `||aligned - truth||^2 / (p C)` over slopes after best alignment.
pub fn coef_mse(estimate: &CoefficientMatrix, truth: &CoefficientMatrix) -> Result<f64> {
    let (_, aligned) = align_classes(estimate, truth)?;
    Ok((&aligned.slopes - &truth.slopes).norm_squared() / (truth.p() * truth.n_classes()) as f64)
}

/// Area under the ROC curve, `P(s+ > s-) + P(s+ = s-) / 2`, via midranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PsmError::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PsmError::Domain("score is NaN".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(PsmError::Domain("labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PsmError::UndefinedMetric("AUC needs both outcome classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| labels[i] == 1.0).count() as f64;
        start = end;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Base scenario; `n_sources` and `seed` are set per task.
    pub scenario: ScenarioConfig,
    pub k_grid: Vec<usize>,
    pub methods: Vec<MethodId>,
    pub replicates: usize,
    pub test_n: usize,
    pub seed: u64,
    pub transfer: TransferConfig,
    pub lca: LcaFitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::figure1_mini()
    }
}

impl ExperimentConfig {
    pub fn figure1_mini() -> Self {
        ExperimentConfig {
            name: "figure1-mini".into(),
            scenario: ScenarioConfig::figure1_mini(),
            k_grid: vec![2, 5, 10],
            methods: MethodId::ALL.to_vec(),
            replicates: 20,
            test_n: 1500,
            seed: 0,
            transfer: TransferConfig::default(),
            lca: LcaFitConfig::default(),
        }
    }

    pub fn figure1_full() -> Self {
        ExperimentConfig {
            name: "figure1-full".into(),
            scenario: ScenarioConfig::default(),
            k_grid: vec![2, 4, 6, 8, 10],
            replicates: 100,
            ..ExperimentConfig::figure1_mini()
        }
    }

    /// Large mixing shift with strong heterogeneity; `h / p` matches the
    /// full-scale `h = 15, p = 100` design.
    pub fn large_shift_mini() -> Self {
        let mini = ExperimentConfig::figure1_mini();
        ExperimentConfig {
            name: "large-shift-mini".into(),
            scenario: ScenarioConfig {
                mixing: MixingPreset::LargeDiff,
                h: 7.5,
                ..mini.scenario.clone()
            },
            ..mini
        }
    }

    pub fn large_shift_full() -> Self {
        let full = ExperimentConfig::figure1_full();
        ExperimentConfig {
            name: "large-shift-full".into(),
            scenario: ScenarioConfig {
                mixing: MixingPreset::LargeDiff,
                h: 15.0,
                ..full.scenario.clone()
            },
            ..full
        }
    }

    pub const PRESETS: [&'static str; 4] = ["figure1-mini", "figure1-full", "large-shift-mini", "large-shift-full"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "figure1-mini" => Ok(Self::figure1_mini()),
            "figure1-full" => Ok(Self::figure1_full()),
            "large-shift-mini" => Ok(Self::large_shift_mini()),
            "large-shift-full" => Ok(Self::large_shift_full()),
            other => Err(PsmError::InvalidArgument(format!(
                "unknown preset {other:?}; available: {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(PsmError::InvalidArgument(
                "experiment.replicates: must be positive".into(),
            ));
        }
        if self.k_grid.is_empty() {
            return Err(PsmError::InvalidArgument("experiment.k_grid: must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(PsmError::InvalidArgument(
                "experiment.methods: must not be empty".into(),
            ));
        }
        if self.test_n == 0 {
            return Err(PsmError::InvalidArgument("experiment.test_n: must be positive".into()));
        }
        for &k in &self.k_grid {
            if k == 0 && self.methods.contains(&MethodId::TransGlm) {
                return Err(PsmError::InvalidArgument(
                    "experiment.k_grid: trans_glm needs at least one source".into(),
                ));
            }
            self.scenario_for(k, 0).validate()?;
        }
        self.transfer.validate()
    }

    /// Seed of replicate `r`; shared by every K so the target data are paired.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, "replicate", r as u64)
    }

    /// Scenario of one replicate at `k` sources.
    pub fn scenario_for(&self, k: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_sources: k,
            seed,
            ..self.scenario.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: MethodId,
    pub k: usize,
    pub replicate: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub auc: Option<f64>,
    pub runtime_s: f64,
    /// Estimate columns matched to true classes 1..C, dash separated.
    pub permutation: Option<String>,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: MethodId,
    pub k: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mse_mean: Option<f64>,
    pub mse_se: Option<f64>,
    pub auc_mean: Option<f64>,
    pub auc_se: Option<f64>,
}

/// Mean and Monte Carlo standard error (`sd / sqrt(n)`); the error is
/// `None` below two values.
pub fn mean_se(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some((mean, se))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.scenario, a.k, a.replicate, a.method).cmp(&(&b.scenario, b.k, b.replicate, b.method)));
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, usize, MethodId), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.scenario.clone(), r.k, r.method)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((scenario, k, method), rows)| {
                let ok: Vec<&&ReportRow> = rows.iter().filter(|r| !r.failed()).collect();
                let mse: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
                let auc: Vec<f64> = ok.iter().filter_map(|r| r.auc).collect();
                let (mse_mean, mse_se) = mean_se(&mse).map_or((None, None), |(m, s)| (Some(m), s));
                let (auc_mean, auc_se) = mean_se(&auc).map_or((None, None), |(m, s)| (Some(m), s));
                SummaryRow {
                    scenario,
                    method,
                    k,
                    n_ok: ok.len(),
                    n_failed: rows.len() - ok.len(),
                    mse_mean,
                    mse_se,
                    auc_mean,
                    auc_se,
                }
            })
            .collect()
    }

    pub fn find_summary(&self, method: MethodId, k: usize) -> Option<SummaryRow> {
        self.summary().into_iter().find(|s| s.method == method && s.k == k)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.summary())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(ExperimentReport { rows })
    }
}

/// Appends report rows to a CSV file as tasks finish, so an interrupted run
/// leaves its completed rows on disk.
pub struct ReportAppender {
    writer: Mutex<csv::Writer<File>>,
}

impl ReportAppender {
    /// Creates (or truncates) `path` and writes `existing` to it first.
    pub fn create(path: &Path, existing: &[ReportRow]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path)?;
        for r in existing {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(ReportAppender { writer: Mutex::new(w) })
    }

    pub fn append(&self, rows: &[ReportRow]) -> Result<()> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluate a fitted model on a test sample.
fn score(
    fitted: &FittedModel,
    truth: &CoefficientMatrix,
    test: &crate::data::Study,
    family: GlmFamily,
) -> Result<(Option<f64>, Option<f64>, Option<String>)> {
    let (mse, perm) = if fitted.method().has_mse() {
        let (perm, _) = align_classes(fitted.coefficients(), truth)?;
        let label = perm.iter().map(|p| (p + 1).to_string()).collect::<Vec<_>>().join("-");
        (Some(coef_mse(fitted.coefficients(), truth)?), Some(label))
    } else {
        (None, None)
    };
    let auc = match family {
        GlmFamily::Logistic => {
            let scores = fitted.predict_study(test)?;
            Some(auc(&scores, test.y.as_slice())?)
        }
        GlmFamily::Gaussian { .. } => None,
    };
    Ok((mse, auc, perm))
}

/// All methods on one replicate at one K.
fn run_task(config: &ExperimentConfig, k: usize, replicate: usize) -> Vec<ReportRow> {
    let seed = config.replicate_seed(replicate);
    let scenario = config.scenario_for(k, seed);
    let family = scenario.family;
    let n_classes = scenario.n_classes;
    let row = |method: MethodId| ReportRow {
        scenario: config.name.clone(),
        method,
        k,
        replicate,
        seed,
        mse: None,
        auc: None,
        runtime_s: 0.0,
        permutation: None,
        error: None,
    };
    let fail_all = |e: PsmError| -> Vec<ReportRow> {
        config
            .methods
            .iter()
            .map(|&m| ReportRow {
                error: Some(e.to_string()),
                ..row(m)
            })
            .collect()
    };

    let generated = generate_scenario(&scenario)
        .and_then(|(data, truth)| generate_test_set(&scenario, &truth, config.test_n).map(|(t, _)| (data, truth, t)));
    let (data, truth, test) = match generated {
        Ok(g) => g,
        Err(e) => return fail_all(e),
    };
    let transfer = TransferConfig {
        seed,
        ..config.transfer.clone()
    };
    let lca_config = LcaFitConfig { seed, ..config.lca };
    let needs_shared_lca = config
        .methods
        .iter()
        .any(|m| matches!(m, MethodId::TargetedPsm | MethodId::TargetedPsm1));
    let shared_lca: Option<std::result::Result<LcaModel, String>> =
        needs_shared_lca.then(|| fit_lca(&data, n_classes, &lca_config).map_err(|e| e.to_string()));

    // Iterated and one-step fits share the pooled-stage tuning, which only
    // depends on the initial memberships.
    let mut methods = config.methods.clone();
    methods.sort();
    let mut pool_lambda: Option<Vec<f64>> = None;
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let start = Instant::now();
        let lca = match (&shared_lca, method) {
            (Some(Err(e)), MethodId::TargetedPsm | MethodId::TargetedPsm1) => {
                rows.push(ReportRow {
                    error: Some(e.clone()),
                    ..row(method)
                });
                continue;
            }
            (Some(Ok(m)), _) => Some(m),
            _ => None,
        };
        let mut cfg = transfer.clone();
        if method == MethodId::TargetedPsm1 {
            if let (LambdaSpec::Auto, Some(l)) = (&cfg.lambda_pool, &pool_lambda) {
                cfg.lambda_pool = LambdaSpec::PerClass(l.clone());
            }
        }
        let result = fit_method(method, &data, n_classes, family, &cfg, &lca_config, lca).and_then(|fitted| {
            if method == MethodId::TargetedPsm {
                pool_lambda = fitted.mixture().map(|f| f.lambda_pool.clone());
            }
            score(&fitted, &truth.coefficients[0], &test, family)
        });
        let runtime_s = start.elapsed().as_secs_f64();
        rows.push(match result {
            Ok((mse, auc, permutation)) => ReportRow {
                mse,
                auc,
                permutation,
                runtime_s,
                ..row(method)
            },
            Err(e) => {
                warn!("{} K={k} replicate {replicate}: {e}", method);
                ReportRow {
                    error: Some(e.to_string()),
                    runtime_s,
                    ..row(method)
                }
            }
        });
    }
    rows
}

/// Sink called with the rows of each finished (K, replicate) task.
pub type RowSink<'a> = dyn Fn(&[ReportRow]) -> Result<()> + Sync + 'a;

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(config, Vec::new(), None)
}

/// Run every (K, replicate) task not already covered by `previous`, passing
/// each finished task's rows to `sink`. Errors if more than
/// [`MAX_FAILURE_RATE`] of the replicates of any (method, K) failed.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    previous: Vec<ReportRow>,
    sink: Option<&RowSink<'_>>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let done: HashSet<(usize, usize)> = {
        let mut per_task: BTreeMap<(usize, usize), HashSet<MethodId>> = BTreeMap::new();
        for r in previous.iter().filter(|r| r.scenario == config.name) {
            per_task.entry((r.k, r.replicate)).or_default().insert(r.method);
        }
        per_task
            .into_iter()
            .filter(|(_, m)| config.methods.iter().all(|x| m.contains(x)))
            .map(|(t, _)| t)
            .collect()
    };
    let mut rows: Vec<ReportRow> = previous
        .into_iter()
        .filter(|r| {
            r.scenario == config.name && done.contains(&(r.k, r.replicate)) && config.methods.contains(&r.method)
        })
        .collect();
    let tasks: Vec<(usize, usize)> = config
        .k_grid
        .iter()
        .flat_map(|&k| (0..config.replicates).map(move |r| (k, r)))
        .filter(|t| !done.contains(t))
        .collect();
    info!(
        "{}: {} tasks to run, {} already complete",
        config.name,
        tasks.len(),
        done.len()
    );
    let fresh: Vec<Vec<ReportRow>> = tasks
        .par_iter()
        .map(|&(k, r)| {
            let rows = run_task(config, k, r);
            if let Some(sink) = sink {
                sink(&rows)?;
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    rows.extend(fresh.into_iter().flatten());
    let mut report = ExperimentReport { rows };
    report.sort();

    for s in report.summary() {
        let total = s.n_ok + s.n_failed;
        if s.n_failed as f64 > MAX_FAILURE_RATE * total as f64 {
            return Err(PsmError::SolverFailure {
                reason: format!("{} at K={}: {} of {total} replicates failed", s.method, s.k, s.n_failed),
                best: None,
            });
        }
    }
    Ok(report)
}
