mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};

use psm_core::eval::{ExperimentConfig, ExperimentReport, ReportAppender};
use psm_core::io::{load_collection, read_json, read_study_csv, write_json, write_study_csv, Manifest};
use psm_core::simulate::{generate_scenario, ScenarioConfig, Truth};
use psm_core::{baselines, eval, fit_lca, FittedModel, GlmFamily, MethodId};

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "psm",
    version,
    about = "Targeted transfer learning for GLMs with latent subpopulations"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "PSM_OUT", value_name = "DIR", default_value = "psm-out")]
    out: PathBuf,
    /// Master seed; overrides the seeds in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "PSM_THREADS")]
    threads: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated study collection.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Start from the scenario of an experiment preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Fit one method to a study collection.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Study manifest (JSON).
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<MethodId>,
        /// Number of latent classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Score a study CSV with a fitted model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Fitted model written by `fit`.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Study CSV; the y column is ignored.
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
    },
    /// Run a replicated simulation experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Continue from the rows already in the output report.
        #[arg(long)]
        resume: bool,
    },
    /// Compare latent class models over a range of class counts by BIC.
    LcaSelect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        /// Candidate class counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Fit { common, .. }
            | Command::Predict { common, .. }
            | Command::Experiment { common, .. }
            | Command::LcaSelect { common, .. } => common,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    let common = command.common();
    let file = FileConfig::load(common.config.as_deref())?;
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &command {
        Command::Simulate { common, preset } => simulate(common, &file, preset.as_deref()),
        Command::Fit {
            common,
            data,
            method,
            classes,
        } => fit(common, &file, data.clone(), *method, *classes),
        Command::Predict { common, model, data } => predict(common, &file, model.clone(), data.clone()),
        Command::Experiment {
            common,
            preset,
            replicates,
            resume,
        } => experiment(common, &file, preset.as_deref(), *replicates, *resume),
        Command::LcaSelect { common, data, classes } => lca_select(common, &file, data.clone(), classes.clone()),
    }
}

/// Creates the output directory and refuses to clobber `files` unless forced.
fn prepare_out(common: &Common, files: &[&str]) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    if !common.force {
        if let Some(f) = files.iter().map(|f| common.out.join(f)).find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", f.display());
        }
    }
    Ok(())
}

fn required<T>(value: Option<T>, flag: &str, key: &str) -> Result<T> {
    value.with_context(|| format!("missing {flag} (or {key} in the configuration file)"))
}

fn simulate(common: &Common, file: &FileConfig, preset: Option<&str>) -> Result<()> {
    let base = match preset {
        Some(name) => ExperimentConfig::preset(name)?.scenario,
        None => ScenarioConfig::default(),
    };
    let mut scenario = file.scenario(base)?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    let names: Vec<String> = std::iter::once("target.csv".to_string())
        .chain((1..=scenario.n_sources).map(|k| format!("source_{k}.csv")))
        .collect();
    let mut outputs: Vec<&str> = names.iter().map(String::as_str).collect();
    outputs.extend(["truth.json", "manifest.json", "scenario.json"]);
    prepare_out(common, &outputs)?;

    let (data, truth) = generate_scenario(&scenario)?;
    for (study, name) in data.studies().zip(&names) {
        write_study_csv(&common.out.join(name), study)?;
    }
    write_json(&common.out.join("truth.json"), &truth)?;
    write_json(&common.out.join("scenario.json"), &scenario)?;
    let manifest = Manifest::new(
        PathBuf::from(&names[0]),
        names[1..].iter().map(PathBuf::from).collect(),
        Some(PathBuf::from("truth.json")),
    );
    let manifest_path = common.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let reread = load_collection(&manifest_path).context("validating written data")?;
    let expected: Vec<usize> = data.studies().map(|s| s.n()).collect();
    let found: Vec<usize> = reread.studies().map(|s| s.n()).collect();
    if expected != found {
        bail!("written study sizes {found:?} differ from generated {expected:?}");
    }
    println!(
        "wrote target + {} sources ({} subjects, p={}, q={}) to {}",
        scenario.n_sources,
        data.n_total(),
        data.p(),
        data.q(),
        common.out.display()
    );
    Ok(())
}

fn fit(
    common: &Common,
    file: &FileConfig,
    data: Option<PathBuf>,
    method: Option<MethodId>,
    classes: Option<usize>,
) -> Result<()> {
    let section = &file.fit;
    let data_path = required(data.or(section.data.clone()), "--data", "fit.data")?;
    let method = method.or(section.method).unwrap_or(MethodId::TargetedPsm);
    let n_classes = classes.or(section.n_classes).unwrap_or(3);
    if n_classes == 0 {
        bail!("--classes must be positive");
    }
    let family = section.family.unwrap_or(GlmFamily::Logistic);
    let mut transfer = file.transfer()?;
    let mut lca = file.lca()?;
    if let Some(seed) = common.seed {
        transfer.seed = seed;
        lca.seed = seed;
    }
    prepare_out(common, &["model.json", "trace.csv"])?;

    let data = load_collection(&data_path)?;
    if method.uses_mixture() && data.q() == 0 {
        bail!(
            "fit.method: {method} needs structure-variable columns z1..zq, but {} has none",
            data_path.display()
        );
    }
    if method == MethodId::TransGlm && data.n_sources() == 0 {
        bail!("fit.method: trans_glm needs at least one source study");
    }
    data.validate_outcomes(&family)?;
    info!("fitting {method} with C={n_classes} on {} studies", data.n_studies());
    let model = baselines::fit_method(method, &data, n_classes, family, &transfer, &lca, None)
        .with_context(|| format!("fitting {method}"))?;

    let model_path = common.out.join("model.json");
    write_json(&model_path, &model)?;
    let trace_path = common.out.join("trace.csv");
    let mut trace = BufWriter::new(fs::File::create(&trace_path)?);
    writeln!(trace, "stage,iteration,objective")?;
    if let Some(fit) = model.mixture() {
        for (stage, values) in [("joint", &fit.trace.joint), ("bias", &fit.trace.bias)] {
            for (i, v) in values.iter().enumerate() {
                writeln!(trace, "{stage},{},{v}", i + 1)?;
            }
        }
    }
    trace.flush()?;
    let back: FittedModel = read_json(&model_path).context("validating written model")?;
    if back.coefficients() != model.coefficients() {
        bail!("{} does not read back to the fitted coefficients", model_path.display());
    }

    print_fit_summary(&model, &data);
    let manifest = Manifest::read(&data_path)?;
    if let Some(truth_path) = manifest.truth_path(data_path.parent().unwrap_or(Path::new("."))) {
        if method.has_mse() && truth_path.exists() {
            let truth: Truth = read_json(&truth_path)?;
            match eval::coef_mse(model.coefficients(), &truth.coefficients[0]) {
                Ok(mse) => println!("coefficient MSE against truth: {mse:.6}"),
                Err(e) => warn!("cannot compare with truth: {e}"),
            }
        }
    }
    println!("wrote {} and {}", model_path.display(), trace_path.display());
    Ok(())
}

fn fmt_lambda(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5}")
    } else {
        "inf".into()
    }
}

fn print_fit_summary(model: &FittedModel, data: &psm_core::StudyCollection) {
    let coefs = model.coefficients();
    println!(
        "method {}, {} classes, {} source studies, p={}",
        model.method(),
        coefs.n_classes(),
        data.n_sources(),
        data.p()
    );
    let nonzero = coefs.nonzero_counts();
    match model {
        FittedModel::Mixture { fit, .. } => {
            println!("class  nonzero  lambda_pool  lambda_bias");
            for (c, nz) in nonzero.iter().enumerate() {
                println!(
                    "{:>5}  {:>7}  {:>11}  {:>11}",
                    c + 1,
                    nz,
                    fmt_lambda(fit.lambda_pool[c]),
                    fmt_lambda(fit.lambda_bias[c])
                );
            }
            println!(
                "EM iterations: joint {}, bias {}",
                fit.joint_iterations, fit.bias_iterations
            );
            let last = |v: &[f64]| v.last().map_or("n/a".to_string(), |x| format!("{x:.6}"));
            println!(
                "final objective: joint {}, bias {}",
                last(&fit.trace.joint),
                last(&fit.trace.bias)
            );
            for w in &fit.warnings {
                println!("warning: {w}");
            }
        }
        FittedModel::Single { lambdas, .. } => {
            let l: Vec<String> = lambdas.iter().map(|&v| fmt_lambda(v)).collect();
            println!("nonzero {}, lambda {}", nonzero[0], l.join(", "));
        }
    }
}

fn predict(common: &Common, file: &FileConfig, model: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let model_path = required(model.or(file.predict.model.clone()), "--model", "predict.model")?;
    let data_path = required(data.or(file.predict.data.clone()), "--data", "predict.data")?;
    prepare_out(common, &["predictions.csv"])?;
    let model: FittedModel = read_json(&model_path)?;
    let study = read_study_csv(&data_path, 0)?;
    let risk = model
        .predict_study(&study)
        .with_context(|| format!("scoring {}", data_path.display()))?;
    let out = common.out.join("predictions.csv");
    let mut w = BufWriter::new(fs::File::create(&out)?);
    writeln!(w, "row,risk")?;
    for (i, r) in risk.iter().enumerate() {
        writeln!(w, "{},{r}", i + 1)?;
    }
    w.flush()?;
    println!(
        "scored {} rows with {}; wrote {}",
        risk.len(),
        model.method(),
        out.display()
    );
    Ok(())
}

fn experiment(
    common: &Common,
    file: &FileConfig,
    preset: Option<&str>,
    replicates: Option<usize>,
    resume: bool,
) -> Result<()> {
    let mut config = file.experiment(preset)?;
    if let Some(r) = replicates {
        config.replicates = r;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;

    let report_path = common.out.join("report.csv");
    let config_path = common.out.join("experiment.json");
    let previous = if resume && report_path.exists() {
        if config_path.exists() {
            let saved: ExperimentConfig = read_json(&config_path)?;
            if saved != config {
                bail!(
                    "{} was produced with a different configuration; resume needs the same settings",
                    common.out.display()
                );
            }
        }
        let rows = ExperimentReport::read_csv(&report_path)
            .with_context(|| format!("reading {}", report_path.display()))?
            .rows;
        info!("resuming with {} existing rows", rows.len());
        rows
    } else {
        prepare_out(common, &["report.csv", "summary.csv", "experiment.json"])?;
        Vec::new()
    };
    fs::create_dir_all(&common.out)?;
    write_json(&config_path, &config)?;

    let appender = ReportAppender::create(&report_path, &previous)?;
    let sink = |rows: &[eval::ReportRow]| appender.append(rows);
    let report = eval::run_experiment_with(&config, previous, Some(&sink))?;
    drop(appender);
    report.write_csv(&report_path)?;
    let summary_path = common.out.join("summary.csv");
    report.write_summary_csv(&summary_path)?;

    let reread = ExperimentReport::read_csv(&report_path)?;
    if reread.rows.len() != report.rows.len() {
        bail!(
            "{} holds {} rows, expected {}",
            report_path.display(),
            reread.rows.len(),
            report.rows.len()
        );
    }
    println!("method            K   ok  failed  mse_mean   mse_se     auc_mean  auc_se");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
    for s in report.summary() {
        println!(
            "{:<16} {:>2} {:>4} {:>7}  {:<9}  {:<9}  {:<8}  {}",
            s.method.as_str(),
            s.k,
            s.n_ok,
            s.n_failed,
            opt(s.mse_mean),
            opt(s.mse_se),
            opt(s.auc_mean),
            opt(s.auc_se)
        );
    }
    if config.methods.contains(&MethodId::TransGlm) {
        println!("note: trans_glm pools all sources without informative-set selection");
    }
    println!("wrote {} and {}", report_path.display(), summary_path.display());
    Ok(())
}

fn lca_select(common: &Common, file: &FileConfig, data: Option<PathBuf>, classes: Option<Vec<usize>>) -> Result<()> {
    let data_path = required(data.or(file.lca_select.data.clone()), "--data", "lca_select.data")?;
    let grid = classes
        .or(file.lca_select.classes.clone())
        .unwrap_or_else(|| (1..=5).collect());
    if grid.is_empty() || grid.contains(&0) {
        bail!("--classes must list positive class counts");
    }
    let mut lca = file.lca()?;
    if let Some(seed) = common.seed {
        lca.seed = seed;
    }
    prepare_out(common, &["lca_select.csv"])?;
    let data = load_collection(&data_path)?;
    if data.q() == 0 {
        bail!("{} has no structure-variable columns z1..zq", data_path.display());
    }
    let n = data.n_total();
    let out = common.out.join("lca_select.csv");
    let mut w = BufWriter::new(fs::File::create(&out)?);
    writeln!(w, "n_classes,log_lik,n_parameters,bic,converged")?;
    println!("classes  log_lik        params  bic            converged");
    let mut best: Option<(usize, f64)> = None;
    for &c in &grid {
        let model = fit_lca(&data, c, &lca).with_context(|| format!("fitting {c} classes"))?;
        let bic = model.bic(n);
        writeln!(
            w,
            "{c},{},{},{bic},{}",
            model.log_lik,
            model.n_parameters(),
            model.converged
        )?;
        println!(
            "{c:>7}  {:<13.4}  {:>6}  {bic:<13.4}  {}",
            model.log_lik,
            model.n_parameters(),
            model.converged
        );
        if best.is_none_or(|(_, b)| bic < b) {
            best = Some((c, bic));
        }
    }
    w.flush()?;
    if let Some((c, _)) = best {
        println!("lowest BIC at {c} classes");
    }
    println!(
        "note: BIC choice carries no recovery guarantee; with weakly separated classes or small samples it can miss the true count"
    );
    println!("wrote {}", out.display());
    Ok(())
}
