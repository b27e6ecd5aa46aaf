//! The TOML configuration file.
//!
//! Every section is optional. Keys given in a section replace the matching
//! top-level fields of the defaults (or of the chosen preset); anything not
//! given keeps its default. The whole file is parsed and validated before
//! any subcommand starts work.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use psm_core::eval::ExperimentConfig;
use psm_core::simulate::ScenarioConfig;
use psm_core::{GlmFamily, LcaFitConfig, MethodId, TransferConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub scenario: Option<toml::Table>,
    #[serde(default)]
    pub transfer: Option<toml::Table>,
    #[serde(default)]
    pub lca: Option<toml::Table>,
    #[serde(default)]
    pub experiment: Option<toml::Table>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub lca_select: SelectSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Study manifest.
    pub data: Option<PathBuf>,
    pub method: Option<MethodId>,
    pub n_classes: Option<usize>,
    pub family: Option<GlmFamily>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Fitted model written by `fit`.
    pub model: Option<PathBuf>,
    /// Study CSV to score.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub data: Option<PathBuf>,
    pub classes: Option<Vec<usize>>,
}

/// Replace top-level fields of `base` with the keys of `section`.
fn overlay<T: Serialize + DeserializeOwned + Clone>(name: &str, base: &T, section: Option<&toml::Table>) -> Result<T> {
    let Some(section) = section else {
        return Ok(base.clone());
    };
    let mut table = match toml::Value::try_from(base).map_err(|e| anyhow!("[{name}]: {e}"))? {
        toml::Value::Table(t) => t,
        _ => bail!("[{name}]: defaults are not a table"),
    };
    for (k, v) in section {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("[{name}]: {e}"))
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("invalid configuration {}", path.display()))?;
        Ok(cfg)
    }

    /// Resolves every section present in the file.
    fn validate(&self) -> Result<()> {
        if self.scenario.is_some() {
            self.scenario(ScenarioConfig::default())?;
        }
        self.transfer()?;
        self.lca()?;
        if self.experiment.is_some() {
            self.experiment(None)?;
        }
        if self.fit.n_classes == Some(0) {
            bail!("fit.n_classes: must be positive");
        }
        if let Some(GlmFamily::Gaussian { dispersion }) = self.fit.family {
            if !(dispersion > 0.0 && dispersion.is_finite()) {
                bail!("fit.family.dispersion: must be positive");
            }
        }
        if let Some(c) = &self.lca_select.classes {
            if c.is_empty() || c.contains(&0) {
                bail!("lca_select.classes: must be a nonempty list of positive class counts");
            }
        }
        Ok(())
    }

    pub fn scenario(&self, base: ScenarioConfig) -> Result<ScenarioConfig> {
        let s = overlay("scenario", &base, self.scenario.as_ref())?;
        s.validate()?;
        Ok(s)
    }

    pub fn transfer(&self) -> Result<TransferConfig> {
        let t = overlay("transfer", &TransferConfig::default(), self.transfer.as_ref())?;
        t.validate().context("[transfer]")?;
        Ok(t)
    }

    pub fn lca(&self) -> Result<LcaFitConfig> {
        let l = overlay("lca", &LcaFitConfig::default(), self.lca.as_ref())?;
        l.validate().context("[lca]")?;
        Ok(l)
    }

    /// The experiment: `preset` (or `experiment.preset`, or `figure1-mini`)
    /// with the `[experiment]`, `[scenario]`, `[transfer]` and `[lca]`
    /// sections applied on top.
    pub fn experiment(&self, preset: Option<&str>) -> Result<ExperimentConfig> {
        let mut section = self.experiment.clone().unwrap_or_default();
        let from_file = match section.remove("preset") {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => bail!("experiment.preset: expected a string, got {other}"),
            None => None,
        };
        let name = preset
            .map(str::to_string)
            .or(from_file)
            .unwrap_or_else(|| "figure1-mini".into());
        let base = ExperimentConfig::preset(&name)?;
        let mut exp = overlay("experiment", &base, Some(&section))?;
        exp.scenario = overlay("scenario", &exp.scenario, self.scenario.as_ref())?;
        exp.transfer = overlay("transfer", &exp.transfer, self.transfer.as_ref())?;
        exp.lca = overlay("lca", &exp.lca, self.lca.as_ref())?;
        exp.validate()?;
        exp.transfer.validate().context("[transfer]")?;
        exp.lca.validate().context("[lca]")?;
        Ok(exp)
    }
}
