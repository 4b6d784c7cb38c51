use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dbraf::data::SynthSpec;
use dbraf::evalkit::ScoreOptions;
use dbraf::train::TrainConfig;

/// Everything a command needs, as one JSON document. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

/// Where the series come from. With no CSV paths the synthetic generator
/// is run in memory from `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthSpec,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
    /// Divide by the training std as well as subtracting the mean.
    pub standardize: bool,
    /// Window stride; defaults to the window length.
    pub stride: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthSpec::default(),
            train_path: None,
            test_path: None,
            label_path: None,
            standardize: false,
            stride: None,
        }
    }
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.train_path.is_some() || self.test_path.is_some() || self.label_path.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Percentage of points to flag; defaults to the labelled rate of the
    /// test set.
    pub ratio: Option<f64>,
    pub score: ScoreOptions,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ratio: None,
            score: ScoreOptions::default(),
            plots: true,
        }
    }
}

/// Rows of the ablation table, each a list of flag names. A full-model row
/// is always run first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub rows: Vec<Vec<String>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Overrides both the training seed and the synthetic-data seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.data.synth.seed = s;
        }
        self
    }

    /// Every invalid field, joined into one error.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = self.train.problems().into_iter().map(|m| format!("train.{m}")).collect();
        if self.data.uses_files() {
            for (name, v) in [
                ("train_path", &self.data.train_path),
                ("test_path", &self.data.test_path),
                ("label_path", &self.data.label_path),
            ] {
                if v.is_none() {
                    p.push(format!("data.{name}: required when any data path is given"));
                }
            }
        } else {
            p.extend(self.data.synth.problems().into_iter().map(|m| format!("data.synth.{m}")));
        }
        if self.data.stride == Some(0) {
            p.push("data.stride: must be positive".into());
        }
        if let Some(r) = self.eval.ratio {
            if !(r > 0.0 && r < 100.0) {
                p.push(format!("eval.ratio: must be in (0, 100), got {r}"));
            }
        }
        for (i, row) in self.ablate.rows.iter().enumerate() {
            let mut a = self.train.ablation.clone();
            for f in row {
                if let Err(e) = a.set(f) {
                    p.push(format!("ablate.rows[{i}]: {e}"));
                }
            }
        }
        if !p.is_empty() {
            bail!("invalid configuration:\n  {}", p.join("\n  "));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"stridee": 3}}"#).is_err());
    }

    #[test]
    fn lists_every_problem() {
        let mut c = RunConfig::default();
        c.train.ablation.channel_only = true;
        c.train.ablation.temporal_only = true;
        c.data.train_path = Some("a.csv".into());
        c.eval.ratio = Some(0.0);
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["channel_only", "data.test_path", "data.label_path", "eval.ratio"] {
            assert!(msg.contains(needle), "{msg}");
        }
    }
}
