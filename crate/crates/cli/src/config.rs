use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use topoprep::learn::{PartitionSpec, TrainConfig, DEFAULT_SEPARATION};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Morph,
    Build,
    Train,
    Experiment,
    Accounting,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Morph => "morph",
            Mode::Build => "build",
            Mode::Train => "train",
            Mode::Experiment => "experiment",
            Mode::Accounting => "accounting",
        }
    }
}

/// Synthetic blob data: training pool, held-out test split and the shifted
/// global set the proxies are computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub global_per_class: usize,
    pub center_shift: f64,
    pub separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 10,
            dims: 32,
            per_class: 100,
            test_per_class: 50,
            global_per_class: 10,
            center_shift: 1.0,
            separation: DEFAULT_SEPARATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphSection {
    pub max_rounds: usize,
    /// Accept a partial matrix (imputed) when `max_rounds` is hit.
    pub early_stop: bool,
}

impl Default for MorphSection {
    fn default() -> Self {
        MorphSection {
            max_rounds: 1000,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub prologue_epochs: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            prologue_epochs: d.prologue_epochs,
            local_epochs: d.local_epochs,
            learning_rate: d.learning_rate,
            rounds: d.rounds,
            batch_size: d.batch_size,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            prologue_epochs: self.prologue_epochs,
            local_epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            rounds: self.rounds,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proxy_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub morph: MorphSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Checks that the fields the mode needs are present and sane; every
    /// offending field is reported.
    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        if self.seed.is_none() {
            bad.push("seed: required".to_string());
        }
        let needs_data = matches!(self.mode, Mode::Morph | Mode::Train | Mode::Experiment);
        if needs_data || self.mode == Mode::Accounting {
            match self.n {
                None => bad.push("n: required for this mode".into()),
                Some(n) if n < 2 => bad.push("n: must be at least 2".into()),
                _ => {}
            }
        }
        if let (Some(d), Some(n)) = (self.degree, self.n) {
            if d == 0 || d >= n {
                bad.push(format!("degree: must be in 1..{n}"));
            }
        }
        if needs_data {
            match &self.partition {
                None => bad.push("partition: required for this mode".into()),
                Some(p) => {
                    if let Err(e) = p.validate() {
                        bad.push(format!("partition: {e}"));
                    }
                }
            }
            let d = &self.data;
            if d.classes < 2 {
                bad.push("data.classes: must be at least 2".into());
            }
            if d.dims < 2 {
                bad.push("data.dims: must be at least 2".into());
            }
            for (name, v) in [
                ("data.per_class", d.per_class),
                ("data.test_per_class", d.test_per_class),
                ("data.global_per_class", d.global_per_class),
            ] {
                if v == 0 {
                    bad.push(format!("{name}: must be at least 1"));
                }
            }
            if !d.center_shift.is_finite() {
                bad.push("data.center_shift: must be finite".into());
            }
            if !(d.separation > 0.0 && d.separation.is_finite()) {
                bad.push("data.separation: must be positive".into());
            }
            if let Err(topoprep::Error::Config(msg)) = self.train.to_config(0).validate() {
                bad.push(msg);
            }
        }
        if self.morph.max_rounds == 0 {
            bad.push("morph.max_rounds: must be at least 1".into());
        }
        if self.selection.k == Some(0) {
            bad.push("selection.k: must be at least 1".into());
        }
        if self.selection.samples_per_cluster == Some(0) {
            bad.push("selection.samples_per_cluster: must be at least 1".into());
        }
        if self.partitions.is_some_and(|p| p < 2) {
            bad.push("partitions: must be at least 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(bad))
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }
}
