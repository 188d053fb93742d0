//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use condense::costmodel::ProfileConfig;
use condense::distill::DistillConfig;
use condense::netgraph::UnetSpec;
use condense::penalize::{FactorSource, PenalizationConfig, Regime, Strategy};
use condense::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub penal: PenalSection,
    pub hinge: HingeSection,
    pub profile: ProfileSection,
    pub distill: DistillSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub depth: usize,
    pub cap: usize,
    pub input_size: usize,
    pub instance_norm: bool,
    pub disc_base_channels: usize,
    pub disc_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub lambda_l1: f64,
    pub halve_discriminator: bool,
    pub checkpoint_every: usize,
    pub penalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenalSection {
    pub strategy: String,
    pub regime: String,
    pub factor_source: String,
    pub target_ratio: f64,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HingeSection {
    pub min_drop_ratio: f64,
    pub floor: f64,
    /// Forced keep counts keyed `layer<id>`.
    pub manual_keep: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub source: String,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_gt_l1: f64,
    pub weight_teacher_l1: f64,
    pub weight_gan: f64,
    pub halve_discriminator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub workdir: PathBuf,
    /// Relative paths resolve against the workdir.
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 4,
            cap: 512,
            input_size: 64,
            instance_norm: false,
            disc_base_channels: 8,
            disc_cap: 64,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_pairs: 64, heldout_pairs: 32 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 30,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda_l1: t.lambda_l1,
            halve_discriminator: t.halve_discriminator,
            checkpoint_every: 5,
            penalize: true,
        }
    }
}

impl Default for PenalSection {
    fn default() -> Self {
        let p = PenalizationConfig::default();
        Self {
            strategy: p.strategy.to_string(),
            regime: p.regime.to_string(),
            factor_source: p.layer_factor_source.to_string(),
            target_ratio: p.target_ratio,
            alpha: p.alpha,
        }
    }
}

impl Default for HingeSection {
    fn default() -> Self {
        Self {
            min_drop_ratio: condense::hingeprune::DEFAULT_MIN_DROP_RATIO,
            floor: condense::hingeprune::DEFAULT_FLOOR,
            manual_keep: BTreeMap::new(),
        }
    }
}

impl Default for ProfileSection {
    fn default() -> Self {
        let p = ProfileConfig::default();
        Self { source: FactorSource::Mac.to_string(), repeats: p.repeats, warmup: p.warmup }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            epochs: 20,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_gt_l1: d.weight_gt_l1,
            weight_teacher_l1: d.weight_teacher_l1,
            weight_gan: d.weight_gan,
            halve_discriminator: d.halve_discriminator,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { workdir: PathBuf::from("condense-run"), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), message: e.message().to_string() })
    }

    /// Checks every field before any compute starts.
    pub fn validate(&self) -> CliResult<()> {
        self.unet().build()?;
        if self.model.disc_base_channels == 0 || self.model.disc_cap < self.model.disc_base_channels {
            return Err(CliError::Config("discriminator channels must be positive and within the cap".into()));
        }
        if self.data.train_pairs == 0 || self.data.heldout_pairs == 0 {
            return Err(CliError::Config("train_pairs and heldout_pairs must be positive".into()));
        }
        self.train_config()?.validate()?;
        self.distill_config().validate()?;
        let latency_penal = self.train.penalize && self.penalization()?.layer_factor_source == FactorSource::Latency;
        if self.profile_source()? == FactorSource::Latency || latency_penal {
            self.profile_config().validate()?;
        }
        if !(self.hinge.min_drop_ratio > 1.0) {
            return Err(CliError::Config(format!(
                "hinge.min_drop_ratio must exceed 1, got {}",
                self.hinge.min_drop_ratio
            )));
        }
        if !(self.hinge.floor >= 0.0) {
            return Err(CliError::Config(format!("hinge.floor must be non-negative, got {}", self.hinge.floor)));
        }
        self.manual_keep()?;
        Ok(())
    }

    pub fn unet(&self) -> UnetSpec {
        let m = &self.model;
        let mut spec = UnetSpec::new(m.base_channels, m.depth, m.cap, m.input_size);
        spec.instance_norm = m.instance_norm;
        spec
    }

    pub fn penalization(&self) -> CliResult<PenalizationConfig> {
        let p = &self.penal;
        Ok(PenalizationConfig {
            strategy: p.strategy.parse::<Strategy>()?,
            regime: p.regime.parse::<Regime>()?,
            alpha: p.alpha,
            layer_factor_source: p.factor_source.parse::<FactorSource>()?,
            target_ratio: p.target_ratio,
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            lambda_l1: t.lambda_l1,
            penal: if t.penalize { Some(self.penalization()?) } else { None },
            halve_discriminator: t.halve_discriminator,
            checkpoint_every: t.checkpoint_every,
        })
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            weight_gt_l1: d.weight_gt_l1,
            weight_teacher_l1: d.weight_teacher_l1,
            weight_gan: d.weight_gan,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            seed: self.seed,
            halve_discriminator: d.halve_discriminator,
        }
    }

    pub fn profile_config(&self) -> ProfileConfig {
        ProfileConfig { repeats: self.profile.repeats, warmup: self.profile.warmup, seed: self.seed }
    }

    pub fn profile_source(&self) -> CliResult<FactorSource> {
        Ok(self.profile.source.parse::<FactorSource>()?)
    }

    /// Manual keep counts by layer id.
    pub fn manual_keep(&self) -> CliResult<BTreeMap<usize, usize>> {
        self.hinge.manual_keep.iter().map(|(k, &v)| Ok((parse_layer_key(k)?, v))).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.workdir.join(&self.paths.checkpoints)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.workdir.join(&self.paths.reports)
    }

    /// SHA-256 of the effective configuration with the paths section left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `layer<id>`.
pub fn parse_layer_key(key: &str) -> CliResult<usize> {
    key.strip_prefix("layer")
        .and_then(|id| id.parse().ok())
        .ok_or_else(|| CliError::Config(format!("manual keep key '{key}' must look like layer<id>")))
}

/// Parses `layer<id>=<count>`.
pub fn parse_manual_keep(arg: &str) -> Result<(String, usize), String> {
    let (key, count) = arg.split_once('=').ok_or_else(|| format!("expected layer<id>=<count>, got '{arg}'"))?;
    parse_layer_key(key).map_err(|e| e.to_string())?;
    let count = count.parse().map_err(|_| format!("keep count '{count}' is not a non-negative integer"))?;
    Ok((key.to_string(), count))
}
