//! Run configuration: defaults, JSON config file, and flag overrides, in
//! that order. The fully resolved configuration is echoed before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sodawidenet::config::{NetworkConfig, Variant};
use sodawidenet::error::{Error, Result};
use sodawidenet::loss::LossConfig;
use sodawidenet::train::{OptimizerConfig, ScheduleConfig};

/// Partial file-level configuration; every section and field is optional.
#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub network: FileNetwork,
    #[serde(default)]
    pub optimizer: FileOptimizer,
    #[serde(default)]
    pub schedule: FileSchedule,
    #[serde(default)]
    pub loss: FileLoss,
    #[serde(default)]
    pub data: FileData,
    #[serde(default)]
    pub io: FileIo,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileNetwork {
    pub variant: Option<String>,
    pub base_channels: Option<usize>,
    pub width_multiplier: Option<f64>,
    pub input_resolution: Option<usize>,
    pub attention_heads: Option<usize>,
    pub groupnorm_groups: Option<usize>,
    pub enable_msa: Option<bool>,
    pub enable_mrffam: Option<bool>,
    pub enable_mrffam_decoder: Option<bool>,
    pub enable_lpm: Option<bool>,
    pub enable_contour_head: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileOptimizer {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileSchedule {
    pub epochs: Option<usize>,
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileLoss {
    pub alpha_window: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileData {
    pub manifest: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileIo {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", p.display())))
            }
        }
    }
}

/// Flag-level overrides shared by the training-style commands.
#[derive(Debug, Default, Clone)]
pub struct NetworkFlags {
    pub variant: Option<Variant>,
    pub resolution: Option<usize>,
    pub no_msa: bool,
    pub no_mrffam: bool,
    pub no_decoder_mrffam: bool,
    pub no_lpm: bool,
    pub no_contours: bool,
}

pub fn resolve_network(file: &FileNetwork, flags: &NetworkFlags) -> Result<NetworkConfig> {
    let variant = match (&flags.variant, &file.variant) {
        (Some(v), _) => *v,
        (None, Some(s)) => s.parse()?,
        (None, None) => Variant::Full,
    };
    let mut config = match variant {
        Variant::Full => NetworkConfig::full(),
        Variant::Small => NetworkConfig::small(),
    };
    if let Some(v) = file.base_channels {
        config.base_channels = v;
    }
    if let Some(v) = file.width_multiplier {
        config.width_multiplier = v;
    }
    if let Some(v) = file.attention_heads {
        config.attention_heads = v;
    }
    if let Some(v) = file.groupnorm_groups {
        config.groupnorm_groups = v;
    }
    if let Some(v) = file.input_resolution {
        config.input_resolution = v;
    }
    if let Some(v) = file.enable_msa {
        config.enable_msa = v;
    }
    if let Some(v) = file.enable_mrffam {
        config.enable_mrffam = v;
    }
    if let Some(v) = file.enable_mrffam_decoder {
        config.enable_mrffam_decoder = v;
    }
    if let Some(v) = file.enable_lpm {
        config.enable_lpm = v;
    }
    if let Some(v) = file.enable_contour_head {
        config.enable_contour_head = v;
    }
    if let Some(r) = flags.resolution {
        config.input_resolution = r;
    }
    if flags.no_msa {
        config.enable_msa = false;
    }
    if flags.no_mrffam {
        config.enable_mrffam = false;
    }
    if flags.no_decoder_mrffam {
        config.enable_mrffam_decoder = false;
    }
    if flags.no_lpm {
        config.enable_lpm = false;
    }
    if flags.no_contours {
        config.enable_contour_head = false;
    }
    config.validate()?;
    Ok(config)
}

/// Everything a training run needs, fully resolved.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub manifest: PathBuf,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub log_path: PathBuf,
}

#[derive(Debug, Default, Clone)]
pub struct TrainFlags {
    pub network: NetworkFlags,
    pub manifest: Option<PathBuf>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: Option<f64>,
    pub batch: Option<usize>,
    pub alpha_window: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_run(
    file: &FileConfig,
    flags: &TrainFlags,
    seed: Option<u64>,
    deterministic: bool,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> Result<RunConfig> {
    let network = resolve_network(&file.network, &flags.network)?;
    let mut optimizer = OptimizerConfig::default();
    if let Some(v) = file.optimizer.lr {
        optimizer.lr = v;
    }
    if let Some(v) = file.optimizer.beta1 {
        optimizer.beta1 = v;
    }
    if let Some(v) = file.optimizer.beta2 {
        optimizer.beta2 = v;
    }
    if let Some(v) = file.optimizer.epsilon {
        optimizer.epsilon = v;
    }
    if let Some(v) = flags.lr {
        optimizer.lr = v;
    }

    let mut schedule = ScheduleConfig::default();
    if let Some(v) = file.schedule.epochs {
        schedule.epochs = v;
    }
    if let Some(v) = file.schedule.lr_drop_epoch {
        schedule.lr_drop_epoch = v;
    }
    if let Some(v) = file.schedule.lr_drop_factor {
        schedule.lr_drop_factor = v;
    }
    if let Some(v) = flags.epochs {
        schedule.epochs = v;
    }
    if let Some(v) = flags.lr_drop_epoch {
        schedule.lr_drop_epoch = v;
    }
    if let Some(v) = flags.lr_drop_factor {
        schedule.lr_drop_factor = v;
    }
    if schedule.epochs == 0 {
        return Err(Error::InvalidConfig("schedule.epochs must be >= 1".into()));
    }

    let mut loss = LossConfig::default();
    if let Some(v) = file.loss.alpha_window {
        loss.alpha_window = v;
    }
    if let Some(v) = flags.alpha_window {
        loss.alpha_window = v;
    }
    if loss.alpha_window % 2 == 0 || loss.alpha_window == 0 {
        return Err(Error::InvalidConfig(format!(
            "loss.alpha_window must be odd and >= 1, got {}",
            loss.alpha_window
        )));
    }

    let manifest = flags
        .manifest
        .clone()
        .or_else(|| file.data.manifest.clone())
        .ok_or_else(|| Error::InvalidConfig("data.manifest is required (--manifest)".into()))?;
    let batch_size = flags.batch.or(file.data.batch_size).unwrap_or(1);
    if batch_size == 0 {
        return Err(Error::InvalidConfig("data.batch_size must be >= 1".into()));
    }
    let seed = seed.or(file.data.seed).unwrap_or(0);
    let out_dir = out
        .or_else(|| file.io.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let log_path = log
        .or_else(|| file.io.log.clone())
        .unwrap_or_else(|| out_dir.join("train.log.jsonl"));

    Ok(RunConfig {
        network,
        optimizer,
        schedule,
        loss,
        manifest,
        batch_size,
        seed,
        deterministic,
        out_dir,
        log_path,
    })
}
