//! Experiment configuration: TOML file, command-line overrides, resolution.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use efqat_core::data::Dataset;
use efqat_core::net::NetSpec;
use efqat_core::optim::SgdConfig;
use efqat_core::quant::ScaleTransform;
use efqat_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{CliError, Result};

/// Full-precision training used when no checkpoint is supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl PretrainConfig {
    pub fn optimizer(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Everything one run needs. Without a `[net]` table the network is derived
/// from the dataset: the reference CNN for images, a one-hidden-layer MLP for
/// flat features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            dataset: DatasetConfig::default(),
            net: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigFile {
            path: path.into(),
            msg: e.to_string().trim_end().to_string(),
        })
    }

    /// Reads a config file; relative dataset paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io("read config file", path))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base)?;
        Ok(cfg)
    }

    /// TOML text; single-precision fields print in their shortest form
    /// (`0.001`, not the widened `0.0010000000474974513`).
    pub fn to_toml(&self) -> String {
        let json = serde_json::to_string(self).expect("configs serialize");
        let value: toml::Value = serde_json::from_str(&json).expect("JSON objects map to TOML tables");
        toml::to_string(&value).expect("configs serialize to TOML")
    }

    /// The resolved network. Call after [`Resolved::new`].
    pub fn net(&self) -> &NetSpec {
        self.net.as_ref().expect("network resolved")
    }
}

/// A `--freeze-freq` value: a sample count or `never`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeFreq(pub Option<u64>);

impl FromStr for FreezeFreq {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "never" {
            return Ok(Self(None));
        }
        match s.parse::<u64>() {
            Ok(0) | Err(_) => Err(format!("`{s}` is neither a positive sample count nor `never`")),
            Ok(f) => Ok(Self(Some(f))),
        }
    }
}

/// Flags shared by the run subcommands; each overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// fp, fp+1, ptq, qat, efqat-cwpl, efqat-cwpn or efqat-lwpn.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Unfrozen ratio in [0, 1].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Samples between freeze-plan refreshes, or `never`.
    #[arg(long)]
    pub freeze_freq: Option<FreezeFreq>,
    #[arg(long)]
    pub bits_w: Option<u32>,
    #[arg(long)]
    pub bits_a: Option<u32>,
    /// Quantization-aware training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Full-precision epochs when no checkpoint is given.
    #[arg(long)]
    pub fp_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight learning rate.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Quantization-parameter learning rate.
    #[arg(long)]
    pub qparam_lr: Option<f32>,
    /// Scale parametrization seen by the optimizer: raw or log2.
    #[arg(long)]
    pub qparam_transform: Option<ScaleTransform>,
    /// Calibration samples (default 512).
    #[arg(long)]
    pub calib_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.mode {
            t.mode = v;
        }
        if let Some(v) = self.ratio {
            t.ratio = v;
        }
        if let Some(FreezeFreq(v)) = self.freeze_freq {
            t.freeze_freq = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.weight_opt.lr = v;
        }
        if let Some(v) = self.qparam_lr {
            t.qparam_opt.lr = v;
        }
        if let Some(v) = self.qparam_transform {
            t.qparam_transform = v;
        }
        if let Some(v) = self.calib_size {
            t.calib_size = v;
        }
        if let Some(v) = self.fp_epochs {
            cfg.pretrain.epochs = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
    }
}

/// Default network for a dataset's sample shape.
pub fn derive_net(shape: &[usize], classes: usize) -> Result<NetSpec> {
    match *shape {
        [c, h, w] => NetSpec::reference_cnn_for([c, h, w], classes).map_err(|e| {
            CliError::Invalid(format!(
                "{e}; add a [net] table to the config for this input shape"
            ))
        }),
        [d] => Ok(NetSpec::mlp(d, &[64], classes)),
        _ => Err(CliError::Invalid(format!(
            "no default network for sample shape {shape:?}; add a [net] table to the config"
        ))),
    }
}

/// A config with overrides applied, the network fixed and the data loaded.
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub eval: Dataset,
}

impl Resolved {
    pub fn new(ov: &Overrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        ov.apply(&mut cfg);
        cfg.train.validate()?;
        let (train, eval) = cfg.dataset.load()?;
        let mut net = match cfg.net.take() {
            Some(n) => n,
            None => derive_net(train.sample_shape(), train.classes())?,
        };
        if let Some(b) = ov.bits_w {
            net.bits_w = b;
        }
        if let Some(b) = ov.bits_a {
            net.bits_a = b;
        }
        check_net(&net, &train)?;
        cfg.net = Some(net);
        Ok(Self { cfg, train, eval })
    }

    /// Creates the output directory and writes `config.toml` into it.
    pub fn prepare_out(&self) -> Result<&Path> {
        let out = self.cfg.out.as_path();
        std::fs::create_dir_all(out).map_err(CliError::io("create output directory", out))?;
        let path = out.join("config.toml");
        std::fs::write(&path, self.cfg.to_toml()).map_err(CliError::io("write", path))?;
        Ok(out)
    }
}

fn check_net(net: &NetSpec, data: &Dataset) -> Result<()> {
    for (name, bits) in [("bits_w", net.bits_w), ("bits_a", net.bits_a)] {
        if !(2..=16).contains(&bits) {
            return Err(CliError::Invalid(format!("net.{name} = {bits} outside 2..=16")));
        }
    }
    let classes = net.classes()?;
    if net.input != data.sample_shape() {
        return Err(CliError::Invalid(format!(
            "network input {:?} does not match dataset samples {:?}",
            net.input,
            data.sample_shape()
        )));
    }
    if classes < data.classes() {
        return Err(CliError::Invalid(format!(
            "network has {classes} outputs but the dataset has {} classes",
            data.classes()
        )));
    }
    Ok(())
}
