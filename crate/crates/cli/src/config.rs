//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use stformer::backbone::ModelConfig;
use stformer::heads::{Components, KpOrder, StrConfig};
use stformer::train::TrainConfig;
use stformer::Execution;

use crate::error::{CliError, Result};

pub const DEFAULT_PRESET: &str = "300k";
pub const DEFAULT_EVAL_FRACTION: f64 = 0.1;

/// One layer of settings. Unset fields fall through to the layer below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    /// Model preset: 300k, 16m, 124m, 1.5b or desk-10k, desk-50k, desk-250k, desk-1m
    #[arg(long)]
    pub preset: Option<String>,
    /// Sequence components: CS, CKS, CPS or CPKS
    #[arg(long)]
    pub components: Option<String>,
    /// Key-point order: fwd or bkwd
    #[arg(long)]
    pub kp_order: Option<String>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub cnn_channels: Option<usize>,
    #[arg(long)]
    pub diffusion_layers: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_improvement: Option<f64>,
    /// Stop once eval loss falls below this fraction of its initial value
    #[arg(long)]
    pub target_ratio: Option<f64>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Fraction of the data held out for evaluation
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    /// Run single-threaded
    #[arg(long)]
    pub sequential: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        ConfigLayer { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ConfigLayer {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: ConfigLayer) -> ConfigLayer {
        let base = self;
        overlay!(
            base,
            top,
            preset,
            components,
            kp_order,
            resolution,
            cnn_channels,
            diffusion_layers,
            lr,
            weight_decay,
            warmup_steps,
            batch_size,
            max_steps,
            seed,
            eval_interval,
            patience,
            min_improvement,
            target_ratio,
            augment,
            sigma_max,
            eval_fraction,
            sequential
        )
    }

    /// Defaults, then the file at `file` if any, then `self`.
    pub fn resolve_with_file(self, file: Option<&Path>) -> Result<Resolved> {
        let from_file = match file {
            Some(p) => ConfigLayer::load(p)?,
            None => ConfigLayer::default(),
        };
        from_file.overlay(self).resolve()
    }

    pub fn resolve(self) -> Result<Resolved> {
        let preset = self.preset.clone().unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut model = StrConfig::new(ModelConfig::preset(&preset)?);
        if let Some(c) = &self.components {
            model.components = Components::parse(c)?;
        }
        if let Some(o) = &self.kp_order {
            model.kp_order = parse_order(o)?;
        }
        if let Some(r) = self.resolution {
            model.raster_resolution = r;
        }
        if let Some(c) = self.cnn_channels {
            model.cnn_channels = c;
        }
        if let Some(l) = self.diffusion_layers {
            model.diffusion_layers = l;
        }

        let execution = if self.sequential.unwrap_or(false) {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        let d = TrainConfig::default();
        let train = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            seed: self.seed.unwrap_or(d.seed),
            eval_interval: self.eval_interval.unwrap_or(d.eval_interval),
            patience: self.patience.unwrap_or(d.patience),
            min_improvement: self.min_improvement.unwrap_or(d.min_improvement),
            target_ratio: self.target_ratio.or(d.target_ratio),
            augment: self.augment.unwrap_or(d.augment),
            sigma_max: self.sigma_max.unwrap_or(d.sigma_max),
            execution,
        };
        train.validate()?;
        let eval_fraction = self.eval_fraction.unwrap_or(DEFAULT_EVAL_FRACTION);
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(CliError::Config(format!("eval_fraction must be in [0, 1), got {eval_fraction}")));
        }
        Ok(Resolved {
            preset,
            model,
            train,
            eval_fraction,
            sequential: execution == Execution::Sequential,
        })
    }
}

pub fn parse_order(s: &str) -> Result<KpOrder> {
    match s {
        "fwd" | "forward" => Ok(KpOrder::Forward),
        "bkwd" | "backward" => Ok(KpOrder::Backward),
        _ => Err(CliError::Config(format!("unknown key-point order `{s}` (expected fwd or bkwd)"))),
    }
}

/// Fully resolved settings, as recorded in the run manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub preset: String,
    pub model: StrConfig,
    pub train: TrainConfig,
    pub eval_fraction: f64,
    pub sequential: bool,
}

impl Resolved {
    pub fn execution(&self) -> Execution {
        self.train.execution
    }
}
