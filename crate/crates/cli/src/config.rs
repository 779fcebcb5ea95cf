//! Flat, versioned run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! and unsupported versions are rejected.
//!
//! ```toml
//! version = 1
//! layers = 4
//! epochs = 30
//! bo_budget = 20
//! ```

use std::path::Path;

use dynexit::bo::Constraints;
use dynexit::exit::CostReport;
use dynexit::model::ModelConfig;
use dynexit::navsim::SimConfig;
use dynexit::trainer::TrainConfig;
use dynexit::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,

    pub image_size: usize,
    pub enc_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub past_frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub head_blocks: usize,
    pub head_hidden: usize,
    pub n_waypoints: usize,
    pub selector_hidden_mult: usize,
    pub selector_keep_bias: f64,
    pub selector_enabled: bool,
    pub model_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub exit_distribution: Vec<f64>,
    pub joint_exits: bool,
    pub val_fraction: f64,
    pub train_seed: u64,

    pub bo_budget: usize,
    pub bo_seed: u64,
    /// Budgets as fractions of the static model's cost on the tuning set.
    pub flops_ratio: f64,
    pub time_ratio: f64,
    pub mem_ratio: f64,
    pub sim_a_min: f64,
    pub sim_w_min: f64,
    pub xi: [f64; 3],
    /// Upper bound of every layer threshold.
    pub eta_max: f64,
    /// Upper bound of the pre-decoder distance threshold.
    pub dist_threshold_max: f64,
    /// Search the distance threshold over the range observed on the tuning set
    /// instead of `[0, dist_threshold_max]`.
    pub dist_range_from_data: bool,
    /// Kept `(pixel, channel)` element bounds for the pre-decoder gate.
    pub max_masked_obs: usize,
    pub max_masked_goal: usize,
    pub pre_decoder: bool,
    pub layer_exit: bool,

    pub closed_loop_worlds: usize,
    pub closed_loop_seed: u64,
    pub closed_loop_max_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let hwc = m.pixels_per_map() * m.channels();
        // the reference bounds (2770 obs, 3400 goal) rescaled from a 7680-element map
        let scale = |v: f64| (v * hwc as f64 / 7680.0).round() as usize;
        RunConfig {
            version: CONFIG_VERSION,
            image_size: m.image_size,
            enc_channels: m.enc_channels,
            conv_kernel: m.conv_kernel,
            conv_padding: m.conv_padding,
            past_frames: m.past_frames,
            layers: m.layers,
            heads: m.heads,
            ff_mult: m.ff_mult,
            head_blocks: m.head_blocks,
            head_hidden: m.head_hidden,
            n_waypoints: m.n_waypoints,
            selector_hidden_mult: m.selector_hidden_mult,
            selector_keep_bias: m.selector_keep_bias,
            selector_enabled: m.selector_enabled,
            model_seed: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_epochs: t.warmup_epochs,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            lambda: t.lambda,
            tau_start: t.tau_start,
            tau_end: t.tau_end,
            exit_distribution: t.exit_distribution,
            joint_exits: t.joint_exits,
            val_fraction: t.val_fraction,
            train_seed: t.seed,
            bo_budget: 20,
            bo_seed: 0,
            flops_ratio: 0.46,
            time_ratio: 0.46,
            mem_ratio: 1.0,
            sim_a_min: 0.95,
            sim_w_min: 0.96,
            xi: [0.8, 0.5, 1.0],
            eta_max: 2.0,
            dist_threshold_max: 10.0,
            dist_range_from_data: true,
            max_masked_obs: scale(2770.0),
            max_masked_goal: scale(3400.0),
            pre_decoder: true,
            layer_exit: true,
            closed_loop_worlds: 50,
            closed_loop_seed: 1_000_003,
            closed_loop_max_steps: 300,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.model().validate()?;
        cfg.train().validate(cfg.layers)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            enc_channels: self.enc_channels.clone(),
            conv_kernel: self.conv_kernel,
            conv_padding: self.conv_padding,
            past_frames: self.past_frames,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            head_blocks: self.head_blocks,
            head_hidden: self.head_hidden,
            n_waypoints: self.n_waypoints,
            selector_hidden_mult: self.selector_hidden_mult,
            selector_keep_bias: self.selector_keep_bias,
            selector_enabled: self.selector_enabled,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            lambda: self.lambda,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            exit_distribution: self.exit_distribution.clone(),
            joint_exits: self.joint_exits,
            val_fraction: self.val_fraction,
            seed: self.train_seed,
            ..TrainConfig::default()
        }
    }

    pub fn constraints(&self, static_cost: &CostReport) -> Constraints {
        Constraints {
            sim_a_min: self.sim_a_min,
            sim_w_min: self.sim_w_min,
            xi: self.xi,
            ..Constraints::scaled(static_cost, self.flops_ratio, self.time_ratio, self.mem_ratio)
        }
    }

    /// Simulator settings matching the model's image size, history and horizon.
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            image_size: self.image_size,
            past_frames: self.past_frames,
            n_waypoints: self.n_waypoints,
            ..SimConfig::default()
        }
    }
}
