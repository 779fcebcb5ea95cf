//! Analytic inference cost.
//!
//! FLOP formulas mirror the instrumented kernels op by op (one multiply-add
//! counts 2, other arithmetic 1), so for any executed path the analytic count
//! equals the tape counter exactly. Time is FLOPs times a coefficient; memory
//! is a modeled peak of live activation elements times a coefficient.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Time units per FLOP.
    pub time_per_flop: f64,
    /// Memory units per activation element.
    pub mem_per_element: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        // one time unit is a millisecond at 1 GFLOP/s; memory in KiB of f64
        CostModel { time_per_flop: 1e-6, mem_per_element: 8.0 / 1024.0 }
    }
}

fn linear(rows: u64, d_in: u64, d_out: u64) -> u64 {
    2 * rows * d_in * d_out + rows * d_out
}

fn layer_norm(rows: u64, d: u64) -> u64 {
    rows * (8 * d + 5)
}

impl CostModel {
    /// Encoder FLOPs for one image with `c_in` input channels.
    pub fn encoder_flops(cfg: &ModelConfig, c_in: usize) -> u64 {
        let k = cfg.conv_kernel as u64;
        let (mut s, mut ci) = (cfg.image_size as u64, c_in as u64);
        let mut total = 0;
        for &co in &cfg.enc_channels {
            let co = co as u64;
            s = (s + 2 * cfg.conv_padding as u64 - k) / 2 + 1;
            let px = s * s;
            total += px * (co + k * k * 2 * ci * co) + px * co + layer_norm(px, co);
            ci = co;
        }
        total
    }

    /// Selector FLOPs for one feature map in evaluation mode.
    pub fn selector_flops(cfg: &ModelConfig) -> u64 {
        if !cfg.selector_enabled {
            return 0;
        }
        let hw = cfg.pixels_per_map() as u64;
        let c = cfg.channels() as u64;
        let hid = cfg.selector_hidden_mult as u64 * c;
        // MLP, relu, temperature scale, softmax over pairs, mask multiply
        linear(hw, c, hid) + hw * hid + linear(hw, hid, 2 * c) + 2 * hw * c + 8 * hw * c + hw * c
    }

    /// Encoding, selection and tokenization of `num_tokens` tokens.
    pub fn prep_flops(cfg: &ModelConfig, num_tokens: usize) -> u64 {
        let frames = (cfg.past_frames + 1) as u64;
        frames * Self::encoder_flops(cfg, 3)
            + Self::encoder_flops(cfg, 6)
            + cfg.num_sources() as u64 * Self::selector_flops(cfg)
            + (num_tokens * cfg.channels()) as u64
    }

    fn block_flops(cfg: &ModelConfig, n: u64) -> u64 {
        let c = cfg.channels() as u64;
        let f = (cfg.ff_mult * cfg.channels()) as u64;
        let heads = cfg.heads as u64;
        let attention = 4 * n * n * c + 5 * heads * n * n;
        4 * linear(n, c, c) + attention + 2 * n * c + 2 * layer_norm(n, c) + linear(n, c, f) + n * f + linear(n, f, c)
    }

    pub fn layer_flops(cfg: &ModelConfig, num_tokens: usize) -> u64 {
        Self::block_flops(cfg, num_tokens as u64)
    }

    pub fn head_flops(cfg: &ModelConfig, num_tokens: usize) -> u64 {
        let c = cfg.channels() as u64;
        let hid = cfg.head_hidden as u64;
        let out = 4 * cfg.n_waypoints as u64 + 1;
        let pool = num_tokens as u64 * c + c;
        pool + cfg.head_blocks as u64 * Self::block_flops(cfg, 1)
            + linear(1, c, hid)
            + hid
            + linear(1, hid, out)
            + 8 * cfg.n_waypoints as u64
    }

    /// FLOPs of an inference that exits after `exit_layer` decoder layers
    /// (`0` is the pre-decoder bypass). With `layer_exits` the head runs after
    /// every executed layer, otherwise only once at the exit.
    pub fn exit_flops(cfg: &ModelConfig, num_tokens: usize, exit_layer: usize, layer_exits: bool) -> u64 {
        let heads = if exit_layer == 0 || !layer_exits { 1 } else { exit_layer as u64 };
        Self::prep_flops(cfg, num_tokens)
            + exit_layer as u64 * Self::layer_flops(cfg, num_tokens)
            + heads * Self::head_flops(cfg, num_tokens)
    }

    /// Full-depth forward pass without intermediate heads.
    pub fn static_flops(cfg: &ModelConfig, num_tokens: usize) -> u64 {
        Self::exit_flops(cfg, num_tokens, cfg.layers, false)
    }

    pub fn time_units(&self, flops: u64) -> f64 {
        flops as f64 * self.time_per_flop
    }

    /// Peak live activation elements: persistent buffers, retained layer
    /// outputs and the largest transient working set.
    pub fn peak_elements(cfg: &ModelConfig, num_tokens: usize, exit_layer: usize) -> u64 {
        let s = cfg.image_size as u64;
        let c = cfg.channels() as u64;
        let hw = cfg.pixels_per_map() as u64;
        let sources = cfg.num_sources() as u64;
        let n = num_tokens as u64;
        let inputs = (cfg.past_frames as u64 + 1) * s * s * 3 + s * s * 6;
        let mask_buffers = if cfg.selector_enabled { 2 * hw * c } else { 0 };
        let persistent = inputs + sources * (hw * c + mask_buffers) + n * c;
        let retained = exit_layer as u64 * n * c;
        let first = (cfg.image_size + 2 * cfg.conv_padding - cfg.conv_kernel) as u64 / 2 + 1;
        let encoder_peak = 2 * first * first * cfg.enc_channels[0] as u64;
        let f = (cfg.ff_mult * cfg.channels()) as u64;
        let layer_peak = if exit_layer == 0 { 0 } else { 3 * n * c + cfg.heads as u64 * n * n + n * f };
        persistent + retained + encoder_peak.max(layer_peak)
    }

    pub fn mem_units(&self, cfg: &ModelConfig, num_tokens: usize, exit_layer: usize) -> f64 {
        Self::peak_elements(cfg, num_tokens, exit_layer) as f64 * self.mem_per_element
    }
}
