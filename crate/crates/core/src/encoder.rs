//! Convolutional image encoders.
//!
//! Two parameter-disjoint instances of the same stack are used: one maps
//! each observation frame to a feature map on its own, the other maps the
//! channel-wise concatenation of the current observation and the goal image.
//! Each layer is a stride-2 convolution followed by ReLU and a layer norm
//! over channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const OBS_PREFIX: &str = "encoder.obs";
pub const GOAL_PREFIX: &str = "encoder.goal";

/// Encoded `(H, W, C)` observation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shape("feature_map", format!("expected (H, W, C), got {:?}", values.shape())));
        }
        Ok(FeatureMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Feature vector of pixel `n` in row-major order.
    pub fn pixel(&self, n: usize) -> &[f64] {
        let c = self.channels();
        &self.values.data()[n * c..(n + 1) * c]
    }
}

pub(crate) fn init(store: &mut ParamStore, prefix: &str, in_channels: usize, cfg: &ModelConfig, rng: &mut impl Rng) {
    let k = cfg.conv_kernel;
    let mut c_in = in_channels;
    for (j, &c_out) in cfg.enc_channels.iter().enumerate() {
        let l = j + 1;
        store.init_glorot(&format!("{prefix}.conv{l}.w"), &[k, k, c_in, c_out], k * k * c_in, k * k * c_out, rng);
        store.init_const(&format!("{prefix}.conv{l}.b"), &[c_out], 0.0);
        store.init_const(&format!("{prefix}.ln{l}.g"), &[c_out], 1.0);
        store.init_const(&format!("{prefix}.ln{l}.b"), &[c_out], 0.0);
        c_in = c_out;
    }
}

/// Runs one encoder instance on an `(H, W, C_in)` input already on the tape.
pub(crate) fn forward(tape: &mut Tape, store: &ParamStore, prefix: &str, cfg: &ModelConfig, input: Var) -> Result<Var> {
    let mut x = input;
    for l in 1..=cfg.enc_channels.len() {
        let w = tape.param(store, &format!("{prefix}.conv{l}.w"))?;
        let b = tape.param(store, &format!("{prefix}.conv{l}.b"))?;
        x = tape.conv2d(x, w, b, 2, cfg.conv_padding)?;
        x = tape.relu(x)?;
        let g = tape.param(store, &format!("{prefix}.ln{l}.g"))?;
        let beta = tape.param(store, &format!("{prefix}.ln{l}.b"))?;
        x = tape.layer_norm(x, g, beta)?;
    }
    Ok(x)
}

fn check_resolution(cfg: &ModelConfig, img: &Image) -> Result<()> {
    if img.height() != cfg.image_size || img.width() != cfg.image_size || img.channels() != 3 {
        return Err(Error::shape(
            "encoder",
            format!(
                "expected {0}x{0}x3 image, got {1}x{2}x{3}",
                cfg.image_size,
                img.height(),
                img.width(),
                img.channels()
            ),
        ));
    }
    Ok(())
}

/// Observation features on a tape.
pub(crate) fn obs_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, img: &Image) -> Result<Var> {
    check_resolution(cfg, img)?;
    let x = tape.constant(img.to_tensor());
    forward(tape, store, OBS_PREFIX, cfg, x)
}

/// Early-fused goal features `[obs_t; goal]` on a tape.
pub(crate) fn goal_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    obs_t: &Image,
    goal: &Image,
) -> Result<Var> {
    check_resolution(cfg, obs_t)?;
    check_resolution(cfg, goal)?;
    let x = tape.constant(obs_t.concat_channels(goal)?);
    forward(tape, store, GOAL_PREFIX, cfg, x)
}

pub fn encode_obs(image: &Image, params: &ParamStore, cfg: &ModelConfig) -> Result<FeatureMap> {
    let mut tape = Tape::inference();
    let v = obs_on_tape(&mut tape, params, cfg, image)?;
    FeatureMap::new(tape.value(v).clone())
}

pub fn encode_goal(obs_t: &Image, goal: &Image, params: &ParamStore, cfg: &ModelConfig) -> Result<FeatureMap> {
    let mut tape = Tape::inference();
    let v = goal_on_tape(&mut tape, params, cfg, obs_t, goal)?;
    FeatureMap::new(tape.value(v).clone())
}
