//! Model configuration, parameters and the shared forward pipeline.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, Prediction, PredictionVars, TokenInput, TokenSource};
use crate::encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::selector::{self, SelectMode, SelectionMask};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Output channels of the three encoder convolutions; the last is `C`.
    pub enc_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    /// `p`: number of past frames besides the current one.
    pub past_frames: usize,
    /// `l`: decoder depth.
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Attention blocks in the prediction head.
    pub head_blocks: usize,
    pub head_hidden: usize,
    pub n_waypoints: usize,
    pub selector_hidden_mult: usize,
    pub selector_keep_bias: f64,
    pub selector_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            enc_channels: vec![4, 8, 16],
            conv_kernel: 2,
            conv_padding: 0,
            past_frames: 5,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            head_blocks: 1,
            head_hidden: 32,
            n_waypoints: 5,
            selector_hidden_mult: 2,
            selector_keep_bias: -1.0,
            selector_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        *self.enc_channels.last().expect("validated config has encoder layers")
    }

    /// Side of the encoded feature map.
    pub fn feature_size(&self) -> usize {
        self.enc_channels
            .iter()
            .fold(self.image_size, |s, _| (s + 2 * self.conv_padding).saturating_sub(self.conv_kernel) / 2 + 1)
    }

    pub fn pixels_per_map(&self) -> usize {
        self.feature_size() * self.feature_size()
    }

    /// `p + 1` frames plus the goal.
    pub fn num_sources(&self) -> usize {
        self.past_frames + 2
    }

    pub fn sources(&self) -> Vec<TokenSource> {
        (0..=self.past_frames).map(TokenSource::Frame).chain(std::iter::once(TokenSource::Goal)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return bad("encoder channels must be positive".into());
        }
        if self.conv_kernel == 0 || self.image_size + 2 * self.conv_padding < self.conv_kernel {
            return bad(format!("kernel {} does not fit image {}", self.conv_kernel, self.image_size));
        }
        let mut s = self.image_size;
        for _ in &self.enc_channels {
            if s + 2 * self.conv_padding < self.conv_kernel {
                return bad(format!("image {} too small for {} conv layers", self.image_size, self.enc_channels.len()));
            }
            s = (s + 2 * self.conv_padding - self.conv_kernel) / 2 + 1;
        }
        if self.heads == 0 || self.channels() % self.heads != 0 {
            return bad(format!("{} channels not divisible by {} heads", self.channels(), self.heads));
        }
        if self.layers < 2 {
            return bad("at least two decoder layers are needed for layer exits".into());
        }
        if self.n_waypoints == 0 || self.head_hidden == 0 || self.ff_mult == 0 || self.selector_hidden_mult == 0 {
            return bad("head and feedforward sizes must be positive".into());
        }
        Ok(())
    }
}

/// Observation window (oldest first, current last) and goal image.
#[derive(Clone, Debug, PartialEq)]
pub struct NavInput {
    pub frames: Vec<Image>,
    pub goal: Image,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Statistics consumed by the pre-decoder gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    /// L2 distance between mean goal and mean current-frame token features.
    pub feature_dist: f64,
    /// Kept `(pixel, channel)` elements in the current frame.
    pub kept_obs: usize,
    /// Kept `(pixel, channel)` elements in the goal.
    pub kept_goal: usize,
    pub num_tokens: usize,
}

pub(crate) struct Prepared {
    pub tokens: Var,
    pub masks: Vec<SelectionMask>,
    pub gate: GateStats,
}

fn mean_kept(values: &[f64], c: usize, pixels: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; c];
    for &n in pixels {
        for (acc, v) in m.iter_mut().zip(&values[n * c..(n + 1) * c]) {
            *acc += v;
        }
    }
    if !pixels.is_empty() {
        m.iter_mut().for_each(|v| *v /= pixels.len() as f64);
    }
    m
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init(&mut params, encoder::OBS_PREFIX, 3, &cfg, &mut rng);
        encoder::init(&mut params, encoder::GOAL_PREFIX, 6, &cfg, &mut rng);
        selector::init(&mut params, selector::OBS_PREFIX, &cfg, &mut rng);
        selector::init(&mut params, selector::GOAL_PREFIX, &cfg, &mut rng);
        decoder::init(&mut params, &cfg, &mut rng);
        Model { cfg, params }
    }

    /// Wraps loaded parameters after checking them against a fresh layout.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let reference = Model::new(cfg.clone(), 0);
        if let Some(m) = reference.params.layout_mismatch(&params) {
            return Err(Error::Format(format!("checkpoint does not match model config: {m}")));
        }
        Ok(Model { cfg, params })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(&self.params, w)
    }

    pub fn load<R: Read>(r: R, cfg: ModelConfig) -> Result<Self> {
        Model::from_params(cfg, read_checkpoint(r)?)
    }

    /// Encode, select and tokenize on `tape`.
    pub(crate) fn prepare(
        &self,
        tape: &mut Tape,
        input: &NavInput,
        mode: SelectMode,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Prepared> {
        self.prepare_with(tape, input, mode, tau, rng, false)
    }

    /// `prepare`, optionally masking training features by the soft keep
    /// probabilities in the forward pass as well (smooth in every parameter).
    pub(crate) fn prepare_with(
        &self,
        tape: &mut Tape,
        input: &NavInput,
        mode: SelectMode,
        tau: f64,
        rng: &mut impl Rng,
        soft_forward: bool,
    ) -> Result<Prepared> {
        let cfg = &self.cfg;
        if input.frames.len() != cfg.past_frames + 1 {
            return Err(Error::invalid(format!("expected {} frames, got {}", cfg.past_frames + 1, input.frames.len())));
        }
        let (h, c) = (cfg.feature_size(), cfg.channels());
        let current = input.frames.last().expect("nonempty window");
        let mut masked = Vec::with_capacity(cfg.num_sources());
        let mut masks = Vec::with_capacity(cfg.num_sources());
        for source in cfg.sources() {
            let (features, prefix) = match source {
                TokenSource::Frame(j) => {
                    (encoder::obs_on_tape(tape, &self.params, cfg, &input.frames[j])?, selector::OBS_PREFIX)
                }
                TokenSource::Goal => {
                    (encoder::goal_on_tape(tape, &self.params, cfg, current, &input.goal)?, selector::GOAL_PREFIX)
                }
            };
            if cfg.selector_enabled {
                let logits = selector::logits_on_tape(tape, &self.params, prefix, features)?;
                let noise = match mode {
                    SelectMode::Train => Some(selector::gumbel_noise(&[h * h * c, 2], rng)?),
                    SelectMode::Eval => None,
                };
                let (soft, mask) = selector::mask_on_tape(tape, logits, [h, h, c], tau, noise.as_ref())?;
                masked.push(if soft_forward && mode == SelectMode::Train {
                    tape.mul(features, soft)?
                } else {
                    selector::apply_on_tape(tape, features, soft, &mask, mode)?
                });
                masks.push(mask);
            } else {
                masked.push(features);
                masks.push(SelectionMask::full(h, h, c));
            }
        }
        let pixels: Vec<Vec<usize>> = masks.iter().map(SelectionMask::kept_pixel_indices).collect();
        let inputs: Vec<TokenInput> = cfg
            .sources()
            .into_iter()
            .zip(&masked)
            .zip(&pixels)
            .map(|((source, &m), px)| TokenInput { source, masked: m, pixels: px })
            .collect();
        let (tokens, tags) = decoder::tokenize_on_tape(tape, &self.params, cfg, &inputs)?;

        let p = cfg.past_frames;
        let obs_mean = mean_kept(tape.value(masked[p]).data(), c, &pixels[p]);
        let goal_mean = mean_kept(tape.value(masked[p + 1]).data(), c, &pixels[p + 1]);
        let feature_dist = obs_mean.iter().zip(&goal_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let gate = GateStats {
            feature_dist,
            kept_obs: masks[p].kept_elements(),
            kept_goal: masks[p + 1].kept_elements(),
            num_tokens: tags.len(),
        };
        Ok(Prepared { tokens, masks, gate })
    }

    pub(crate) fn layer(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        decoder::layer_on_tape(tape, &self.params, &self.cfg, i, x)
    }

    pub(crate) fn head(&self, tape: &mut Tape, x: Var) -> Result<PredictionVars> {
        decoder::head_on_tape(tape, &self.params, &self.cfg, x)
    }

    /// Full-depth evaluation-mode forward pass. Returns the prediction and its FLOPs.
    pub fn forward_static(&self, input: &NavInput) -> Result<(Prediction, u64)> {
        let mut tape = Tape::inference();
        let prep = self.prepare(&mut tape, input, SelectMode::Eval, 1.0, &mut NoRng)?;
        let mut x = prep.tokens;
        for i in 1..=self.cfg.layers {
            x = self.layer(&mut tape, i, x)?;
        }
        let pred = self.head(&mut tape, x)?.value(&tape);
        Ok((pred, tape.flops()))
    }

    /// Evaluation-mode masks for every source, oldest frame first and goal last.
    pub fn eval_masks(&self, input: &NavInput) -> Result<Vec<SelectionMask>> {
        let mut tape = Tape::inference();
        Ok(self.prepare(&mut tape, input, SelectMode::Eval, 1.0, &mut NoRng)?.masks)
    }
}

/// RNG for evaluation paths that must not consume randomness.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode draws no randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode draws no randomness")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode draws no randomness")
    }

    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation mode draws no randomness")
    }
}
