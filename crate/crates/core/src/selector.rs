//! Hard feature selection with the Gumbel-Softmax trick.
//!
//! A per-pixel MLP maps each feature vector to two logits per channel
//! (`drop`, `keep`). Training adds Gumbel noise, applies a temperature
//! softmax over the category axis and uses the argmax in the forward pass
//! with gradients routed through the soft probabilities. Evaluation drops the
//! noise and thresholds the keep probability at one half.

use rand::Rng;

use crate::decoder::TokenSource;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const OBS_PREFIX: &str = "selector.obs";
pub const GOAL_PREFIX: &str = "selector.goal";

/// Index of the "keep" category on the last logits axis.
pub const KEEP: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Train,
    Eval,
}

/// `(H, W, C, 2)` selection logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLogits {
    values: Tensor,
}

impl SelectionLogits {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 4 || values.shape()[3] != 2 {
            return Err(Error::shape("selection_logits", format!("expected (H, W, C, 2), got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { op: "selection_logits" });
        }
        Ok(SelectionLogits { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Adds `offset` to every keep logit.
    pub fn offset_keep(&self, offset: f64) -> Self {
        let mut values = self.values.clone();
        values.data_mut().chunks_mut(2).for_each(|pair| pair[KEEP] += offset);
        SelectionLogits { values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    /// Keep probability per `(pixel, channel)`, shape `(H, W, C)`.
    pub soft: Tensor,
    /// Argmax of the two categories (ties keep), shape `(H, W, C)`.
    pub hard: Tensor,
    /// Row-major `(H, W)` pixel mask, the max of `hard` over channels.
    pub pixel_mask: Vec<bool>,
    pub kept_pixels: usize,
    pub tau: f64,
}

impl SelectionMask {
    /// Mask with every element kept.
    pub fn full(h: usize, w: usize, c: usize) -> Self {
        SelectionMask {
            soft: Tensor::full(&[h, w, c], 1.0),
            hard: Tensor::full(&[h, w, c], 1.0),
            pixel_mask: vec![true; h * w],
            kept_pixels: h * w,
            tau: 1.0,
        }
    }

    /// Builds a mask from explicit hard values; `soft` is set equal to `hard`.
    pub fn from_hard(hard: Tensor) -> Result<Self> {
        if hard.shape().len() != 3 || hard.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("hard mask must be a binary (H, W, C) tensor"));
        }
        let (pixel_mask, kept_pixels) = pixel_mask(&hard);
        Ok(SelectionMask { soft: hard.clone(), hard, pixel_mask, kept_pixels, tau: 1.0 })
    }

    pub fn height(&self) -> usize {
        self.hard.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.hard.shape()[1]
    }

    /// Number of kept `(pixel, channel)` elements.
    pub fn kept_elements(&self) -> usize {
        self.hard.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Row-major indices of kept pixels.
    pub fn kept_pixel_indices(&self) -> Vec<usize> {
        self.pixel_mask.iter().enumerate().filter(|(_, &k)| k).map(|(n, _)| n).collect()
    }
}

fn pixel_mask(hard: &Tensor) -> (Vec<bool>, usize) {
    let c = hard.shape()[2];
    let mask: Vec<bool> = hard.data().chunks(c).map(|px| px.iter().any(|&v| v == 1.0)).collect();
    let kept = mask.iter().filter(|&&k| k).count();
    (mask, kept)
}

/// Kept pixels of one source, in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTokenSet {
    pub source: TokenSource,
    pub tokens: Vec<(usize, Vec<f64>)>,
}

impl SparseTokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pixels(&self) -> Vec<usize> {
        self.tokens.iter().map(|(n, _)| *n).collect()
    }
}

/// Standard Gumbel sample from a uniform draw in `(0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// I.i.d. Gumbel(0, 1) noise; uniform draws of exactly zero are redrawn.
pub fn gumbel_noise(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break gumbel_from_uniform(u);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub(crate) fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.channels();
    let hid = cfg.selector_hidden_mult * c;
    store.init_glorot(&format!("{prefix}.fc1.w"), &[c, hid], c, hid, rng);
    store.init_const(&format!("{prefix}.fc1.b"), &[hid], 0.0);
    store.init_glorot(&format!("{prefix}.fc2.w"), &[hid, 2 * c], hid, 2 * c, rng);
    // bias the keep logits so an untrained selector keeps most features
    let mut b = vec![0.0; 2 * c];
    b.chunks_mut(2).for_each(|pair| pair[KEEP] = cfg.selector_keep_bias);
    store.insert(format!("{prefix}.fc2.b"), Tensor::vector(b));
}

/// Logits as an `(H*W*C, 2)` tape value.
pub(crate) fn logits_on_tape(tape: &mut Tape, store: &ParamStore, prefix: &str, features: Var) -> Result<Var> {
    let &[h, w, c] = tape.shape(features) else {
        return Err(Error::shape("select", format!("expected (H, W, C), got {:?}", tape.shape(features))));
    };
    let x = tape.reshape(features, &[h * w, c])?;
    let w1 = tape.param(store, &format!("{prefix}.fc1.w"))?;
    let b1 = tape.param(store, &format!("{prefix}.fc1.b"))?;
    let x = tape.linear(x, w1, b1)?;
    let x = tape.relu(x)?;
    let w2 = tape.param(store, &format!("{prefix}.fc2.w"))?;
    let b2 = tape.param(store, &format!("{prefix}.fc2.b"))?;
    let z = tape.linear(x, w2, b2)?;
    tape.reshape(z, &[h * w * c, 2])
}

/// Soft keep probabilities `(H, W, C)` on the tape plus the hard mask.
pub(crate) fn mask_on_tape(
    tape: &mut Tape,
    logits: Var,
    dims: [usize; 3],
    tau: f64,
    noise: Option<&Tensor>,
) -> Result<(Var, SelectionMask)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let z = match noise {
        Some(g) => {
            let g = tape.constant(g.clone());
            tape.add(logits, g)?
        }
        None => logits,
    };
    let scaled = tape.scale(z, 1.0 / tau)?;
    let probs = tape.softmax(scaled, 1)?;
    let keep = tape.slice(probs, 1, KEEP, 1)?;
    let soft = tape.reshape(keep, &dims)?;
    let hard: Vec<f64> = tape.value(z).data().chunks(2).map(|p| if p[KEEP] >= p[1 - KEEP] { 1.0 } else { 0.0 }).collect();
    let hard = Tensor::new(dims.to_vec(), hard)?;
    let (pixel_mask, kept_pixels) = pixel_mask(&hard);
    let mask = SelectionMask { soft: tape.value(soft).clone(), hard, pixel_mask, kept_pixels, tau };
    Ok((soft, mask))
}

/// Masked features on the tape: hard values forward, soft gradients in training.
pub(crate) fn apply_on_tape(
    tape: &mut Tape,
    features: Var,
    soft: Var,
    mask: &SelectionMask,
    mode: SelectMode,
) -> Result<Var> {
    let m = match mode {
        SelectMode::Train => tape.straight_through(mask.hard.clone(), soft)?,
        SelectMode::Eval => tape.constant(mask.hard.clone()),
    };
    tape.mul(features, m)
}

/// Mask from precomputed logits. `rng` is only drawn from in training mode.
pub fn mask_from_logits(logits: &SelectionLogits, tau: f64, mode: SelectMode, rng: &mut impl Rng) -> Result<SelectionMask> {
    let s = logits.values.shape();
    let dims = [s[0], s[1], s[2]];
    let noise = match mode {
        SelectMode::Train => Some(gumbel_noise(&[dims.iter().product(), 2], rng)?),
        SelectMode::Eval => None,
    };
    let mut tape = Tape::inference();
    let z = tape.constant(logits.values.clone().reshape(vec![dims.iter().product(), 2])?);
    Ok(mask_on_tape(&mut tape, z, dims, tau, noise.as_ref())?.1)
}

pub fn selection_logits(features: &FeatureMap, params: &ParamStore, prefix: &str) -> Result<SelectionLogits> {
    let mut tape = Tape::inference();
    let f = tape.constant(features.values().clone());
    let z = logits_on_tape(&mut tape, params, prefix, f)?;
    let (h, w, c) = (features.height(), features.width(), features.channels());
    SelectionLogits::new(tape.value(z).clone().reshape(vec![h, w, c, 2])?)
}

/// Runs the selector named by `prefix` on one feature map.
pub fn select(
    features: &FeatureMap,
    params: &ParamStore,
    prefix: &str,
    tau: f64,
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<SelectionMask> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    mask_from_logits(&selection_logits(features, params, prefix)?, tau, mode, rng)
}

/// Applies a mask: `features * soft` in training, `features * hard` in evaluation.
pub fn apply_mask(
    features: &FeatureMap,
    mask: &SelectionMask,
    mode: SelectMode,
    source: TokenSource,
) -> Result<(FeatureMap, SparseTokenSet)> {
    if features.values().shape() != mask.hard.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("features {:?} vs mask {:?}", features.values().shape(), mask.hard.shape()),
        ));
    }
    let m = match mode {
        SelectMode::Train => &mask.soft,
        SelectMode::Eval => &mask.hard,
    };
    let data = features.values().data().iter().zip(m.data()).map(|(f, m)| f * m).collect();
    let masked = FeatureMap::new(Tensor::new(features.values().shape().to_vec(), data)?)?;
    let tokens = mask.kept_pixel_indices().into_iter().map(|n| (n, masked.pixel(n).to_vec())).collect();
    Ok((masked, SparseTokenSet { source, tokens }))
}

/// Grayscale keep-probability map, nearest-neighbour upsampled to `(height, width)`.
pub fn saliency_image(mask: &SelectionMask, height: usize, width: usize) -> Result<Image> {
    let (h, w) = (mask.height(), mask.width());
    if height < h || width < w {
        return Err(Error::invalid(format!("saliency target {height}x{width} smaller than mask {h}x{w}")));
    }
    let c = mask.soft.shape()[2];
    let means: Vec<f64> = mask.soft.data().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
    let mut img = Image::filled(height, width, 1, 0);
    for y in 0..height {
        for x in 0..width {
            img.set(y, x, 0, means[(y * h / height) * w + x * w / width]);
        }
    }
    Ok(img)
}
