//! Self-attention decoder over masked tokens with a shared prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::selector::SparseTokenSet;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-8;

/// Where a token came from: an observation slot (`0` oldest, `p` current) or the goal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenSource {
    Frame(usize),
    Goal,
}

impl TokenSource {
    /// Slot index in the positional table; the goal follows the `p + 1` frames.
    pub fn slot(self, past_frames: usize) -> usize {
        match self {
            TokenSource::Frame(j) => j,
            TokenSource::Goal => past_frames + 1,
        }
    }

    pub fn label(self) -> String {
        match self {
            TokenSource::Frame(j) => format!("obs{j}"),
            TokenSource::Goal => "goal".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(num_tokens, C)`.
    pub tokens: Tensor,
    pub tags: Vec<(TokenSource, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `x_1..x_i`, each `(num_tokens, C)`.
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `(n_way, 2)` unit headings.
    pub action: Tensor,
    /// `(n_way, 2)` agent-frame offsets in meters.
    pub waypoints: Tensor,
    /// Temporal distance normalized by the maximum goal offset.
    pub distance: f64,
}

impl Prediction {
    /// Flattened `action ⊕ waypoints`.
    pub fn joint(&self) -> Vec<f64> {
        self.action.data().iter().chain(self.waypoints.data()).copied().collect()
    }
}

pub(crate) struct PredictionVars {
    pub action: Var,
    pub waypoints: Var,
    pub distance: Var,
}

impl PredictionVars {
    pub fn value(&self, tape: &Tape) -> Prediction {
        Prediction {
            action: tape.value(self.action).clone(),
            waypoints: tape.value(self.waypoints).clone(),
            distance: tape.value(self.distance).item(),
        }
    }
}

fn init_block(store: &mut ParamStore, prefix: &str, c: usize, ff: usize, rng: &mut impl Rng) {
    for name in ["q", "k", "v", "o"] {
        store.init_glorot(&format!("{prefix}.w{name}"), &[c, c], c, c, rng);
        store.init_const(&format!("{prefix}.b{name}"), &[c], 0.0);
    }
    store.init_glorot(&format!("{prefix}.ff1.w"), &[c, ff], c, ff, rng);
    store.init_const(&format!("{prefix}.ff1.b"), &[ff], 0.0);
    store.init_glorot(&format!("{prefix}.ff2.w"), &[ff, c], ff, c, rng);
    store.init_const(&format!("{prefix}.ff2.b"), &[c], 0.0);
    for ln in ["ln1", "ln2"] {
        store.init_const(&format!("{prefix}.{ln}.g"), &[c], 1.0);
        store.init_const(&format!("{prefix}.{ln}.b"), &[c], 0.0);
    }
}

pub(crate) fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.channels();
    let ff = cfg.ff_mult * c;
    store.init_normal("decoder.pos", &[cfg.num_sources() * cfg.pixels_per_map(), c], 0.1, rng);
    for i in 1..=cfg.layers {
        init_block(store, &format!("decoder.layer{i}"), c, ff, rng);
    }
    for j in 1..=cfg.head_blocks {
        init_block(store, &format!("head.block{j}"), c, ff, rng);
    }
    let out = 4 * cfg.n_waypoints + 1;
    store.init_glorot("head.mlp1.w", &[c, cfg.head_hidden], c, cfg.head_hidden, rng);
    store.init_const("head.mlp1.b", &[cfg.head_hidden], 0.0);
    store.init_glorot("head.mlp2.w", &[cfg.head_hidden, out], cfg.head_hidden, out, rng);
    store.init_const("head.mlp2.b", &[out], 0.0);
}

/// One source for tokenization: masked `(H, W, C)` map and its kept pixels.
pub(crate) struct TokenInput<'a> {
    pub source: TokenSource,
    pub masked: Var,
    pub pixels: &'a [usize],
}

/// Gathers kept pixels of every source and adds positional encodings.
pub(crate) fn tokenize_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    inputs: &[TokenInput],
) -> Result<(Var, Vec<(TokenSource, usize)>)> {
    if inputs.len() != cfg.num_sources() {
        return Err(Error::invalid(format!("expected {} token sources, got {}", cfg.num_sources(), inputs.len())));
    }
    let hw = cfg.pixels_per_map();
    let c = cfg.channels();
    let mut parts = Vec::new();
    let mut pos_rows = Vec::new();
    let mut tags = Vec::new();
    for (expect, input) in inputs.iter().enumerate() {
        if input.source.slot(cfg.past_frames) != expect {
            return Err(Error::invalid(format!("token source {:?} out of order", input.source)));
        }
        if input.pixels.is_empty() {
            continue;
        }
        let flat = tape.reshape(input.masked, &[hw, c])?;
        parts.push(tape.gather_rows(flat, input.pixels)?);
        for &n in input.pixels {
            pos_rows.push(expect * hw + n);
            tags.push((input.source, n));
        }
    }
    if parts.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let pos_table = tape.param(store, "decoder.pos")?;
    let pos = tape.gather_rows(pos_table, &pos_rows)?;
    Ok((tape.add(x, pos)?, tags))
}

fn block_on_tape(tape: &mut Tape, store: &ParamStore, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let p = |name: &str, tape: &mut Tape| tape.param(store, &format!("{prefix}.{name}"));
    let proj = |name: &str, tape: &mut Tape| -> Result<Var> {
        let w = p(&format!("w{name}"), tape)?;
        let b = p(&format!("b{name}"), tape)?;
        tape.linear(x, w, b)
    };
    let q = proj("q", tape)?;
    let k = proj("k", tape)?;
    let v = proj("v", tape)?;
    let a = tape.attention(q, k, v, heads)?;
    let (wo, bo) = (p("wo", tape)?, p("bo", tape)?);
    let a = tape.linear(a, wo, bo)?;
    let h = tape.add(x, a)?;
    let (g1, b1) = (p("ln1.g", tape)?, p("ln1.b", tape)?);
    let h = tape.layer_norm(h, g1, b1)?;
    let (w1, c1) = (p("ff1.w", tape)?, p("ff1.b", tape)?);
    let f = tape.linear(h, w1, c1)?;
    let f = tape.relu(f)?;
    let (w2, c2) = (p("ff2.w", tape)?, p("ff2.b", tape)?);
    let f = tape.linear(f, w2, c2)?;
    let y = tape.add(h, f)?;
    let (g2, b2) = (p("ln2.g", tape)?, p("ln2.b", tape)?);
    tape.layer_norm(y, g2, b2)
}

/// Decoder layer `i` (1-based).
pub(crate) fn layer_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, i: usize, x: Var) -> Result<Var> {
    if i == 0 || i > cfg.layers {
        return Err(Error::invalid(format!("layer {i} outside 1..={}", cfg.layers)));
    }
    block_on_tape(tape, store, &format!("decoder.layer{i}"), cfg.heads, x)
}

pub(crate) fn head_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<PredictionVars> {
    let c = cfg.channels();
    let pooled = tape.mean_axis(x, 0)?;
    let mut h = tape.reshape(pooled, &[1, c])?;
    for j in 1..=cfg.head_blocks {
        h = block_on_tape(tape, store, &format!("head.block{j}"), cfg.heads, h)?;
    }
    let (w1, b1) = (tape.param(store, "head.mlp1.w")?, tape.param(store, "head.mlp1.b")?);
    let h = tape.linear(h, w1, b1)?;
    let h = tape.relu(h)?;
    let (w2, b2) = (tape.param(store, "head.mlp2.w")?, tape.param(store, "head.mlp2.b")?);
    let out = tape.linear(h, w2, b2)?;
    let nw = cfg.n_waypoints;
    let parts = tape.split(out, 1, &[2 * nw, 2 * nw, 1])?;
    let a = tape.reshape(parts[0], &[nw, 2])?;
    let action = tape.normalize_rows(a, NORM_EPS)?;
    let waypoints = tape.reshape(parts[1], &[nw, 2])?;
    let distance = tape.reshape(parts[2], &[1])?;
    Ok(PredictionVars { action, waypoints, distance })
}

/// Builds the token sequence from `p + 1` masked frames (oldest first) and the masked goal.
pub fn tokenize(
    frames: &[(FeatureMap, SparseTokenSet)],
    goal: &(FeatureMap, SparseTokenSet),
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    if frames.len() != cfg.past_frames + 1 {
        return Err(Error::invalid(format!("expected {} frames, got {}", cfg.past_frames + 1, frames.len())));
    }
    let mut tape = Tape::inference();
    let pixels: Vec<Vec<usize>> = frames.iter().chain(std::iter::once(goal)).map(|(_, s)| s.pixels()).collect();
    let mut inputs = Vec::new();
    for (j, (map, set)) in frames.iter().chain(std::iter::once(goal)).enumerate() {
        let expect = if j <= cfg.past_frames { TokenSource::Frame(j) } else { TokenSource::Goal };
        if set.source != expect {
            return Err(Error::invalid(format!("token set {:?} in slot of {:?}", set.source, expect)));
        }
        inputs.push(TokenInput { source: set.source, masked: tape.constant(map.values().clone()), pixels: &pixels[j] });
    }
    let (x, tags) = tokenize_on_tape(&mut tape, params, cfg, &inputs)?;
    Ok(TokenSequence { tokens: tape.value(x).clone(), tags })
}

/// Runs decoder layers `1..=i`, returning every intermediate output.
pub fn decode_to_layer(tokens: &TokenSequence, params: &ParamStore, cfg: &ModelConfig, i: usize) -> Result<DecoderState> {
    if i == 0 || i > cfg.layers {
        return Err(Error::invalid(format!("layer {i} outside 1..={}", cfg.layers)));
    }
    if tokens.tokens.shape()[0] == 0 {
        return Err(Error::EmptyTokens);
    }
    let mut tape = Tape::inference();
    let mut x = tape.constant(tokens.tokens.clone());
    let mut layers = Vec::with_capacity(i);
    for k in 1..=i {
        x = layer_on_tape(&mut tape, params, cfg, k, x)?;
        layers.push(tape.value(x).clone());
    }
    Ok(DecoderState { layers })
}

pub fn predict_head(x: &Tensor, params: &ParamStore, cfg: &ModelConfig) -> Result<Prediction> {
    if x.shape().len() != 2 || x.shape()[1] != cfg.channels() {
        return Err(Error::shape("predict_head", format!("expected (n, {}), got {:?}", cfg.channels(), x.shape())));
    }
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    Ok(head_on_tape(&mut tape, params, cfg, xv)?.value(&tape))
}
