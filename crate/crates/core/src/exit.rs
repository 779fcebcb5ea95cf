//! Dynamic inference: pre-decoder bypass, per-layer consistency exits and
//! cost accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::model::{GateStats, Model, NavInput, NoRng};
use crate::navsim::{Policy, StepContext};
use crate::selector::SelectMode;
use crate::tensor::{l2_norm, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreGate {
    pub feature_dist_threshold: f64,
    /// Most kept `(pixel, channel)` elements allowed in the current frame.
    pub max_masked_obs: usize,
    /// Most kept `(pixel, channel)` elements allowed in the goal.
    pub max_masked_goal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitThresholds {
    /// `eta[j]` compares layer `j + 2` with layer `j + 1`.
    pub eta: Vec<f64>,
    pub pre_gate: PreGate,
    pub pre_decoder: bool,
    pub layer_exit: bool,
}

impl ExitThresholds {
    /// Static full-depth inference.
    pub fn disabled(layers: usize) -> Self {
        ExitThresholds {
            eta: vec![0.0; layers - 1],
            pre_gate: PreGate { feature_dist_threshold: 0.0, max_masked_obs: 0, max_masked_goal: 0 },
            pre_decoder: false,
            layer_exit: false,
        }
    }

    /// Threshold for comparing layer `i` against `i - 1`, `i >= 2`.
    pub fn eta_for(&self, i: usize) -> f64 {
        self.eta[i - 2]
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let cfg = &model.cfg;
        if self.eta.len() != cfg.layers - 1 {
            return Err(Error::invalid(format!("expected {} layer thresholds, got {}", cfg.layers - 1, self.eta.len())));
        }
        if self.eta.iter().any(|e| !(*e >= 0.0)) || !(self.pre_gate.feature_dist_threshold >= 0.0) {
            return Err(Error::invalid("exit thresholds must be non-negative"));
        }
        let cap = cfg.pixels_per_map() * cfg.channels();
        if self.pre_gate.max_masked_obs > cap || self.pre_gate.max_masked_goal > cap {
            return Err(Error::invalid(format!("masked element bounds exceed H*W*C = {cap}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    pub prediction: Prediction,
    /// `0` for the pre-decoder bypass, else the last executed layer.
    pub exit_layer: usize,
    pub flops: u64,
    pub time_units: f64,
    pub mem_units: f64,
    /// `deltas[j]` is the joint action-waypoint change between layers `j + 2`
    /// and `j + 1`; `None` where not evaluated.
    pub deltas: Vec<Option<f64>>,
    pub num_tokens: usize,
    pub kept_pixels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mean_flops: f64,
    pub mean_time_units: f64,
    pub peak_mem_units: f64,
}

/// Bypass when goal and current features are close and both masks are sparse enough.
pub fn pre_decoder_check(goal_mean: &[f64], obs_mean: &[f64], kept_obs: usize, kept_goal: usize, gate: &PreGate) -> bool {
    let dist = goal_mean.iter().zip(obs_mean).map(|(g, o)| (g - o) * (g - o)).sum::<f64>().sqrt();
    gate_passes(dist, kept_obs, kept_goal, gate)
}

fn gate_passes(dist: f64, kept_obs: usize, kept_goal: usize, gate: &PreGate) -> bool {
    dist <= gate.feature_dist_threshold && kept_obs <= gate.max_masked_obs && kept_goal <= gate.max_masked_goal
}

/// L2 norm of the joint `action ⊕ waypoints` change.
pub fn prediction_delta(pred_i: &Prediction, pred_prev: &Prediction) -> f64 {
    let d: Vec<f64> = pred_i.joint().iter().zip(pred_prev.joint()).map(|(a, b)| a - b).collect();
    l2_norm(&d)
}

pub fn layer_exit_check(pred_i: &Prediction, pred_prev: &Prediction, eta: f64) -> bool {
    prediction_delta(pred_i, pred_prev) <= eta
}

fn finish(
    model: &Model,
    cost: &CostModel,
    prediction: Prediction,
    exit_layer: usize,
    flops: u64,
    deltas: Vec<Option<f64>>,
    gate: &GateStats,
    kept_pixels: usize,
) -> ExitTrace {
    ExitTrace {
        prediction,
        exit_layer,
        flops,
        time_units: cost.time_units(flops),
        mem_units: cost.mem_units(&model.cfg, gate.num_tokens, exit_layer),
        deltas,
        num_tokens: gate.num_tokens,
        kept_pixels,
    }
}

/// Encode, select, tokenize, then exit at the first satisfied rule.
pub fn run_dynamic(model: &Model, input: &NavInput, thresholds: &ExitThresholds, cost: &CostModel) -> Result<ExitTrace> {
    thresholds.validate(model)?;
    let l = model.cfg.layers;
    let mut tape = Tape::inference();
    let prep = model.prepare(&mut tape, input, SelectMode::Eval, 1.0, &mut NoRng)?;
    let kept_pixels = prep.masks.iter().map(|m| m.kept_pixels).sum();
    let gate = prep.gate;
    let mut deltas = vec![None; l - 1];
    if thresholds.pre_decoder && gate_passes(gate.feature_dist, gate.kept_obs, gate.kept_goal, &thresholds.pre_gate) {
        let pred = model.head(&mut tape, prep.tokens)?.value(&tape);
        return Ok(finish(model, cost, pred, 0, tape.flops(), deltas, &gate, kept_pixels));
    }
    let mut x = prep.tokens;
    let mut prev: Option<Prediction> = None;
    for i in 1..=l {
        x = model.layer(&mut tape, i, x)?;
        if !thresholds.layer_exit {
            continue;
        }
        let pred = model.head(&mut tape, x)?.value(&tape);
        if let Some(p) = &prev {
            let delta = prediction_delta(&pred, p);
            deltas[i - 2] = Some(delta);
            if delta <= thresholds.eta_for(i) || i == l {
                return Ok(finish(model, cost, pred, i, tape.flops(), deltas, &gate, kept_pixels));
            }
        }
        prev = Some(pred);
    }
    let pred = model.head(&mut tape, x)?.value(&tape);
    Ok(finish(model, cost, pred, l, tape.flops(), deltas, &gate, kept_pixels))
}

/// Mean FLOPs and time, peak memory.
pub fn trajectory_costs(traces: &[ExitTrace]) -> Result<CostReport> {
    if traces.is_empty() {
        return Err(Error::invalid("no traces to aggregate"));
    }
    let n = traces.len() as f64;
    Ok(CostReport {
        mean_flops: traces.iter().map(|t| t.flops as f64).sum::<f64>() / n,
        mean_time_units: traces.iter().map(|t| t.time_units).sum::<f64>() / n,
        peak_mem_units: traces.iter().map(|t| t.mem_units).fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Every layer's head output for one input, enough to replay [`run_dynamic`]
/// under any thresholds without touching the network again.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitProfile {
    /// Head outputs after layers `0..=l` (`0` is the token sequence itself).
    pub predictions: Vec<Prediction>,
    pub gate: GateStats,
    pub kept_pixels: usize,
}

impl ExitProfile {
    pub fn build(model: &Model, input: &NavInput) -> Result<Self> {
        let mut tape = Tape::inference();
        let prep = model.prepare(&mut tape, input, SelectMode::Eval, 1.0, &mut NoRng)?;
        let mut predictions = vec![model.head(&mut tape, prep.tokens)?.value(&tape)];
        let mut x = prep.tokens;
        for i in 1..=model.cfg.layers {
            x = model.layer(&mut tape, i, x)?;
            predictions.push(model.head(&mut tape, x)?.value(&tape));
        }
        Ok(ExitProfile { predictions, gate: prep.gate, kept_pixels: prep.masks.iter().map(|m| m.kept_pixels).sum() })
    }

    /// The trace [`run_dynamic`] would produce, with FLOPs from the cost model.
    pub fn simulate(&self, model: &Model, thresholds: &ExitThresholds, cost: &CostModel) -> ExitTrace {
        let cfg = &model.cfg;
        let l = cfg.layers;
        let n = self.gate.num_tokens;
        let mut deltas = vec![None; l - 1];
        let g = &self.gate;
        let (exit_layer, with_heads) =
            if thresholds.pre_decoder && gate_passes(g.feature_dist, g.kept_obs, g.kept_goal, &thresholds.pre_gate) {
                (0, false)
            } else if !thresholds.layer_exit {
                (l, false)
            } else {
                let mut exit = l;
                for i in 2..=l {
                    let delta = prediction_delta(&self.predictions[i], &self.predictions[i - 1]);
                    deltas[i - 2] = Some(delta);
                    if delta <= thresholds.eta_for(i) {
                        exit = i;
                        break;
                    }
                }
                (exit, true)
            };
        let flops = CostModel::exit_flops(cfg, n, exit_layer, with_heads);
        finish(model, cost, self.predictions[exit_layer].clone(), exit_layer, flops, deltas, g, self.kept_pixels)
    }
}

/// One trace-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub traj_id: usize,
    pub t: usize,
    pub exit_layer: usize,
    pub flops: u64,
    pub time_units: f64,
    pub mem_units: f64,
    #[serde(flatten)]
    pub deltas: std::collections::BTreeMap<String, Option<f64>>,
}

impl TraceRecord {
    pub fn new(traj_id: usize, t: usize, trace: &ExitTrace) -> Self {
        let deltas = trace.deltas.iter().enumerate().map(|(j, d)| (format!("delta_{}", j + 2), *d)).collect();
        TraceRecord {
            traj_id,
            t,
            exit_layer: trace.exit_layer,
            flops: trace.flops,
            time_units: trace.time_units,
            mem_units: trace.mem_units,
            deltas,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_trace_log<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Closed-loop policy driven by [`run_dynamic`]; keeps every trace.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub thresholds: ExitThresholds,
    pub cost: CostModel,
    pub traces: Vec<ExitTrace>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model, thresholds: ExitThresholds) -> Self {
        ModelPolicy { model, thresholds, cost: CostModel::default(), traces: Vec::new() }
    }
}

impl Policy for ModelPolicy<'_> {
    fn waypoints(&mut self, ctx: &StepContext) -> Result<Vec<[f64; 2]>> {
        let input = NavInput { frames: ctx.frames.to_vec(), goal: ctx.goal.clone() };
        let trace = run_dynamic(self.model, &input, &self.thresholds, &self.cost)?;
        let w = trace.prediction.waypoints.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        self.traces.push(trace);
        Ok(w)
    }
}
