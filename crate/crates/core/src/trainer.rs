//! End-to-end imitation training with stochastic exit sampling.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decoder::{Prediction, PredictionVars};
use crate::error::{Error, Result};
use crate::exit::{run_dynamic, trajectory_costs, CostReport, ExitThresholds};
use crate::model::Model;
use crate::navsim::{cosine_metrics, Metrics, Sample, Target};
use crate::selector::SelectMode;
use crate::tensor::{GradCheckReport, Grads, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Weight of the waypoint and distance terms.
    pub lambda: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Probability of training exit `k` for `k = 0..=l`; slot 0 is the
    /// pre-decoder path (head on the token sequence).
    pub exit_distribution: Vec<f64>,
    /// Train every exit in the support each batch, weighted by its probability,
    /// instead of sampling one.
    pub joint_exits: bool,
    /// Fraction of training episodes held out for checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_epochs: 1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            lambda: 0.5,
            tau_start: 1.0,
            tau_end: 0.5,
            exit_distribution: vec![0.25, 0.0, 0.25, 0.25, 0.25],
            joint_exits: false,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("learning rate must be positive, weight decay and clip non-negative".into());
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.exit_distribution.len() != layers + 1 {
            return bad(format!("exit distribution needs {} entries, got {}", layers + 1, self.exit_distribution.len()));
        }
        let total: f64 = self.exit_distribution.iter().sum();
        if self.exit_distribution.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("exit probabilities must be non-negative and sum to 1, got {total}"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Linear anneal from `tau_start` at epoch 0 to `tau_end` at the last epoch.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * f
    }

    /// Linear warmup then cosine annealing to zero.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let f = ((step - warm) as f64 / span).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `MSE(a) + λ MSE(w) + λ (d̂ − d)²`.
pub fn loss(pred: &Prediction, target: &Target, lambda: f64) -> Result<f64> {
    if pred.action.shape() != target.action.shape() || pred.waypoints.shape() != target.waypoints.shape() {
        return Err(Error::shape("loss", "prediction and target shapes differ"));
    }
    Ok(sq_err(pred.action.data(), target.action.data())
        + lambda * sq_err(pred.waypoints.data(), target.waypoints.data())
        + lambda * (pred.distance - target.distance).powi(2))
}

/// Mean of [`loss`] over a batch.
pub fn batch_loss(preds: &[Prediction], targets: &[Target], lambda: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += loss(p, t, lambda)?;
    }
    Ok(total / preds.len() as f64)
}

fn loss_on_tape(tape: &mut Tape, pred: &PredictionVars, target: &Target, lambda: f64) -> Result<Var> {
    let mse = |tape: &mut Tape, v: Var, t: &crate::tensor::Tensor| -> Result<Var> {
        let t = tape.constant(t.clone());
        let d = tape.sub(v, t)?;
        let sq = tape.mul(d, d)?;
        tape.mean(sq)
    };
    let la = mse(tape, pred.action, &target.action)?;
    let lw = mse(tape, pred.waypoints, &target.waypoints)?;
    let ld = mse(tape, pred.distance, &crate::tensor::Tensor::scalar(target.distance))?;
    let rest = tape.add(lw, ld)?;
    let rest = tape.scale(rest, lambda)?;
    tape.add(la, rest)
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numeric() {
        Error::Diverged { epoch, batch }
    } else {
        e
    }
}

/// Loss and parameter gradients of one sample, with the given exit weights
/// (`(layer, weight)`, layer 0 being the pre-decoder head).
fn sample_grads(
    model: &Model,
    sample: &Sample,
    exits: &[(usize, f64)],
    tau: f64,
    lambda: f64,
    rng_seed: u64,
) -> Result<(f64, Grads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tape = Tape::new();
    let prep = model.prepare(&mut tape, &sample.input, SelectMode::Train, tau, &mut rng)?;
    let deepest = exits.iter().map(|e| e.0).max().expect("nonempty exits");
    let mut x = prep.tokens;
    let mut total: Option<Var> = None;
    for i in 0..=deepest {
        if i > 0 {
            x = model.layer(&mut tape, i, x)?;
        }
        for &(_, w) in exits.iter().filter(|e| e.0 == i) {
            let pred = model.head(&mut tape, x)?;
            let l = loss_on_tape(&mut tape, &pred, &sample.target, lambda)?;
            let l = tape.scale(l, w)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    let total = total.expect("at least one exit");
    let value = tape.value(total).item();
    tape.backward(total)?;
    Ok((value, tape.param_grads()))
}

/// AdamW state. Elements whose gradient is exactly zero are left untouched,
/// including their moments and weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if gi == 0.0 {
                    continue;
                }
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
                *pi -= lr * (update + cfg.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sim_a: f64,
    pub val_sim_w: f64,
    /// Batches trained at each exit, `0..=l`.
    pub exit_histogram: Vec<usize>,
    pub lr: f64,
    pub tau: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation Sim(w).
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Mean training loss of the first batch before any update.
    pub initial_loss: f64,
}

/// Episode-level split of training samples into fit and validation parts.
pub fn validation_split(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<&Sample>, Vec<&Sample>) {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = samples.iter().map(|s| s.episode).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4C));
    let n_val = if fraction > 0.0 { ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1) } else { 0 };
    let val: std::collections::BTreeSet<usize> = ids[..n_val].iter().copied().collect();
    samples.iter().partition(|s| !val.contains(&s.episode))
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Static full-depth predictions for each sample.
pub fn predict_static(model: &Model, samples: &[&Sample]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| model.forward_static(&s.input).map(|p| p.0)).collect()
}

/// Trains `model` in place on `train`, keeping the parameters of the epoch
/// with the best validation Sim(w). `log_sink` receives one JSON line per epoch.
pub fn train(
    model: Model,
    train: &[Sample],
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate(model.cfg.layers)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let (fit, val) = validation_split(train, cfg.val_fraction, cfg.seed);
    let val = if val.is_empty() { fit.clone() } else { val };
    let mut model = model;
    let mut opt = AdamW::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exit_dist = WeightedIndex::new(&cfg.exit_distribution).map_err(|e| Error::invalid(e.to_string()))?;
    let support: Vec<(usize, f64)> =
        cfg.exit_distribution.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(k, p)| (k, *p)).collect();
    let steps_per_epoch = fit.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let tau = cfg.tau_at(epoch);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut hist = vec![0; cfg.exit_distribution.len()];
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let exits = if cfg.joint_exits {
                support.clone()
            } else {
                vec![(exit_dist.sample(&mut rng), 1.0)]
            };
            for &(k, _) in &exits {
                hist[k] += 1;
            }
            let results: Vec<Result<(f64, Grads)>> = chunk
                .par_iter()
                .map(|&i| sample_grads(&model, fit[i], &exits, tau, cfg.lambda, sample_seed(cfg.seed, epoch, i)))
                .collect();
            let mut grads = Grads::default();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r.map_err(|e| diverged(e, epoch, b))?;
                batch_loss += l;
                grads.accumulate(&g)?;
            }
            let n = chunk.len() as f64;
            batch_loss /= n;
            grads.scale(1.0 / n);
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if initial_loss.is_nan() {
                initial_loss = batch_loss;
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            lr = cfg.lr_at(step, steps_per_epoch);
            opt.step(&mut model, &grads, lr, cfg)?;
            step += 1;
            epoch_loss += batch_loss * n;
        }
        let preds = predict_static(&model, &val).map_err(|e| diverged(e, epoch, steps_per_epoch))?;
        let targets: Vec<Target> = val.iter().map(|s| s.target.clone()).collect();
        let m = cosine_metrics(&preds, &targets)?;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / fit.len() as f64,
            val_sim_a: m.sim_a,
            val_sim_w: m.sim_w,
            exit_histogram: hist,
            lr,
            tau,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val sim_a {:.2} sim_w {:.2} ({:.1}s)",
            entry.train_loss,
            m.sim_a,
            m.sim_w,
            entry.wall_seconds
        );
        if let Some(sink) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &entry).map_err(|e| Error::Format(e.to_string()))?;
            sink.write_all(b"\n")?;
        }
        if best.as_ref().is_none_or(|b| m.sim_w > b.0) {
            best = Some((m.sim_w, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, log, best_epoch, initial_loss })
}

/// Held-out metrics and costs of one inference mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub costs: CostReport,
    pub mean_exit_layer: f64,
    pub samples: usize,
}

/// Evaluates `model` on `samples` with the given thresholds.
pub fn evaluate(model: &Model, samples: &[Sample], thresholds: &ExitThresholds, cost: &CostModel) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let traces = samples.par_iter().map(|s| run_dynamic(model, &s.input, thresholds, cost)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<Prediction> = traces.iter().map(|t| t.prediction.clone()).collect();
    let targets: Vec<Target> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(EvalReport {
        metrics: cosine_metrics(&preds, &targets)?,
        costs: trajectory_costs(&traces)?,
        mean_exit_layer: traces.iter().map(|t| t.exit_layer as f64).sum::<f64>() / traces.len() as f64,
        samples: samples.len(),
    })
}

/// Static evaluation: all exits disabled.
pub fn evaluate_static(model: &Model, samples: &[Sample], cost: &CostModel) -> Result<EvalReport> {
    evaluate(model, samples, &ExitThresholds::disabled(model.cfg.layers), cost)
}

/// End-to-end gradient check of the training loss over every model parameter.
#[derive(Clone, Debug)]
pub struct EndToEndCheck {
    pub report: GradCheckReport,
    /// Gradient L2 norm per top-level parameter group (`encoder`, `selector`, ...).
    pub group_norms: BTreeMap<String, f64>,
}

/// Loss of one sample through the full depth with the selector's soft keep
/// probabilities used in the forward pass, so it is smooth in every parameter.
fn soft_path_loss(model: &Model, sample: &Sample, tau: f64, lambda: f64, noise_seed: u64, tape: &mut Tape) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let prep = model.prepare_with(tape, &sample.input, SelectMode::Train, tau, &mut rng, true)?;
    let mut x = prep.tokens;
    for i in 1..=model.cfg.layers {
        x = model.layer(tape, i, x)?;
    }
    let pred = model.head(tape, x)?;
    loss_on_tape(tape, &pred, &sample.target, lambda)
}

/// Compares tape gradients of the soft-path loss with central differences of
/// step `eps`, parameter by parameter.
pub fn end_to_end_grad_check(
    model: &Model,
    sample: &Sample,
    tau: f64,
    lambda: f64,
    noise_seed: u64,
    eps: f64,
) -> Result<EndToEndCheck> {
    let mut tape = Tape::new();
    let l = soft_path_loss(model, sample, tau, lambda, noise_seed, &mut tape)?;
    tape.backward(l)?;
    let grads = tape.param_grads();
    let mut group_norms = BTreeMap::new();
    for (name, g) in grads.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *group_norms.entry(group).or_insert(0.0) += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    group_norms.values_mut().for_each(|v: &mut f64| *v = v.sqrt());

    let mut probe = model.clone();
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in &names {
        for i in 0..model.params.get(name).map_or(0, |t| t.numel()) {
            let orig = model.params.get(name).expect("listed").data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("listed").data_mut()[i] = v;
                let mut t = Tape::inference();
                let l = soft_path_loss(&probe, sample, tau, lambda, noise_seed, &mut t)?;
                Ok(t.value(l).item())
            };
            let n = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            at(orig)?;
            numeric.push(n);
            analytic.push(grads.get(name).map_or(0.0, |g| g.data()[i]));
        }
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n): (&f64, &f64)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-6)
            }
        })
        .collect();
    let max_rel_err = rel_err.iter().cloned().fold(0.0, f64::max);
    Ok(EndToEndCheck { report: GradCheckReport { analytic, numeric, rel_err, max_rel_err }, group_norms })
}
