//! Constrained Bayesian optimization of exit thresholds.
//!
//! The optimizer maximizes a penalized objective `V = J - P` with a Gaussian
//! process surrogate (squared-exponential kernel, ARD length scales fit by
//! maximum likelihood on unit-cube inputs) and expected improvement. The
//! first `ceil(budget / 4)` points come from a Latin hypercube.

use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::exit::{trajectory_costs, CostReport, ExitProfile, ExitThresholds, PreGate};
use crate::model::Model;
use crate::navsim::Target;
use crate::tensor::cosine_similarity;

/// Box bounds; a zero-width dimension is held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("search space bounds must be nonempty and of equal length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::invalid("search space needs finite bounds with lower <= upper"));
        }
        Ok(SearchSpace { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn free(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.upper[i] > self.lower[i]).collect()
    }

    fn from_unit(&self, free: &[usize], u: &[f64]) -> Vec<f64> {
        let mut x = self.lower.clone();
        for (&i, &ui) in free.iter().zip(u) {
            x[i] = self.lower[i] + ui * (self.upper[i] - self.lower[i]);
        }
        x
    }

    fn to_unit(&self, free: &[usize], x: &[f64]) -> Vec<f64> {
        free.iter().map(|&i| (x[i] - self.lower[i]) / (self.upper[i] - self.lower[i])).collect()
    }
}

/// Budgets on modeled cost and floors on similarity (fractions in `[0, 1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub t_max: f64,
    pub g_max: f64,
    pub f_max: f64,
    pub sim_a_min: f64,
    pub sim_w_min: f64,
    /// Weights of the time, memory and FLOPs violations.
    pub xi: [f64; 3],
}

impl Constraints {
    pub fn validate(&self) -> Result<()> {
        let budgets = [self.t_max, self.g_max, self.f_max];
        if budgets.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("cost budgets must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sim_a_min) || !(0.0..=1.0).contains(&self.sim_w_min) {
            return Err(Error::invalid("similarity floors must lie in [0, 1]"));
        }
        if self.xi.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::invalid("penalty weights must be non-negative"));
        }
        Ok(())
    }

    /// Budgets at `ratio` times the static model's costs.
    pub fn scaled(static_cost: &CostReport, flops_ratio: f64, time_ratio: f64, mem_ratio: f64) -> Self {
        Constraints {
            t_max: static_cost.mean_time_units * time_ratio,
            g_max: static_cost.peak_mem_units * mem_ratio,
            f_max: static_cost.mean_flops * flops_ratio,
            sim_a_min: 0.95,
            sim_w_min: 0.96,
            xi: [0.8, 0.5, 1.0],
        }
    }
}

/// Mean `Sim(a) + λ Sim(w)` over timesteps; a zero-norm vector scores 0.
pub fn objective_j(sim_a: &[f64], sim_w: &[f64], lambda: f64) -> Result<f64> {
    if sim_a.len() != sim_w.len() || sim_a.is_empty() {
        return Err(Error::invalid("objective needs matching nonempty similarity lists"));
    }
    let n = sim_a.len() as f64;
    Ok(sim_a.iter().sum::<f64>() / n + lambda * sim_w.iter().sum::<f64>() / n)
}

/// `Σ ξ_k max(0, g_k)` over normalized time, memory and FLOPs violations,
/// plus unit-weight similarity shortfalls.
pub fn penalty_p(cost: &CostReport, sim_a: f64, sim_w: f64, c: &Constraints) -> f64 {
    let g = [
        (cost.mean_time_units - c.t_max) / c.t_max,
        (cost.peak_mem_units - c.g_max) / c.g_max,
        (cost.mean_flops - c.f_max) / c.f_max,
    ];
    let weighted: f64 = g.iter().zip(&c.xi).map(|(g, xi)| xi * g.max(0.0)).sum();
    weighted + (c.sim_a_min - sim_a).max(0.0) + (c.sim_w_min - sim_w).max(0.0)
}

/// One evaluated point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    pub iter: usize,
    pub x: Vec<f64>,
    pub j: f64,
    pub p: f64,
    pub v: f64,
    pub cost: Option<CostReport>,
    pub sim_a: Option<f64>,
    pub sim_w: Option<f64>,
    pub seed: u64,
}

/// What an objective returns for one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub p: f64,
    pub cost: Option<CostReport>,
    pub sim_a: Option<f64>,
    pub sim_w: Option<f64>,
}

impl Evaluation {
    pub fn v(&self) -> f64 {
        self.j - self.p
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    /// Append-only.
    pub history: Vec<BoRecord>,
    /// Surrogate length scales on unit-cube inputs, one per free dimension.
    pub length_scales: Vec<f64>,
}

impl BoState {
    /// Index of the best record; earliest wins ties.
    pub fn incumbent(&self) -> Option<&BoRecord> {
        self.history.iter().fold(None, |best: Option<&BoRecord>, r| match best {
            Some(b) if b.v >= r.v => Some(b),
            _ => Some(r),
        })
    }
}

pub fn write_history<W: Write>(mut w: W, records: &[BoRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history<R: BufRead>(r: R) -> Result<Vec<BoRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("history line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn iter_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `n` stratified points in the unit cube of dimension `d`.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut pts = vec![vec![0.0; d]; n];
    for k in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            p[k] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    pts
}

const NUGGET: f64 = 1e-6;
const LOG_LS_RANGE: (f64, f64) = (-4.6, 2.3);

/// Squared-exponential GP on standardized targets with a profiled amplitude.
struct Gp {
    x: Vec<Vec<f64>>,
    ls: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    amp: f64,
}

fn kernel(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    (-0.5 * r2).exp()
}

fn factor(x: &[Vec<f64>], ls: &[f64]) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = x.len();
    let mut jitter = NUGGET;
    for _ in 0..6 {
        let k = DMatrix::from_fn(n, n, |i, j| kernel(&x[i], &x[j], ls) + if i == j { jitter } else { 0.0 });
        if let Some(c) = Cholesky::new(k) {
            return Some(c);
        }
        jitter *= 10.0;
    }
    None
}

/// Profiled log marginal likelihood (amplitude at its optimum).
fn profiled_lml(x: &[Vec<f64>], y: &DVector<f64>, ls: &[f64]) -> f64 {
    let Some(chol) = factor(x, ls) else { return f64::NEG_INFINITY };
    let n = y.len() as f64;
    let quad = y.dot(&chol.solve(y)).max(1e-300);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * n * (quad / n).ln() - 0.5 * logdet
}

fn fit_length_scales(x: &[Vec<f64>], y: &DVector<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let d = x[0].len();
    let mut starts: Vec<Vec<f64>> = [0.1f64, 0.3, 1.0].iter().map(|l| vec![l.ln(); d]).collect();
    starts.extend((0..4).map(|_| (0..d).map(|_| rng.gen_range(LOG_LS_RANGE.0..LOG_LS_RANGE.1)).collect()));
    let score = |lg: &[f64]| profiled_lml(x, y, &lg.iter().map(|v| v.exp()).collect::<Vec<_>>());
    let mut best = (f64::NEG_INFINITY, starts[0].clone());
    for start in starts {
        let (mut cur, mut f) = (start.clone(), score(&start));
        let mut step = 1.0;
        while step > 0.02 {
            let mut improved = false;
            for k in 0..d {
                for dir in [-1.0, 1.0] {
                    let mut cand = cur.clone();
                    cand[k] = (cand[k] + dir * step).clamp(LOG_LS_RANGE.0, LOG_LS_RANGE.1);
                    let fc = score(&cand);
                    if fc > f {
                        (cur, f, improved) = (cand, fc, true);
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if f > best.0 {
            best = (f, cur);
        }
    }
    best.1.iter().map(|v| v.exp()).collect()
}

impl Gp {
    fn fit(x: Vec<Vec<f64>>, y: &DVector<f64>, ls: Vec<f64>) -> Option<Self> {
        let chol = factor(&x, &ls)?;
        let alpha = chol.solve(y);
        let amp = (y.dot(&alpha) / y.len() as f64).max(1e-12);
        Some(Gp { x, ls, chol, alpha, amp })
    }

    fn predict(&self, u: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel(xi, u, &self.ls)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = self.amp * (1.0 + NUGGET - k.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }
}

fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd < 1e-12 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sd;
    let n = Normal::standard();
    (mean - best) * n.cdf(z) + sd * n.pdf(z)
}

/// Multi-start coordinate search for the EI maximizer in the unit cube.
fn maximize_ei(gp: &Gp, best: f64, d: usize, rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let ei = |u: &[f64]| {
        let (m, s) = gp.predict(u);
        expected_improvement(m, s, best)
    };
    let mut cands: Vec<(f64, Vec<f64>)> = (0..512)
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            (ei(&u), u)
        })
        .collect();
    cands.extend(gp.x.iter().map(|u| (ei(u), u.clone())));
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best_pt = cands[0].clone();
    for (f0, start) in cands.into_iter().take(8) {
        let (mut cur, mut f) = (start, f0);
        let mut step = 0.1;
        while step > 1e-4 {
            let mut improved = false;
            for k in 0..d {
                for dir in [-1.0, 1.0] {
                    let mut cand = cur.clone();
                    cand[k] = (cand[k] + dir * step).clamp(0.0, 1.0);
                    let fc = ei(&cand);
                    if fc > f {
                        (cur, f, improved) = (cand, fc, true);
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if f > best_pt.0 {
            best_pt = (f, cur);
        }
    }
    (best_pt.1, best_pt.0)
}

/// Next point to evaluate (unit coordinates over free dimensions).
fn propose(
    space: &SearchSpace,
    free: &[usize],
    state: &mut BoState,
    n_init: usize,
    seed: u64,
    iter: usize,
) -> Vec<f64> {
    let d = free.len();
    if iter < n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4C48_53);
        return latin_hypercube(n_init, d, &mut rng).swap_remove(iter);
    }
    let mut rng = iter_rng(seed, iter);
    let xs: Vec<Vec<f64>> = state.history.iter().map(|r| space.to_unit(free, &r.x)).collect();
    let vs: Vec<f64> = state.history.iter().map(|r| r.v).collect();
    let n = vs.len() as f64;
    let mean = vs.iter().sum::<f64>() / n;
    let sd = (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let random = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen()).collect();
    if !(sd > 1e-12) {
        return random(&mut rng);
    }
    let y = DVector::from_iterator(vs.len(), vs.iter().map(|v| (v - mean) / sd));
    let ls = fit_length_scales(&xs, &y, &mut rng);
    state.length_scales = ls.clone();
    let Some(gp) = Gp::fit(xs.clone(), &y, ls) else {
        return random(&mut rng);
    };
    let best = y.max();
    let (u, ei) = maximize_ei(&gp, best, d, &mut rng);
    let duplicate = xs.iter().any(|x| x.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-9));
    if ei <= 0.0 || duplicate {
        random(&mut rng)
    } else {
        u
    }
}

/// Maximizes `objective` over `space` with `budget` evaluations.
///
/// Records already in `state.history` count toward the budget, so a run can be
/// resumed from a saved history. `sink` sees every new record as it is made.
pub fn optimize(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut state: BoState,
    objective: &mut dyn FnMut(&[f64]) -> Result<Evaluation>,
    sink: &mut dyn FnMut(&BoRecord) -> Result<()>,
) -> Result<(Vec<f64>, BoState)> {
    if budget < space.dim() + 2 {
        return Err(Error::invalid(format!("budget {budget} below dimension {} + 2", space.dim())));
    }
    let free = space.free();
    let n_init = budget.div_ceil(4);
    let todo = if free.is_empty() { 1 } else { budget };
    for iter in state.history.len()..todo {
        let u = if free.is_empty() { vec![] } else { propose(space, &free, &mut state, n_init, seed, iter) };
        let x = space.from_unit(&free, &u);
        let e = objective(&x)?;
        if !e.v().is_finite() {
            return Err(Error::NonFinite { op: "objective" });
        }
        let rec = BoRecord { iter, x, j: e.j, p: e.p, v: e.v(), cost: e.cost, sim_a: e.sim_a, sim_w: e.sim_w, seed };
        sink(&rec)?;
        state.history.push(rec);
    }
    let best = state.incumbent().expect("at least one evaluation").x.clone();
    Ok((best, state))
}

/// Uniform random search with the same evaluation budget.
pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    objective: &mut dyn FnMut(&[f64]) -> Result<Evaluation>,
) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x524E_44);
    let free = space.free();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..budget.max(1) {
        let u: Vec<f64> = free.iter().map(|_| rng.gen()).collect();
        let x = space.from_unit(&free, &u);
        let v = objective(&x)?.v();
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((x, v));
        }
    }
    Ok(best.expect("budget >= 1"))
}

/// Two-dimensional constrained test problem: a concave quadratic reward whose
/// unconstrained peak violates a linear cost budget.
pub mod benchmark {
    use super::{Evaluation, SearchSpace};

    pub const COST_BUDGET: f64 = 1.0;
    pub const XI: f64 = 1.0;

    pub fn space() -> SearchSpace {
        SearchSpace::new(vec![0.0, 0.0], vec![1.0, 1.0]).expect("valid bounds")
    }

    pub fn reward(x: &[f64]) -> f64 {
        2.0 - 2.0 * (x[0] - 0.7).powi(2) - 3.0 * (x[1] - 0.6).powi(2)
    }

    pub fn cost(x: &[f64]) -> f64 {
        x[0] + x[1]
    }

    pub fn evaluate(x: &[f64]) -> Evaluation {
        let p = XI * ((cost(x) - COST_BUDGET) / COST_BUDGET).max(0.0);
        Evaluation { j: reward(x), p, cost: None, sim_a: None, sim_w: None }
    }

    /// Best `V` on an `n × n` grid over the unit square.
    pub fn grid_best(n: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let x = [i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64];
                best = best.max(evaluate(&x).v());
            }
        }
        best
    }
}

/// Threshold search over cached exit profiles.
///
/// The point layout is `[η_2, ..., η_l, feature_dist_threshold]`.
pub struct ThresholdObjective<'a> {
    pub model: &'a Model,
    pub profiles: &'a [ExitProfile],
    pub targets: &'a [Target],
    pub cost_model: &'a CostModel,
    pub constraints: Constraints,
    pub lambda: f64,
    pub max_masked_obs: usize,
    pub max_masked_goal: usize,
    pub pre_decoder: bool,
    pub layer_exit: bool,
}

impl ThresholdObjective<'_> {
    pub fn thresholds(&self, x: &[f64]) -> ExitThresholds {
        let l = self.model.cfg.layers;
        ExitThresholds {
            eta: x[..l - 1].to_vec(),
            pre_gate: PreGate {
                feature_dist_threshold: x[l - 1],
                max_masked_obs: self.max_masked_obs,
                max_masked_goal: self.max_masked_goal,
            },
            pre_decoder: self.pre_decoder,
            layer_exit: self.layer_exit,
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        if self.profiles.is_empty() || self.profiles.len() != self.targets.len() {
            return Err(Error::invalid("threshold objective needs one target per profile"));
        }
        let th = self.thresholds(x);
        th.validate(self.model)?;
        let traces: Vec<_> = self.profiles.par_iter().map(|p| p.simulate(self.model, &th, self.cost_model)).collect();
        let cos = |a: &[f64], b: &[f64]| {
            cosine_similarity(a, b).unwrap_or_else(|| {
                log::warn!("zero-norm vector in objective, similarity taken as 0");
                0.0
            })
        };
        let sim_a: Vec<f64> =
            traces.iter().zip(self.targets).map(|(t, g)| cos(t.prediction.action.data(), g.action.data())).collect();
        let sim_w: Vec<f64> = traces
            .iter()
            .zip(self.targets)
            .map(|(t, g)| cos(t.prediction.waypoints.data(), g.waypoints.data()))
            .collect();
        let n = traces.len() as f64;
        let (ma, mw) = (sim_a.iter().sum::<f64>() / n, sim_w.iter().sum::<f64>() / n);
        let cost = trajectory_costs(&traces)?;
        Ok(Evaluation {
            j: objective_j(&sim_a, &sim_w, self.lambda)?,
            p: penalty_p(&cost, ma, mw, &self.constraints),
            cost: Some(cost),
            sim_a: Some(ma),
            sim_w: Some(mw),
        })
    }
}
