use serde::{Deserialize, Serialize};

use super::Target;
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::tensor::cosine_similarity;

/// Similarities in percentage points, losses as plain means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sim_a: f64,
    pub sim_w: f64,
    pub loss_action: f64,
    pub loss_dist: f64,
}

fn cosine_or_zero(a: &[f64], b: &[f64], what: &str) -> f64 {
    cosine_similarity(a, b).unwrap_or_else(|| {
        log::warn!("zero-norm {what} vector, similarity taken as 0");
        0.0
    })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-sample metrics averaged over the batch.
pub fn cosine_metrics(predictions: &[Prediction], targets: &[Target]) -> Result<Metrics> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut m = Metrics { sim_a: 0.0, sim_w: 0.0, loss_action: 0.0, loss_dist: 0.0 };
    for (p, t) in predictions.iter().zip(targets) {
        if p.action.shape() != t.action.shape() || p.waypoints.shape() != t.waypoints.shape() {
            return Err(Error::shape("cosine_metrics", "prediction and target shapes differ"));
        }
        let ca = cosine_or_zero(p.action.data(), t.action.data(), "action");
        m.sim_a += ca;
        m.sim_w += cosine_or_zero(p.waypoints.data(), t.waypoints.data(), "waypoint");
        m.loss_action += mse(p.action.data(), t.action.data()) + (1.0 - ca);
        m.loss_dist += (p.distance - t.distance).powi(2);
    }
    let n = predictions.len() as f64;
    Ok(Metrics { sim_a: 100.0 * m.sim_a / n, sim_w: 100.0 * m.sim_w / n, loss_action: m.loss_action / n, loss_dist: m.loss_dist / n })
}
