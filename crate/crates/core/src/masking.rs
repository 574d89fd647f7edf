//! Artificial hold-out masking of observed cells for imputer training and scoring.
//!
//! Exactly `floor(rate * observed)` observed cells are hidden. Cells are drawn
//! without replacement with probability proportional to the weight of their
//! feature (Efraimidis-Spirakis weighted reservoir: each cell gets the key
//! `ln(u) / w` and the largest keys win).
//!
//! The default weighting, `inverse_missing_rate`, gives feature `d` the weight
//! `1 - r_d` where `r_d` is its natural missing rate in the batch, so densely
//! observed features lose more cells. It is a stand-in for the original
//! non-uniform rule; `explicit` weights let any other rule be plugged in.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_delta, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    #[default]
    InverseMissingRate,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPlan {
    pub rate: f64,
    pub weights: WeightMode,
    pub seed: u64,
}

impl Default for MaskPlan {
    fn default() -> Self {
        Self {
            rate: 0.10,
            weights: WeightMode::default(),
            seed: 0,
        }
    }
}

impl MaskPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::invalid(format!("mask rate must be in (0, 1), got {}", self.rate)));
        }
        if let WeightMode::Explicit(w) = &self.weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|&x| x == 0.0) {
                return Err(Error::invalid("explicit mask weights must be non-negative and not all zero"));
            }
        }
        Ok(())
    }

    /// Per-feature weights for this batch.
    pub fn resolve_weights(&self, batch: &TimeSeriesBatch) -> Result<Vec<f64>> {
        let d = batch.n_features();
        match &self.weights {
            WeightMode::Uniform => Ok(vec![1.0; d]),
            WeightMode::InverseMissingRate => {
                let cells_per_feature = (batch.n_records() * batch.steps()) as f64;
                let mut observed = vec![0usize; d];
                for (i, &m) in batch.mask.data().iter().enumerate() {
                    if m > 0.0 {
                        observed[i % d] += 1;
                    }
                }
                // 1 - missing rate == observed fraction
                Ok(observed.iter().map(|&o| o as f64 / cells_per_feature).collect())
            }
            WeightMode::Explicit(w) => {
                if w.len() != d {
                    return Err(Error::invalid(format!(
                        "{} explicit mask weights for {d} features",
                        w.len()
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Number of cells hidden from `observed` cells at `rate`.
pub fn mask_budget(rate: f64, observed: usize) -> usize {
    // the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    (rate * observed as f64 + 1e-9).floor() as usize
}

/// Hides a weighted random subset of observed cells; see the module docs.
pub fn apply_nonuniform_mask(batch: &TimeSeriesBatch, plan: &MaskPlan) -> Result<TimeSeriesBatch> {
    plan.validate()?;
    if batch.has_eval_mask() {
        return Err(Error::invalid("batch already carries an evaluation mask"));
    }
    let weights = plan.resolve_weights(batch)?;
    let d = batch.n_features();
    let observed: Vec<usize> = batch
        .mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, _)| i)
        .collect();
    if observed.is_empty() {
        return Err(Error::invalid("no observed cells to mask"));
    }
    let k = mask_budget(plan.rate, observed.len());
    if k == 0 {
        return Err(Error::invalid(format!(
            "rate {} over {} observed cells selects nothing",
            plan.rate,
            observed.len()
        )));
    }

    let mut rng = rng_from(plan.seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(observed.len());
    for &cell in &observed {
        // one draw per observed cell regardless of weight keeps streams aligned
        let u: f64 = 1.0 - rng.random::<f64>();
        let w = weights[cell % d];
        if w > 0.0 {
            keyed.push((u.ln() / w, cell));
        }
    }
    if keyed.len() < k {
        return Err(Error::invalid(format!(
            "only {} observed cells have positive weight, {k} requested",
            keyed.len()
        )));
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut out = batch.clone();
    for &(_, cell) in &keyed[..k] {
        out.ground_truth[cell] = batch.values[cell];
        out.mask[cell] = 0.0;
        out.values[cell] = 0.0;
        out.eval_mask[cell] = 1.0;
    }
    out.delta = compute_delta(&out.mask);
    Ok(out)
}
