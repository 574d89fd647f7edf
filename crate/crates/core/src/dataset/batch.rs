use super::compute_delta;
use crate::error::{Error, Result};
use crate::numerics::Array;

/// Model-ready view of a set of records. All `[N, T, D]` arrays share a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    pub record_ids: Vec<String>,
    /// Normalized values; 0 wherever `mask` is 0.
    pub values: Array,
    /// 1 = observed in this (training) view.
    pub mask: Array,
    pub delta: Array,
    /// 1 = artificially hidden cell scored against `ground_truth`.
    pub eval_mask: Array,
    pub ground_truth: Array,
    /// `[N]`, 0/1.
    pub labels: Array,
}

impl TimeSeriesBatch {
    /// Builds a batch with no artificial masking yet; `values` must already be
    /// normalized with the missing sentinel applied.
    pub fn new(record_ids: Vec<String>, values: Array, mask: Array, labels: Array) -> Result<Self> {
        if values.shape() != mask.shape() || values.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        let n = values.shape()[0];
        if labels.len() != n || record_ids.len() != n {
            return Err(Error::invalid(format!(
                "{n} records but {} labels and {} ids",
                labels.len(),
                record_ids.len()
            )));
        }
        let delta = compute_delta(&mask);
        let eval_mask = Array::zeros(values.shape());
        let ground_truth = values.clone();
        Ok(Self {
            record_ids,
            values,
            mask,
            delta,
            eval_mask,
            ground_truth,
            labels,
        })
    }

    pub fn n_records(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn has_eval_mask(&self) -> bool {
        self.eval_mask.data().iter().any(|&x| x > 0.0)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }

    /// Records `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            record_ids: rows.iter().map(|&r| self.record_ids[r].clone()).collect(),
            values: self.values.select_rows(rows),
            mask: self.mask.select_rows(rows),
            delta: self.delta.select_rows(rows),
            eval_mask: self.eval_mask.select_rows(rows),
            ground_truth: self.ground_truth.select_rows(rows),
            labels: self.labels.select_rows(rows),
        }
    }

    /// Same records with time running backwards. Delta is recomputed on the
    /// reversed mask, since gaps are measured relative to the direction of travel.
    pub fn reversed(&self) -> Self {
        let rev = |a: &Array| reverse_time(a);
        let mask = rev(&self.mask);
        Self {
            record_ids: self.record_ids.clone(),
            values: rev(&self.values),
            delta: compute_delta(&mask),
            mask,
            eval_mask: rev(&self.eval_mask),
            ground_truth: rev(&self.ground_truth),
            labels: self.labels.clone(),
        }
    }

    /// `[N, D]` slice at step `t` of a `[N, T, D]` array.
    pub fn step_of(a: &Array, t: usize) -> Array {
        let s = a.shape();
        let (n, steps, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let off = (r * steps + t) * d;
            out.extend_from_slice(&a.data()[off..off + d]);
        }
        Array::new(vec![n, d], out).expect("non-empty slice")
    }

    /// Checks the structural invariants between the arrays.
    pub fn validate(&self) -> Result<()> {
        let shape = self.values.shape();
        for (name, a) in [
            ("mask", &self.mask),
            ("delta", &self.delta),
            ("eval_mask", &self.eval_mask),
            ("ground_truth", &self.ground_truth),
        ] {
            if a.shape() != shape {
                return Err(Error::invalid(format!("{name} shape {:?} != {:?}", a.shape(), shape)));
            }
        }
        for i in 0..self.mask.len() {
            if self.mask[i] > 0.0 && self.eval_mask[i] > 0.0 {
                return Err(Error::invalid(format!("cell {i} is both observed and held out")));
            }
            if self.eval_mask[i] > 0.0 && !self.ground_truth[i].is_finite() {
                return Err(Error::invalid(format!("held-out cell {i} has no finite ground truth")));
            }
        }
        if compute_delta(&self.mask) != self.delta {
            return Err(Error::invalid("delta does not match mask"));
        }
        Ok(())
    }
}

pub(crate) fn reverse_time(a: &Array) -> Array {
    let s = a.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    let mut out = a.clone();
    for r in 0..n {
        for step in 0..t {
            let src = (r * t + step) * d;
            let dst = (r * t + (t - 1 - step)) * d;
            out.data_mut()[dst..dst + d].copy_from_slice(&a.data()[src..src + d]);
        }
    }
    out
}
