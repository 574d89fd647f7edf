use std::collections::{BTreeSet, HashMap};

use log::warn;

use super::EventRecord;
use crate::error::{Error, Result};
use crate::numerics::Array;

/// Hourly grid of raw (unnormalized) values with observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub record_ids: Vec<String>,
    pub features: Vec<String>,
    pub steps: usize,
    /// `[N, T, D]`, 0 where unobserved.
    pub values: Array,
    /// `[N, T, D]`, 1 where at least one reading fell in the hour.
    pub mask: Array,
    pub labels: Vec<u8>,
}

impl RawGrid {
    pub fn n_records(&self) -> usize {
        self.record_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn labels_array(&self) -> Array {
        Array::from_fn(&[self.labels.len()], |i| self.labels[i] as f32)
    }
}

/// Averages readings per (record, hour, feature) into a `[N, steps, D]` grid.
///
/// Records come from `labels` (file order). Readings at or after `steps`
/// hours are dropped. When `vocabulary` is `None` the feature set is every
/// feature seen in the events, sorted lexicographically.
pub fn bin_hourly(
    events: &[EventRecord],
    labels: &[(String, u8)],
    vocabulary: Option<&[String]>,
    steps: usize,
) -> Result<RawGrid> {
    if labels.is_empty() {
        return Err(Error::invalid("no records"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be positive"));
    }
    let features: Vec<String> = match vocabulary {
        Some(v) => {
            let set: BTreeSet<&String> = v.iter().collect();
            if set.len() != v.len() || v.iter().any(String::is_empty) {
                return Err(Error::invalid("feature vocabulary must be non-empty and unique"));
            }
            v.to_vec()
        }
        None => events
            .iter()
            .map(|e| e.feature.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if features.is_empty() {
        return Err(Error::invalid("no features"));
    }
    let feat_idx: HashMap<&str, usize> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    let rec_idx: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();

    let (n, d) = (labels.len(), features.len());
    let mut sums = vec![0.0f64; n * steps * d];
    let mut counts = vec![0u32; n * steps * d];
    let mut unknown_records = BTreeSet::new();
    let mut unknown_features = BTreeSet::new();
    for e in events {
        let Some(&r) = rec_idx.get(e.record_id.as_str()) else {
            unknown_records.insert(e.record_id.clone());
            continue;
        };
        let Some(&f) = feat_idx.get(e.feature.as_str()) else {
            unknown_features.insert(e.feature.clone());
            continue;
        };
        if !(e.t_hours >= 0.0) || e.t_hours >= steps as f64 {
            continue;
        }
        let h = e.t_hours.floor() as usize;
        let cell = (r * steps + h) * d + f;
        sums[cell] += e.value;
        counts[cell] += 1;
    }
    if !unknown_records.is_empty() {
        warn!(
            "{} record id(s) in events have no label and were skipped",
            unknown_records.len()
        );
    }
    if !unknown_features.is_empty() {
        warn!("features outside the vocabulary were skipped: {unknown_features:?}");
    }

    let mut values = Array::zeros(&[n, steps, d]);
    let mut mask = Array::zeros(&[n, steps, d]);
    for cell in 0..n * steps * d {
        if counts[cell] > 0 {
            values[cell] = (sums[cell] / counts[cell] as f64) as f32;
            mask[cell] = 1.0;
        }
    }
    for (r, (id, _)) in labels.iter().enumerate() {
        let row = &mask.data()[r * steps * d..(r + 1) * steps * d];
        if row.iter().all(|&m| m == 0.0) {
            warn!("record `{id}` has no events in the first {steps} hours; kept as all-missing");
        }
    }
    Ok(RawGrid {
        record_ids: labels.iter().map(|(id, _)| id.clone()).collect(),
        features,
        steps,
        values,
        mask,
        labels: labels.iter().map(|(_, l)| *l).collect(),
    })
}
