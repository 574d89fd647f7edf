use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{normalize_apply, normalize_fit, FoldSplit, NormStats, RawGrid, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::masking::{apply_nonuniform_mask, MaskPlan};
use crate::numerics::{Array, ParamStore};
use crate::rng::derive_seed;
use crate::store::Archive;

pub const GRID_KIND: &str = "grid";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridMeta {
    record_ids: Vec<String>,
    features: Vec<String>,
    steps: usize,
}

impl RawGrid {
    pub fn to_archive(&self) -> Archive {
        let mut arrays = ParamStore::new();
        arrays.insert("values", self.values.clone());
        arrays.insert("mask", self.mask.clone());
        arrays.insert("labels", self.labels_array());
        let meta = json!(GridMeta {
            record_ids: self.record_ids.clone(),
            features: self.features.clone(),
            steps: self.steps,
        });
        Archive::new(GRID_KIND, meta, arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path, GRID_KIND)?;
        let bad = |message: String| Error::Archive {
            path: path.to_path_buf(),
            message,
        };
        let meta: GridMeta = serde_json::from_value(a.meta).map_err(|e| bad(format!("grid manifest: {e}")))?;
        let values = a.arrays.get("values")?.clone();
        let mask = a.arrays.get("mask")?.clone();
        let labels = a.arrays.get("labels")?;
        let (n, d) = (meta.record_ids.len(), meta.features.len());
        if values.shape() != [n, meta.steps, d] || mask.shape() != values.shape() || labels.len() != n {
            return Err(bad("array shapes disagree with the manifest".into()));
        }
        Ok(Self {
            labels: labels.data().iter().map(|&l| l as u8).collect(),
            record_ids: meta.record_ids,
            features: meta.features,
            steps: meta.steps,
            values,
            mask,
        })
    }

    /// Normalized batch of `rows`, using `stats` fitted elsewhere.
    pub fn batch(&self, rows: &[usize], stats: &NormStats) -> Result<TimeSeriesBatch> {
        let values = self.values.select_rows(rows);
        let mask = self.mask.select_rows(rows);
        let normalized = normalize_apply(&values, &mask, stats)?;
        let ids = rows.iter().map(|&r| self.record_ids[r].clone()).collect();
        let labels = Array::from_fn(&[rows.len()], |i| self.labels[rows[i]] as f32);
        TimeSeriesBatch::new(ids, normalized, mask, labels)
    }
}

/// One fold's splits, normalized with statistics of its training records only.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFold {
    pub fold_index: usize,
    pub stats: NormStats,
    pub train: TimeSeriesBatch,
    pub val: TimeSeriesBatch,
    pub test: TimeSeriesBatch,
}

pub fn prepare_fold(grid: &RawGrid, split: &FoldSplit) -> Result<PreparedFold> {
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::invalid(format!("fold {} has an empty {name} split", split.fold_index)));
        }
    }
    let stats = normalize_fit(&grid.values.select_rows(&split.train), &grid.mask.select_rows(&split.train))?;
    Ok(PreparedFold {
        fold_index: split.fold_index,
        train: grid.batch(&split.train, &stats)?,
        val: grid.batch(&split.val, &stats)?,
        test: grid.batch(&split.test, &stats)?,
        stats,
    })
}

impl PreparedFold {
    /// Train, validation and test views with artificially held-out cells.
    /// Each split gets its own seed stream derived from `seed` and the fold.
    pub fn masked(&self, plan: &MaskPlan, seed: u64) -> Result<[TimeSeriesBatch; 3]> {
        let f = self.fold_index as u64;
        let with = |label: &str, b: &TimeSeriesBatch| {
            let p = MaskPlan {
                seed: derive_seed(seed, label, f),
                ..plan.clone()
            };
            apply_nonuniform_mask(b, &p)
        };
        Ok([
            with("mask-train", &self.train)?,
            with("mask-val", &self.val)?,
            with("mask-test", &self.test)?,
        ])
    }
}
