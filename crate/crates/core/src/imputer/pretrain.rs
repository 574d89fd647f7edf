use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_forward, impute, init_params, Checkpoint, ImputerConfig};
use crate::dataset::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::evaluation::imputation_metrics;
use crate::numerics::Graph;
use crate::rng::{derive_seed, rng_from};
use crate::training::{adam_step, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "pretrain.batch_size".into(),
                constraint: "must be positive".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config {
                key: "pretrain.lr".into(),
                constraint: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Record-weighted mean total loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation metric.
    pub checkpoint: Checkpoint,
    /// Validation metric of the untrained initialization.
    pub initial_val_metric: f64,
    pub history: Vec<PretrainEpoch>,
}

/// Held-out MAE when `batch` carries an evaluation mask, otherwise the
/// reconstruction loss on observed cells.
pub fn validation_metric(params: &crate::numerics::ParamStore, cfg: &ImputerConfig, batch: &TimeSeriesBatch, chunk: usize) -> Result<f64> {
    let out = impute(params, cfg, batch, chunk)?;
    if batch.has_eval_mask() {
        Ok(imputation_metrics(&out.imputed, &batch.ground_truth, &batch.eval_mask)?.mae)
    } else {
        Ok(out.loss_reconstruction)
    }
}

/// Trains the imputer with Adam on `train` and keeps the parameters that
/// score best on `val`. Epoch 0 (the initialization) is a candidate, so zero
/// epochs returns the initialization unchanged.
pub fn pretrain(
    train: &TimeSeriesBatch,
    val: &TimeSeriesBatch,
    cfg: &ImputerConfig,
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    pcfg.validate()?;
    if train.n_records() == 0 || val.n_records() == 0 {
        return Err(Error::invalid("pretraining needs non-empty train and validation sets"));
    }
    let mut params = init_params(cfg)?;
    let initial = validation_metric(&params, cfg, val, pcfg.batch_size)?;
    let mut best = (0usize, initial, params.clone());
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(pcfg.epochs);
    let mut last_finite = None;
    let mut order: Vec<usize> = (0..train.n_records()).collect();
    for epoch in 1..=pcfg.epochs {
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "pretrain-shuffle", epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(pcfg.batch_size).enumerate() {
            let diverged = |what: String| Error::Diverged {
                at: format!("epoch {epoch}, batch {b}: {what}"),
                last_finite_epoch: last_finite,
            };
            let sub = train.subset(rows);
            let mut g = Graph::new();
            let out = match build_forward(&mut g, &params, cfg, &sub, true) {
                Err(Error::NonFinite(what)) => return Err(diverged(what)),
                r => r?,
            };
            let loss = g.value(out.loss_total).item() as f64;
            if !loss.is_finite() {
                return Err(diverged("loss".into()));
            }
            g.backward(out.loss_total)?;
            match adam_step(&mut params, &g.gradients(), &mut state, pcfg.lr) {
                Err(Error::NonFinite(what)) => return Err(diverged(what)),
                r => r?,
            }
            loss_sum += loss * rows.len() as f64;
        }
        let val_metric = validation_metric(&params, cfg, val, pcfg.batch_size).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                at: format!("epoch {epoch}, validation: {what}"),
                last_finite_epoch: last_finite,
            },
            e => e,
        })?;
        last_finite = Some(epoch);
        log::debug!("pretrain epoch {epoch}: val {val_metric:.5}");
        if val_metric < best.1 {
            best = (epoch, val_metric, params.clone());
        }
        history.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / train.n_records() as f64,
            val_metric,
        });
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: best.2,
            epoch: best.0,
            val_metric: Some(best.1),
            norm: None,
            features: Vec::new(),
        },
        initial_val_metric: initial,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bin_hourly, normalize_apply, normalize_fit, synth_generate, SynthConfig};
    use crate::masking::{apply_nonuniform_mask, MaskPlan};
    use crate::numerics::Array;

    fn data() -> (TimeSeriesBatch, TimeSeriesBatch, ImputerConfig) {
        let s = synth_generate(&SynthConfig {
            n_records: 40,
            steps: 12,
            n_features: 3,
            missing_rate: 0.3,
            seed: 5,
        })
        .unwrap();
        let grid = bin_hourly(&s.events, &s.labels, None, 12).unwrap();
        let stats = normalize_fit(&grid.values, &grid.mask).unwrap();
        let values = normalize_apply(&grid.values, &grid.mask, &stats).unwrap();
        let b = TimeSeriesBatch::new(grid.record_ids.clone(), values, grid.mask.clone(), grid.labels_array()).unwrap();
        let train = apply_nonuniform_mask(&b.subset(&(0..30).collect::<Vec<_>>()), &MaskPlan::default()).unwrap();
        let val = apply_nonuniform_mask(&b.subset(&(30..40).collect::<Vec<_>>()), &MaskPlan::default()).unwrap();
        let cfg = ImputerConfig {
            d_features: 3,
            hidden: 8,
            embed_dim: 4,
            ..Default::default()
        };
        (train, val, cfg)
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let (train, val, cfg) = data();
        let out = pretrain(&train, &val, &cfg, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.checkpoint.params, init_params(&cfg).unwrap());
        assert_eq!(out.checkpoint.epoch, 0);
    }

    #[test]
    fn deterministic_and_learning() {
        let (train, val, cfg) = data();
        let pc = PretrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
        };
        let a = pretrain(&train, &val, &cfg, &pc).unwrap();
        let b = pretrain(&train, &val, &cfg, &pc).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert!(a.history[19].train_loss < a.history[0].train_loss);
        // structural zeros survive training
        for dir in ["fwd", "bwd"] {
            let w = a.checkpoint.params.get(&format!("{dir}.feat.w")).unwrap();
            assert!((0..3).all(|i| w[i * 3 + i] == 0.0));
        }
    }

    #[test]
    fn divergence_reported() {
        let (train, val, cfg) = data();
        let mut bad = train.clone();
        bad.values = Array::from_fn(bad.values.shape(), |i| if bad.mask[i] > 0.0 { 1e38 } else { 0.0 });
        let err = pretrain(&bad, &val, &cfg, &PretrainConfig { epochs: 2, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Diverged { last_finite_epoch: None, .. }), "{err}");
    }
}
