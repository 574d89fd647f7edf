//! Bidirectional decay-gated recurrent imputer.
//!
//! Each direction runs a GRU over the series. At every step the hidden state
//! is attenuated by a learned decay of the time gap, a history regression
//! estimates the features from it, a feature regression (no self-loops)
//! re-estimates each feature from the others, and a learned gate fuses the
//! two. The recurrent cell consumes the embedded complement series plus a
//! sinusoidal positional code and the mask.
//!
//! The forward direction starts from a zero state. When attention
//! conditioning is enabled the backward direction starts from an
//! attention-pooled summary of the forward hidden sequence.

mod checkpoint;
mod model;
mod pretrain;

pub use checkpoint::Checkpoint;
pub use model::{
    attention_condition, build_forward, decay, impute, impute_step, positional_embedding,
    DirectionVars, ImputerGraph, ImputerOutput, SharedVars, StepOutput,
};
pub use pretrain::{pretrain, validation_metric, PretrainConfig, PretrainEpoch, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_cell, init_linear, init_uniform, CellKind};
use crate::numerics::{Array, ParamStore};

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputerConfig {
    pub d_features: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub attention_heads: usize,
    /// Condition the backward initial state on the forward hidden sequence.
    pub use_attention: bool,
    pub consistency_weight: f64,
    /// Weight of the reconstruction loss on artificially held-out cells.
    pub holdout_weight: f64,
    pub seed: u64,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        Self {
            d_features: 35,
            hidden: 108,
            embed_dim: 64,
            attention_heads: 1,
            use_attention: true,
            consistency_weight: 0.1,
            holdout_weight: 1.0,
            seed: 0,
        }
    }
}

impl ImputerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| {
            Err(Error::Config {
                key: format!("imputer.{key}"),
                constraint: constraint.into(),
            })
        };
        if self.d_features == 0 {
            return bad("d_features", "must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad("embed_dim", "must be positive and even");
        }
        if self.attention_heads == 0 {
            return bad("attention_heads", "must be positive");
        }
        if !(self.consistency_weight >= 0.0) || !self.consistency_weight.is_finite() {
            return bad("consistency_weight", "must be finite and >= 0");
        }
        if !(self.holdout_weight >= 0.0) || !self.holdout_weight.is_finite() {
            return bad("holdout_weight", "must be finite and >= 0");
        }
        Ok(())
    }

    /// Width of the recurrent cell input: embedding plus mask.
    pub fn cell_input(&self) -> usize {
        self.embed_dim + self.d_features
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, h, e) = (self.d_features, self.hidden, self.embed_dim);
        let per_dir = (d * h + h)         // decay_h
            + (d * d + d)                 // decay_x
            + (h * d + d)                 // hist
            + (d * d + d)                 // feat
            + (2 * d * d + d)             // fuse
            + CellKind::Gru.param_count(self.cell_input(), h);
        let shared = (d * e + e) + self.attention_heads * (h * h + h);
        2 * per_dir + shared
    }
}

/// Fresh parameters: uniform `±1/sqrt(fan_in)`, with the feature-regression
/// diagonal and the off-diagonal of the input-decay matrix set to zero.
pub fn init_params(cfg: &ImputerConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, h, e, seed) = (cfg.d_features, cfg.hidden, cfg.embed_dim, cfg.seed);
    let mut p = ParamStore::new();
    for dir in DIRECTIONS {
        init_linear(&mut p, &format!("{dir}.decay_h"), d, h, seed);
        init_linear(&mut p, &format!("{dir}.decay_x"), d, d, seed);
        init_linear(&mut p, &format!("{dir}.hist"), h, d, seed);
        init_linear(&mut p, &format!("{dir}.feat"), d, d, seed);
        init_linear(&mut p, &format!("{dir}.fuse"), 2 * d, d, seed);
        init_cell(&mut p, &format!("{dir}.rnn"), CellKind::Gru, cfg.cell_input(), h, seed);
        for (name, keep_diag) in [(format!("{dir}.feat.w"), false), (format!("{dir}.decay_x.w"), true)] {
            let w = p.get_mut(&name).expect("just inserted");
            for i in 0..d {
                for j in 0..d {
                    if (i == j) != keep_diag {
                        w[i * d + j] = 0.0;
                    }
                }
            }
        }
    }
    init_linear(&mut p, "embed", d, e, seed);
    for k in 0..cfg.attention_heads {
        let key = format!("attn.h{k}.key");
        let query = format!("attn.h{k}.query");
        p.insert(key.clone(), init_uniform(&[h, h], h, seed, &key));
        p.insert(query.clone(), init_uniform(&[h, 1], h, seed, &query));
    }
    debug_assert_eq!(p.total_size(), cfg.param_count());
    Ok(p)
}

/// `1 - I`: removes self-regression from the feature regression.
pub(crate) fn off_diagonal(d: usize) -> Array {
    Array::from_fn(&[d, d], |i| if i / d == i % d { 0.0 } else { 1.0 })
}
