use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{build_head, FinetunePlan, HeadSpec, HeadVars, HiddenDirections, InputStrategy, WeightPolicy};
use crate::dataset::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::imputer::{build_forward, impute, Checkpoint, ImputerConfig, ImputerOutput};
use crate::numerics::{sigmoid, Array, Graph, ParamStore, Var};
use crate::store::Archive;

pub const PIPELINE_KIND: &str = "pipeline";

/// What the head reads, already on the graph.
#[derive(Clone, Debug)]
pub enum HeadInput {
    /// `[N, K]` features.
    Static(Var),
    /// Per-step `[N, D + 1]` inputs and the `[N, H]` initial state.
    Sequence { steps: Vec<Var>, h0: Var },
}

/// `[n, 1]` column holding `t / steps`.
fn hour_channel(n: usize, t: usize, steps: usize) -> Array {
    Array::full(&[n, 1], t as f32 / steps as f32)
}

/// Imputer parameters plus a head wired per a [`FinetunePlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineModel {
    pub plan: FinetunePlan,
    pub spec: HeadSpec,
    pub imputer_config: ImputerConfig,
    pub imputer: ParamStore,
    pub head: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    plan: FinetunePlan,
    spec: HeadSpec,
    imputer_config: ImputerConfig,
}

/// Builds a pipeline from a pretrained checkpoint with a freshly seeded head.
pub fn assemble(checkpoint: &Checkpoint, plan: &FinetunePlan, seed: u64) -> Result<PipelineModel> {
    let spec = plan.head_spec(&checkpoint.config)?;
    Ok(PipelineModel {
        plan: plan.clone(),
        spec,
        imputer_config: checkpoint.config.clone(),
        imputer: checkpoint.params.clone(),
        head: build_head(&spec, seed)?,
    })
}

impl PipelineModel {
    pub fn trains_imputer(&self) -> bool {
        self.plan.weight_policy == WeightPolicy::Unfrozen
    }

    /// Trainable parameters under the plan's weight policy.
    pub fn param_count(&self) -> usize {
        super::param_count(&self.spec, self.plan.weight_policy, self.imputer.total_size())
    }

    fn check_batch(&self, batch: &TimeSeriesBatch) -> Result<()> {
        if batch.n_features() != self.imputer_config.d_features {
            return Err(Error::invalid(format!(
                "batch has {} features, the pretrained imputer expects {}",
                batch.n_features(),
                self.imputer_config.d_features
            )));
        }
        Ok(())
    }

    /// Head input computed through the imputer on the graph.
    fn live_input(&self, g: &mut Graph, batch: &TimeSeriesBatch, trainable: bool) -> Result<HeadInput> {
        let out = build_forward(g, &self.imputer, &self.imputer_config, batch, trainable)?;
        let (n, steps) = (batch.n_records(), batch.steps());
        Ok(match self.plan.input_strategy {
            InputStrategy::HiddenStates => HeadInput::Static(match self.plan.hidden_directions {
                HiddenDirections::Both => g.concat_cols(&[out.last_fwd, out.last_bwd])?,
                HiddenDirections::Forward => out.last_fwd,
            }),
            strategy => {
                let mut seq = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x = match strategy {
                        InputStrategy::RawWithHiddenInit => g.constant(TimeSeriesBatch::step_of(&batch.values, t)),
                        _ => out.imputed[t],
                    };
                    let hour = g.constant(hour_channel(n, t, steps));
                    seq.push(g.concat_cols(&[x, hour])?);
                }
                HeadInput::Sequence { steps: seq, h0: out.last_fwd }
            }
        })
    }

    /// Head input from precomputed imputer outputs, as constants.
    pub fn cached_input(&self, g: &mut Graph, batch: &TimeSeriesBatch, out: &ImputerOutput) -> Result<HeadInput> {
        let (n, steps) = (batch.n_records(), batch.steps());
        Ok(match self.plan.input_strategy {
            InputStrategy::HiddenStates => {
                let f = g.constant(out.hidden_last_fwd.clone());
                HeadInput::Static(match self.plan.hidden_directions {
                    HiddenDirections::Both => {
                        let b = g.constant(out.hidden_last_bwd.clone());
                        g.concat_cols(&[f, b])?
                    }
                    HiddenDirections::Forward => f,
                })
            }
            strategy => {
                let source = match strategy {
                    InputStrategy::RawWithHiddenInit => &batch.values,
                    _ => &out.imputed,
                };
                let mut seq = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x = g.constant(TimeSeriesBatch::step_of(source, t));
                    let hour = g.constant(hour_channel(n, t, steps));
                    seq.push(g.concat_cols(&[x, hour])?);
                }
                let h0 = g.constant(out.hidden_last_fwd.clone());
                HeadInput::Sequence { steps: seq, h0 }
            }
        })
    }

    /// Records `[N, 1]` logits. With `cached` the imputer is bypassed;
    /// otherwise it runs on the graph, trainable when `train` and unfrozen.
    pub fn logits(&self, g: &mut Graph, batch: &TimeSeriesBatch, cached: Option<&ImputerOutput>, train: bool) -> Result<Var> {
        self.check_batch(batch)?;
        let input = match cached {
            Some(out) => self.cached_input(g, batch, out)?,
            None => self.live_input(g, batch, train && self.trains_imputer())?,
        };
        let head = HeadVars::load(g, &self.head, &self.spec, train)?;
        head.forward(g, &input)
    }

    /// Gradients of the mean cross-entropy on `batch`, keyed by parameter
    /// name. Imputer names appear only for unfrozen pipelines.
    pub fn gradients(&self, batch: &TimeSeriesBatch) -> Result<BTreeMap<String, Array>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, batch, None, true)?;
        let targets = batch.labels.clone().reshape(vec![batch.n_records(), 1])?;
        let loss = g.bce_with_logits(logits, &targets)?;
        g.backward(loss)?;
        Ok(g.gradients())
    }

    pub fn to_archive(&self) -> Archive {
        let mut arrays = self.imputer.clone();
        arrays.extend(self.head.clone());
        let meta = json!(Meta {
            plan: self.plan.clone(),
            spec: self.spec,
            imputer_config: self.imputer_config.clone(),
        });
        Archive::new(PIPELINE_KIND, meta, arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path, PIPELINE_KIND)?;
        let meta: Meta = serde_json::from_value(a.meta).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            message: format!("pipeline manifest: {e}"),
        })?;
        let (mut imputer, mut head) = (ParamStore::new(), ParamStore::new());
        for (name, arr) in a.arrays.iter() {
            if name.starts_with("head.") {
                head.insert(name.clone(), arr.clone());
            } else {
                imputer.insert(name.clone(), arr.clone());
            }
        }
        Ok(Self {
            plan: meta.plan,
            spec: meta.spec,
            imputer_config: meta.imputer_config,
            imputer,
            head,
        })
    }
}

/// Converts `[N, 1]` logits to probabilities, rejecting non-finite values.
pub(crate) fn probabilities(logits: &Array, record_ids: &[String]) -> Result<Vec<f64>> {
    logits
        .data()
        .iter()
        .zip(record_ids)
        .map(|(&z, id)| {
            if z.is_finite() {
                Ok(sigmoid(z as f64))
            } else {
                Err(Error::NonFinite(format!("classifier logit for record `{id}`")))
            }
        })
        .collect()
}

/// Sigmoid outputs for every record, in batch order.
pub fn forward_classify(model: &PipelineModel, batch: &TimeSeriesBatch) -> Result<Vec<f64>> {
    model.check_batch(batch)?;
    let out = impute(&model.imputer, &model.imputer_config, batch, 256)?;
    let mut g = Graph::new();
    let logits = model.logits(&mut g, batch, Some(&out), false)?;
    probabilities(g.value(logits), &batch.record_ids)
}
