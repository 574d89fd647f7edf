//! Downstream heads on top of a pretrained imputer.
//!
//! Feed-forward heads read the concatenated final hidden states of both
//! directions. Recurrent heads read a `D + 1` wide sequence (imputed or raw
//! values plus a scalar hour channel) and start from the imputer's final
//! forward hidden state. With `frozen` only the head is trained; with
//! `unfrozen` gradients also flow into the imputer.

mod export;
mod pipeline;

pub use export::{export_features, read_feature_table, FeatureKind, FeatureTable};
pub use pipeline::{assemble, forward_classify, HeadInput, PipelineModel, PIPELINE_KIND};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputer::ImputerConfig;
use crate::nn::{init_cell, init_linear, CellKind, CellVars, LinearVars};
use crate::numerics::{Graph, NumericsError, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp2,
    Mlp5,
    Lstm1,
    Gru1,
    Linear,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [HeadKind::Mlp2, HeadKind::Mlp5, HeadKind::Lstm1, HeadKind::Gru1, HeadKind::Linear];

    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Mlp2 => "MLP2",
            HeadKind::Mlp5 => "MLP5",
            HeadKind::Lstm1 => "LSTM1",
            HeadKind::Gru1 => "GRU1",
            HeadKind::Linear => "LINEAR",
        }
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            HeadKind::Lstm1 => Some(CellKind::Lstm),
            HeadKind::Gru1 => Some(CellKind::Gru),
            _ => None,
        }
    }

    pub fn is_recurrent(self) -> bool {
        self.cell().is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    Frozen,
    Unfrozen,
}

impl WeightPolicy {
    pub fn label(self) -> &'static str {
        match self {
            WeightPolicy::Frozen => "frozen",
            WeightPolicy::Unfrozen => "unfrozen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStrategy {
    /// Final hidden states of both directions, concatenated.
    HiddenStates,
    /// Imputed series into a recurrent head initialized from the imputer state.
    ImputedWithHiddenInit,
    /// Observed values (missing = 0) into a recurrent head initialized from the imputer state.
    RawWithHiddenInit,
}

impl InputStrategy {
    pub fn label(self) -> &'static str {
        match self {
            InputStrategy::HiddenStates => "hidden_states",
            InputStrategy::ImputedWithHiddenInit => "imputed_with_hidden_init",
            InputStrategy::RawWithHiddenInit => "raw_with_hidden_init",
        }
    }
}

/// Which final hidden states feed a `hidden_states` head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenDirections {
    #[default]
    Both,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub rnn_hidden: usize,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, input_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_width: 128,
            rnn_hidden: 108,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.rnn_hidden == 0 {
            return Err(Error::invalid(format!("head dimensions must be positive: {self:?}")));
        }
        if self.kind == HeadKind::Mlp5 && self.hidden_width < 8 {
            return Err(Error::invalid("MLP5 needs hidden_width >= 8"));
        }
        Ok(())
    }

    /// Widths of the feed-forward part, input first, output (1) last. MLP5
    /// tapers by halves from `hidden_width`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let w = self.hidden_width;
        match self.kind {
            HeadKind::Linear => vec![self.input_dim, 1],
            HeadKind::Mlp2 => vec![self.input_dim, w, 1],
            HeadKind::Mlp5 => vec![self.input_dim, w, w / 2, w / 4, w / 8, 1],
            HeadKind::Lstm1 | HeadKind::Gru1 => vec![self.rnn_hidden, w, 1],
        }
    }

    /// Exact number of head parameters.
    pub fn head_param_count(&self) -> usize {
        let ff: usize = self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let rnn = self
            .kind
            .cell()
            .map_or(0, |c| c.param_count(self.input_dim, self.rnn_hidden));
        ff + rnn
    }
}

/// Trainable parameter count of a pipeline: the head alone when frozen, head
/// plus imputer when unfrozen.
pub fn param_count(spec: &HeadSpec, policy: WeightPolicy, imputer_total: usize) -> usize {
    spec.head_param_count()
        + match policy {
            WeightPolicy::Frozen => 0,
            WeightPolicy::Unfrozen => imputer_total,
        }
}

/// Fresh head parameters under the `head.` prefix.
pub fn build_head(spec: &HeadSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut p = ParamStore::new();
    if let Some(cell) = spec.kind.cell() {
        init_cell(&mut p, "head.rnn", cell, spec.input_dim, spec.rnn_hidden, seed);
    }
    for (k, w) in spec.layer_dims().windows(2).enumerate() {
        init_linear(&mut p, &format!("head.l{k}"), w[0], w[1], seed);
    }
    debug_assert_eq!(p.total_size(), spec.head_param_count());
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePlan {
    pub head: HeadKind,
    pub weight_policy: WeightPolicy,
    pub input_strategy: InputStrategy,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub hidden_directions: HiddenDirections,
}

fn default_width() -> usize {
    128
}

impl FinetunePlan {
    pub fn new(head: HeadKind, weight_policy: WeightPolicy, input_strategy: InputStrategy) -> Self {
        Self {
            head,
            weight_policy,
            input_strategy,
            hidden_width: default_width(),
            hidden_directions: HiddenDirections::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.input_strategy {
            InputStrategy::HiddenStates => !self.head.is_recurrent(),
            _ => self.head.is_recurrent(),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{} head cannot use the {} input strategy",
                self.head.label(),
                self.input_strategy.label()
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be positive"));
        }
        Ok(())
    }

    /// Head dimensions implied by this plan on top of `imputer`.
    pub fn head_spec(&self, imputer: &ImputerConfig) -> Result<HeadSpec> {
        self.validate()?;
        let input_dim = match self.input_strategy {
            InputStrategy::HiddenStates => match self.hidden_directions {
                HiddenDirections::Both => 2 * imputer.hidden,
                HiddenDirections::Forward => imputer.hidden,
            },
            _ => imputer.d_features + 1,
        };
        Ok(HeadSpec {
            kind: self.head,
            input_dim,
            hidden_width: self.hidden_width,
            rnn_hidden: imputer.hidden,
        })
    }

    /// Short identifier, e.g. `GRU1/frozen/imputed_with_hidden_init`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.model_label(), self.weight_policy.label())
    }

    /// Identifier without the weight policy, e.g. `MLP2/hidden_states`.
    pub fn model_label(&self) -> String {
        let fwd = match (self.input_strategy, self.hidden_directions) {
            (InputStrategy::HiddenStates, HiddenDirections::Forward) => "_fwd",
            _ => "",
        };
        format!("{}/{}{fwd}", self.head.label(), self.input_strategy.label())
    }

    /// `label` with `/` replaced, usable in file names.
    pub fn slug(&self) -> String {
        self.label().replace('/', "_").to_lowercase()
    }
}

/// Head parameters on the graph.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub spec: HeadSpec,
    pub cell: Option<CellVars>,
    pub layers: Vec<LinearVars>,
}

impl HeadVars {
    pub fn load<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, spec: &HeadSpec, trainable: bool) -> Result<Self, NumericsError> {
        let cell = match spec.kind.cell() {
            Some(kind) => Some(CellVars::load(g, p, "head.rnn", kind, trainable)?),
            None => None,
        };
        let layers = (0..spec.layer_dims().len() - 1)
            .map(|k| LinearVars::load(g, p, &format!("head.l{k}"), trainable))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec: *spec,
            cell,
            layers,
        })
    }

    /// Logits `[N, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, input: &HeadInput) -> Result<Var> {
        let mut x = match (input, self.cell) {
            (HeadInput::Static(v), None) => *v,
            (HeadInput::Sequence { steps, h0 }, Some(cell)) => {
                let mut h = *h0;
                match cell.kind {
                    CellKind::Gru => {
                        for &s in steps {
                            h = crate::nn::gru_cell(g, s, h, &cell)?;
                        }
                    }
                    CellKind::Lstm => {
                        let mut c = g.constant(crate::numerics::Array::zeros(g.shape(*h0)));
                        for &s in steps {
                            (h, c) = crate::nn::lstm_cell(g, s, h, c, &cell)?;
                        }
                    }
                }
                h
            }
            _ => return Err(Error::invalid("head input does not match head kind")),
        };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, x)?;
            if k < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}
