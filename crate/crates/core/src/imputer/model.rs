use super::{off_diagonal, ImputerConfig, DIRECTIONS};
use crate::dataset::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::nn::{gru_cell, CellKind, CellVars, LinearVars};
use crate::numerics::{Array, Graph, NumericsError, ParamStore, Real, Var};

/// `exp(-max(0, delta W + b))`, in `(0, 1]`.
pub fn decay<T: Real>(g: &mut Graph<T>, delta: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let lin = crate::nn::linear(g, delta, w, b)?;
    let r = g.relu(lin);
    let neg = g.scale(r, -1.0);
    Ok(g.exp(neg))
}

/// Sinusoidal code: `pe[2i] = sin(t / 10000^(2i/dim))`, `pe[2i+1] = cos(...)`.
pub fn positional_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("positional embedding width must be even, got {dim}")));
    }
    let mut pe = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    Ok(pe)
}

/// Scaled dot-product pooling of a hidden sequence with learned queries.
///
/// Per head, `score_i = (h_i K) . q / sqrt(H)` and the output is
/// `sum_i softmax(score)_i * h_i`; heads are averaged. Returns the pooled
/// `[N, H]` state and the `[N, n]` weights of the first head.
pub fn attention_condition<T: Real>(
    g: &mut Graph<T>,
    seq: &[Var],
    heads: &[(Var, Var)],
) -> Result<(Var, Var), NumericsError> {
    if seq.is_empty() {
        return Err(NumericsError::Empty("attention_condition"));
    }
    if heads.is_empty() {
        return Err(NumericsError::Empty("attention heads"));
    }
    let hidden = g.shape(seq[0])[1];
    let scale = 1.0 / (hidden as f64).sqrt();
    let mut pooled = Vec::with_capacity(heads.len());
    let mut first_weights = None;
    for &(key, query) in heads {
        let mut scores = Vec::with_capacity(seq.len());
        for &h in seq {
            let k = g.matmul(h, key)?;
            let s = g.matmul(k, query)?;
            scores.push(g.scale(s, scale));
        }
        let all = g.concat_cols(&scores)?;
        let weights = g.softmax_rows(all)?;
        let mut acc: Option<Var> = None;
        for (i, &h) in seq.iter().enumerate() {
            let a = g.slice_cols(weights, i, i + 1)?;
            let term = g.row_scale(h, a)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term)?,
            });
        }
        pooled.push(acc.expect("non-empty sequence"));
        first_weights.get_or_insert(weights);
    }
    let mut out = pooled[0];
    for &p in &pooled[1..] {
        out = g.add(out, p)?;
    }
    if pooled.len() > 1 {
        out = g.scale(out, 1.0 / pooled.len() as f64);
    }
    Ok((out, first_weights.expect("at least one head")))
}

/// Parameters of one direction on the graph.
#[derive(Clone, Copy, Debug)]
pub struct DirectionVars {
    pub decay_h: LinearVars,
    pub decay_x: LinearVars,
    pub hist: LinearVars,
    pub feat: LinearVars,
    pub fuse: LinearVars,
    pub rnn: CellVars,
}

impl DirectionVars {
    /// Loads `dir.*`, applying the structural masks (zero feature-regression
    /// diagonal, diagonal input decay) inside the graph so their gradients are
    /// masked too.
    pub fn load<T: Real>(
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        dir: &str,
        d: usize,
        trainable: bool,
    ) -> Result<Self, NumericsError> {
        let off = g.constant(off_diagonal(d).cast());
        let diag = g.constant(Array::<T>::identity(d));
        let mut feat = LinearVars::load(g, p, &format!("{dir}.feat"), trainable)?;
        feat.w = g.mul(feat.w, off)?;
        let mut decay_x = LinearVars::load(g, p, &format!("{dir}.decay_x"), trainable)?;
        decay_x.w = g.mul(decay_x.w, diag)?;
        Ok(Self {
            decay_h: LinearVars::load(g, p, &format!("{dir}.decay_h"), trainable)?,
            decay_x,
            hist: LinearVars::load(g, p, &format!("{dir}.hist"), trainable)?,
            feat,
            fuse: LinearVars::load(g, p, &format!("{dir}.fuse"), trainable)?,
            rnn: CellVars::load(g, p, &format!("{dir}.rnn"), CellKind::Gru, trainable)?,
        })
    }
}

/// Parameters shared by both directions.
#[derive(Clone, Debug)]
pub struct SharedVars {
    pub embed: LinearVars,
    pub attention: Vec<(Var, Var)>,
}

impl SharedVars {
    pub fn load<T: Real>(
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        heads: usize,
        trainable: bool,
    ) -> Result<Self, NumericsError> {
        let embed = LinearVars::load(g, p, "embed", trainable)?;
        let mut attention = Vec::with_capacity(heads);
        for k in 0..heads {
            let key = p.var(g, &format!("attn.h{k}.key"), trainable)?;
            let query = p.var(g, &format!("attn.h{k}.query"), trainable)?;
            attention.push((key, query));
        }
        Ok(Self { embed, attention })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Fused estimate `x_hat`.
    pub estimate: Var,
    pub history_estimate: Var,
    pub feature_estimate: Var,
    pub hidden: Var,
    /// Masked absolute error of the three estimates on observed entries.
    pub loss: Var,
}

/// Masked mean absolute error `sum(|a - b| * m) / (sum(m) + 1e-5)`.
fn masked_mae<T: Real>(g: &mut Graph<T>, est: Var, target: Var, mask: Var, mask_total: f64) -> Result<Var, NumericsError> {
    let diff = g.sub(est, target)?;
    let a = g.abs(diff);
    let masked = g.mul(a, mask)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / (mask_total + 1e-5)))
}

/// One recurrent step. `x`, `m`, `delta` are `[N, D]` constants, `pe` the `[E]`
/// positional code of this step.
#[allow(clippy::too_many_arguments)]
pub fn impute_step<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    m: Var,
    delta: Var,
    pe: Var,
    h_prev: Var,
    dir: &DirectionVars,
    shared: &SharedVars,
) -> Result<StepOutput, NumericsError> {
    let mask_total = g.value(m).sum();
    let not_m = g.one_minus(m);
    let observed = g.mul(m, x)?;

    let gamma_h = decay(g, delta, dir.decay_h.w, dir.decay_h.b)?;
    let h = g.mul(gamma_h, h_prev)?;
    let x_hist = dir.hist.apply(g, h)?;
    let fill_hist = g.mul(not_m, x_hist)?;
    let x_comp = g.add(observed, fill_hist)?;
    let x_feat = dir.feat.apply(g, x_comp)?;

    let gamma_x = decay(g, delta, dir.decay_x.w, dir.decay_x.b)?;
    let gate_in = g.concat_cols(&[gamma_x, m])?;
    let gate_pre = dir.fuse.apply(g, gate_in)?;
    let beta = g.sigmoid(gate_pre);
    let one_minus_beta = g.one_minus(beta);
    let from_feat = g.mul(beta, x_feat)?;
    let from_hist = g.mul(one_minus_beta, x_hist)?;
    let x_hat = g.add(from_feat, from_hist)?;

    let fill = g.mul(not_m, x_hat)?;
    let c_comp = g.add(observed, fill)?;
    let emb = shared.embed.apply(g, c_comp)?;
    let emb = g.add_bias(emb, pe)?;
    let cell_in = g.concat_cols(&[emb, m])?;
    let h_next = gru_cell(g, cell_in, h, &dir.rnn)?;

    let l1 = masked_mae(g, x_hist, x, m, mask_total)?;
    let l2 = masked_mae(g, x_feat, x, m, mask_total)?;
    let l3 = masked_mae(g, x_hat, x, m, mask_total)?;
    let l12 = g.add(l1, l2)?;
    let loss = g.add(l12, l3)?;
    Ok(StepOutput {
        estimate: x_hat,
        history_estimate: x_hist,
        feature_estimate: x_feat,
        hidden: h_next,
        loss,
    })
}

struct DirectionRun {
    estimates: Vec<Var>,
    hidden: Vec<Var>,
    loss: Var,
}

fn run_direction<T: Real>(
    g: &mut Graph<T>,
    batch: &TimeSeriesBatch,
    dir_name: &str,
    dir: &DirectionVars,
    shared: &SharedVars,
    h0: Var,
    pe_table: &[Vec<f64>],
) -> Result<DirectionRun> {
    let steps = batch.steps();
    let mut h = h0;
    let mut estimates = Vec::with_capacity(steps);
    let mut hidden = Vec::with_capacity(steps);
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let x = g.constant(TimeSeriesBatch::step_of(&batch.values, t).cast());
        let m = g.constant(TimeSeriesBatch::step_of(&batch.mask, t).cast());
        let delta = g.constant(TimeSeriesBatch::step_of(&batch.delta, t).cast());
        let pe = g.constant(Array::from_fn(&[pe_table[t].len()], |i| T::from_f64(pe_table[t][i])));
        let out = impute_step(g, x, m, delta, pe, h, dir, shared)?;
        if !g.value(out.hidden).is_finite() || !g.value(out.estimate).is_finite() {
            return Err(Error::NonFinite(format!("{dir_name} direction, step {t}")));
        }
        h = out.hidden;
        estimates.push(out.estimate);
        hidden.push(out.hidden);
        total = Some(match total {
            None => out.loss,
            Some(acc) => g.add(acc, out.loss)?,
        });
    }
    let loss = g.scale(total.expect("at least one step"), 1.0 / steps as f64);
    Ok(DirectionRun {
        estimates,
        hidden,
        loss,
    })
}

/// Graph handles produced by [`build_forward`]. Per-step lists are in original
/// time order for both directions.
#[derive(Clone, Debug)]
pub struct ImputerGraph {
    /// `[N, D]` per step: input at observed cells, mean of both directions elsewhere.
    pub imputed: Vec<Var>,
    pub forward_estimates: Vec<Var>,
    pub backward_estimates: Vec<Var>,
    pub hidden_fwd: Vec<Var>,
    pub hidden_bwd: Vec<Var>,
    pub last_fwd: Var,
    pub last_bwd: Var,
    pub loss_reconstruction: Var,
    pub loss_consistency: Var,
    /// Present when the batch carries held-out cells.
    pub loss_holdout: Option<Var>,
    pub loss_total: Var,
}

/// Records the full bidirectional imputer on `g`. Parameters become trainable
/// leaves when `trainable`, constants otherwise.
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &ImputerConfig,
    batch: &TimeSeriesBatch,
    trainable: bool,
) -> Result<ImputerGraph> {
    let (n, steps, d) = (batch.n_records(), batch.steps(), batch.n_features());
    if d != cfg.d_features {
        return Err(Error::invalid(format!(
            "batch has {d} features, imputer expects {}",
            cfg.d_features
        )));
    }
    let pe_table = (0..steps)
        .map(|t| positional_embedding(t, cfg.embed_dim))
        .collect::<Result<Vec<_>>>()?;
    let shared = SharedVars::load(g, params, cfg.attention_heads, trainable)?;
    let fwd = DirectionVars::load(g, params, DIRECTIONS[0], d, trainable)?;
    let bwd = DirectionVars::load(g, params, DIRECTIONS[1], d, trainable)?;

    let zeros = g.constant(Array::zeros(&[n, cfg.hidden]));
    let f = run_direction(g, batch, "forward", &fwd, &shared, zeros, &pe_table)?;
    let h0_bwd = if cfg.use_attention {
        attention_condition(g, &f.hidden, &shared.attention)?.0
    } else {
        zeros
    };
    let reversed = batch.reversed();
    let mut b = run_direction(g, &reversed, "backward", &bwd, &shared, h0_bwd, &pe_table)?;
    let last_bwd = *b.hidden.last().expect("at least one step");
    b.estimates.reverse();
    b.hidden.reverse();

    let mut imputed = Vec::with_capacity(steps);
    let mut disagreement: Option<Var> = None;
    let mut holdout: Option<Var> = None;
    let has_holdout = batch.has_eval_mask();
    let holdout_total = batch.eval_mask.sum();
    for t in 0..steps {
        let x = g.constant(TimeSeriesBatch::step_of(&batch.values, t).cast());
        let m_arr = TimeSeriesBatch::step_of(&batch.mask, t);
        let not_m = g.constant(m_arr.map(|v| 1.0 - v).cast());
        let m = g.constant(m_arr.cast());
        let both = g.add(f.estimates[t], b.estimates[t])?;
        let mean = g.scale(both, 0.5);
        let observed = g.mul(m, x)?;
        let fill = g.mul(not_m, mean)?;
        let out = g.add(observed, fill)?;
        imputed.push(out);

        let diff = g.sub(f.estimates[t], b.estimates[t])?;
        let a = g.abs(diff);
        let s = g.sum(a);
        disagreement = Some(match disagreement {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });

        if has_holdout {
            let truth = g.constant(TimeSeriesBatch::step_of(&batch.ground_truth, t).cast());
            let em = g.constant(TimeSeriesBatch::step_of(&batch.eval_mask, t).cast());
            let err = masked_mae(g, out, truth, em, holdout_total)?;
            holdout = Some(match holdout {
                None => err,
                Some(acc) => g.add(acc, err)?,
            });
        }
    }
    // each step is normalized by the overall held-out count, so the sum is a
    // plain mean over held-out cells
    let loss_holdout = holdout;
    let loss_consistency = g.scale(
        disagreement.expect("at least one step"),
        1.0 / (n * steps * d) as f64,
    );
    let loss_reconstruction = g.add(f.loss, b.loss)?;
    let weighted_consistency = g.scale(loss_consistency, cfg.consistency_weight);
    let mut loss_total = g.add(loss_reconstruction, weighted_consistency)?;
    if let Some(h) = loss_holdout {
        let w = g.scale(h, cfg.holdout_weight);
        loss_total = g.add(loss_total, w)?;
    }
    Ok(ImputerGraph {
        imputed,
        forward_estimates: f.estimates,
        backward_estimates: b.estimates,
        hidden_fwd: f.hidden.clone(),
        hidden_bwd: b.hidden,
        last_fwd: *f.hidden.last().expect("at least one step"),
        last_bwd,
        loss_reconstruction,
        loss_consistency,
        loss_holdout,
        loss_total,
    })
}

/// Materialized imputer outputs for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputerOutput {
    /// `[N, T, D]`
    pub imputed: Array,
    /// `[N, H]`
    pub hidden_last_fwd: Array,
    pub hidden_last_bwd: Array,
    /// `[N, T, H]`, original time order.
    pub hidden_seq_fwd: Array,
    pub hidden_seq_bwd: Array,
    pub loss_reconstruction: f64,
    pub loss_consistency: f64,
}

impl ImputerOutput {
    /// Outputs for `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            imputed: self.imputed.select_rows(rows),
            hidden_last_fwd: self.hidden_last_fwd.select_rows(rows),
            hidden_last_bwd: self.hidden_last_bwd.select_rows(rows),
            hidden_seq_fwd: self.hidden_seq_fwd.select_rows(rows),
            hidden_seq_bwd: self.hidden_seq_bwd.select_rows(rows),
            loss_reconstruction: self.loss_reconstruction,
            loss_consistency: self.loss_consistency,
        }
    }
}

fn stack_steps(g: &Graph<f32>, steps: &[Var], out: &mut [f32], row_offset: usize, total_steps: usize) {
    let width = g.value(steps[0]).cols();
    for (t, &v) in steps.iter().enumerate() {
        for (r, row) in g.value(v).data().chunks(width).enumerate() {
            let dst = ((row_offset + r) * total_steps + t) * width;
            out[dst..dst + width].copy_from_slice(row);
        }
    }
}

/// Runs the imputer without gradients over `batch` in chunks of `chunk` records.
/// Losses are record-weighted means over chunks.
pub fn impute(
    params: &ParamStore,
    cfg: &ImputerConfig,
    batch: &TimeSeriesBatch,
    chunk: usize,
) -> Result<ImputerOutput> {
    let (n, steps, d, h) = (batch.n_records(), batch.steps(), batch.n_features(), cfg.hidden);
    let chunk = chunk.max(1);
    let mut imputed = vec![0.0f32; n * steps * d];
    let mut seq_f = vec![0.0f32; n * steps * h];
    let mut seq_b = vec![0.0f32; n * steps * h];
    let mut last_f = vec![0.0f32; n * h];
    let mut last_b = vec![0.0f32; n * h];
    let (mut rec, mut cons) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let sub = batch.subset(&rows);
        let mut g = Graph::<f32>::new();
        let out = build_forward(&mut g, params, cfg, &sub, false)?;
        stack_steps(&g, &out.imputed, &mut imputed, start, steps);
        stack_steps(&g, &out.hidden_fwd, &mut seq_f, start, steps);
        stack_steps(&g, &out.hidden_bwd, &mut seq_b, start, steps);
        last_f[start * h..end * h].copy_from_slice(g.value(out.last_fwd).data());
        last_b[start * h..end * h].copy_from_slice(g.value(out.last_bwd).data());
        let w = (end - start) as f64 / n as f64;
        rec += w * g.value(out.loss_reconstruction).item() as f64;
        cons += w * g.value(out.loss_consistency).item() as f64;
        start = end;
    }
    Ok(ImputerOutput {
        imputed: Array::new(vec![n, steps, d], imputed)?,
        hidden_last_fwd: Array::new(vec![n, h], last_f)?,
        hidden_last_bwd: Array::new(vec![n, h], last_b)?,
        hidden_seq_fwd: Array::new(vec![n, steps, h], seq_f)?,
        hidden_seq_bwd: Array::new(vec![n, steps, h], seq_b)?,
        loss_reconstruction: rec,
        loss_consistency: cons,
    })
}
