//! Layers shared by the imputer and the classifier heads.
//!
//! Recurrent cells carry a single bias per gate block, so a cell with input
//! width `I` and hidden width `H` has `G * (I*H + H*H + H)` parameters with
//! `G = 3` (GRU) or `G = 4` (LSTM).

use rand::Rng;

use crate::numerics::{Array, Graph, NumericsError, ParamStore, Real, Var};
use crate::rng::{derive_seed, rng_from};

type Res<T> = Result<T, NumericsError>;

/// Uniform initialization in `±1/sqrt(fan_in)`, seeded per parameter name.
pub fn init_uniform(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = rng_from(derive_seed(seed, name, 0));
    Array::from_fn(shape, |_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
}

/// `x W + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Res<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn load<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, trainable: bool) -> Res<Self> {
        Ok(Self {
            w: p.var(g, &format!("{prefix}.w"), trainable)?,
            b: p.var(g, &format!("{prefix}.b"), trainable)?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Res<Var> {
        linear(g, x, self.w, self.b)
    }
}

pub fn init_linear(p: &mut ParamStore, prefix: &str, input: usize, output: usize, seed: u64) {
    let w = format!("{prefix}.w");
    let b = format!("{prefix}.b");
    p.insert(w.clone(), init_uniform(&[input, output], input, seed, &w));
    p.insert(b.clone(), init_uniform(&[output], input, seed, &b));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn param_count(self, input: usize, hidden: usize) -> usize {
        self.gates() * (input * hidden + hidden * hidden + hidden)
    }
}

/// Input weights `w [I, G*H]`, recurrent weights `u [H, G*H]`, bias `b [G*H]`.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub kind: CellKind,
    pub hidden: usize,
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl CellVars {
    pub fn load<T: Real>(
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        prefix: &str,
        kind: CellKind,
        trainable: bool,
    ) -> Res<Self> {
        let u = p.get(&format!("{prefix}.u"))?;
        let hidden = u.shape()[0];
        Ok(Self {
            kind,
            hidden,
            w: p.var(g, &format!("{prefix}.w"), trainable)?,
            u: p.var(g, &format!("{prefix}.u"), trainable)?,
            b: p.var(g, &format!("{prefix}.b"), trainable)?,
        })
    }
}

pub fn init_cell(p: &mut ParamStore, prefix: &str, kind: CellKind, input: usize, hidden: usize, seed: u64) {
    let width = kind.gates() * hidden;
    for (suffix, shape) in [("w", vec![input, width]), ("u", vec![hidden, width]), ("b", vec![width])] {
        let name = format!("{prefix}.{suffix}");
        p.insert(name.clone(), init_uniform(&shape, hidden, seed, &name));
    }
}

/// Gate blocks in order update `z`, reset `r`, candidate `n`:
/// `h' = (1 - z) * n + z * h` with `n = tanh(x W_n + r * (h U_n) + b_n)`.
pub fn gru_cell<T: Real>(g: &mut Graph<T>, x: Var, h: Var, c: &CellVars) -> Res<Var> {
    let hs = c.hidden;
    let gx = linear(g, x, c.w, c.b)?;
    let gh = g.matmul(h, c.u)?;
    let xz = g.slice_cols(gx, 0, hs)?;
    let hz = g.slice_cols(gh, 0, hs)?;
    let zs = g.add(xz, hz)?;
    let z = g.sigmoid(zs);
    let xr = g.slice_cols(gx, hs, 2 * hs)?;
    let hr = g.slice_cols(gh, hs, 2 * hs)?;
    let rs = g.add(xr, hr)?;
    let r = g.sigmoid(rs);
    let xn = g.slice_cols(gx, 2 * hs, 3 * hs)?;
    let hn = g.slice_cols(gh, 2 * hs, 3 * hs)?;
    let rhn = g.mul(r, hn)?;
    let ns = g.add(xn, rhn)?;
    let n = g.tanh(ns);
    let h_minus_n = g.sub(h, n)?;
    let zd = g.mul(z, h_minus_n)?;
    g.add(n, zd)
}

/// Gate blocks in order input, forget, cell, output.
pub fn lstm_cell<T: Real>(g: &mut Graph<T>, x: Var, h: Var, cell: Var, c: &CellVars) -> Res<(Var, Var)> {
    let hs = c.hidden;
    let gx = linear(g, x, c.w, c.b)?;
    let gh = g.matmul(h, c.u)?;
    let gates = g.add(gx, gh)?;
    let i_pre = g.slice_cols(gates, 0, hs)?;
    let f_pre = g.slice_cols(gates, hs, 2 * hs)?;
    let c_pre = g.slice_cols(gates, 2 * hs, 3 * hs)?;
    let o_pre = g.slice_cols(gates, 3 * hs, 4 * hs)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(c_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, cell)?;
    let write = g.mul(i, cand)?;
    let new_cell = g.add(keep, write)?;
    let squashed = g.tanh(new_cell);
    let new_h = g.mul(o, squashed)?;
    Ok((new_h, new_cell))
}
