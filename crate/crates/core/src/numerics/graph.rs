//! Tape-based reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are pushed, so the tape is always
//! topologically ordered and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::{Array, NumericsError, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    RowScale(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    SoftmaxRows(Var),
    BceWithLogits(Var, Array<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// A differentiable computation recorded on a tape.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Array<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x [n, m] + bias [m]`, the bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let m = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + b[i % m];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// `x [n, m]` with row `i` multiplied by `s[i, 0]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss != [sx[0], 1] {
            return Err(mismatch("row_scale", sx, ss));
        }
        let m = sx[1];
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v * sv[i / m];
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::RowScale(x, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Concatenate 2-D nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Array::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: s.to_vec(),
                right: vec![start, end],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let value = Array::new(vec![rows, w], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    /// Sum of all entries, as a `[1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over each row of a 2-D node.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("softmax_rows", s, &[0, 0]));
        }
        let cols = s[1];
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array<T>) -> Result<Var, NumericsError> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(mismatch("bce_with_logits", z.shape(), targets.shape()));
        }
        let n = T::from_f64(z.len() as f64);
        let mut acc = T::zero();
        for (&zi, &yi) in z.data().iter().zip(targets.data()) {
            // max(z, 0) - z*y + ln(1 + exp(-|z|))
            acc = acc + zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Array::scalar(acc / n),
            Op::BceWithLogits(logits, targets.clone()),
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Array<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // Upstream gradients for this sweep only, so repeated calls add
        // exactly one more d(loss)/d(leaf) to the persistent store.
        let mut upstream: Vec<Option<Array<T>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(Array::scalar(T::one()));
        let mut leaf_grads: Vec<(Var, Array<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            let send = |v: Var, grad: Array<T>, up: &mut Vec<Option<Array<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut up[v.0] {
                    Some(e) => e.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            match op {
                Op::Leaf => leaf_grads.push((Var(i), g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.nodes[a.0].requires_grad {
                        // dA = G B^T
                        let mut da = Array::zeros(&[m, k]);
                        T::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            1,
                            n as isize,
                            T::zero(),
                            da.data_mut(),
                        );
                        send(a, da, &mut upstream);
                    }
                    let av = &self.nodes[a.0].value;
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T G
                        let mut db = Array::zeros(&[k, n]);
                        T::gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            T::zero(),
                            db.data_mut(),
                        );
                        send(b, db, &mut upstream);
                    }
                }
                Op::Add(a, b) => {
                    send(b, g.clone(), &mut upstream);
                    send(a, g, &mut upstream);
                }
                Op::Sub(a, b) => {
                    send(b, g.map(|x| -x), &mut upstream);
                    send(a, g, &mut upstream);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |x, y| x * y);
                    let gb = g.zip_map(&self.nodes[a.0].value, |x, y| x * y);
                    send(a, ga, &mut upstream);
                    send(b, gb, &mut upstream);
                }
                Op::AddBias(x, bias) => {
                    let m = self.nodes[bias.0].value.len();
                    let mut gb = Array::zeros(&[m]);
                    for (j, &v) in g.data().iter().enumerate() {
                        gb[j % m] = gb[j % m] + v;
                    }
                    send(bias, gb, &mut upstream);
                    send(x, g, &mut upstream);
                }
                Op::RowScale(x, s) => {
                    let m = self.nodes[x.0].value.cols();
                    let sv = &self.nodes[s.0].value;
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    let mut gs = Array::zeros(sv.shape());
                    for (j, v) in gx.data_mut().iter_mut().enumerate() {
                        gs[j / m] = gs[j / m] + *v * xv[j];
                        *v = *v * sv[j / m];
                    }
                    send(x, gx, &mut upstream);
                    send(s, gs, &mut upstream);
                }
                Op::Scale(a, c) => send(a, g.map(|x| x * c), &mut upstream),
                Op::AddScalar(a) => send(a, g, &mut upstream),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.zip_map(y, |gi, yi| gi * yi * (T::one() - yi));
                    send(a, ga, &mut upstream);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.zip_map(y, |gi, yi| gi * (T::one() - yi * yi));
                    send(a, ga, &mut upstream);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.zip_map(y, |gi, yi| gi * yi);
                    send(a, ga, &mut upstream);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip_map(x, |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                    send(a, ga, &mut upstream);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip_map(x, |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    });
                    send(a, ga, &mut upstream);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let two = T::from_f64(2.0);
                    let ga = g.zip_map(x, |gi, xi| two * xi * gi);
                    send(a, ga, &mut upstream);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            let gp = Array::new(vec![rows, w], gp)?;
                            send(p, gp, &mut upstream);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let cols = shape[1];
                    let w = end - start;
                    let mut ga = Array::zeros(&shape);
                    for r in 0..shape[0] {
                        ga.data_mut()[r * cols + start..r * cols + end]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    send(a, ga, &mut upstream);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    send(a, Array::full(&shape, g.item()), &mut upstream);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let cols = y.cols();
                    let mut ga = Array::zeros(y.shape());
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(cols)
                        .zip(y.data().chunks(cols))
                        .zip(ga.data_mut().chunks_mut(cols))
                    {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(a, ga, &mut upstream);
                }
                Op::BceWithLogits(z, targets) => {
                    let zv = &self.nodes[z.0].value;
                    let n = T::from_f64(zv.len() as f64);
                    let scale = g.item() / n;
                    let mut gz = zv.clone();
                    for (v, &y) in gz.data_mut().iter_mut().zip(targets.data()) {
                        *v = (sigmoid(*v) - y) * scale;
                    }
                    send(z, gz, &mut upstream);
                }
            }
        }
        for (v, g) in leaf_grads {
            self.accumulate(v, g);
        }
        Ok(())
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Gradients of every named trainable leaf. Leaves that received no
    /// gradient report zeros.
    pub fn gradients(&self) -> BTreeMap<String, Array<T>> {
        let mut out = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(name), true) = (&node.name, node.requires_grad) {
                let g = g.clone().unwrap_or_else(|| Array::zeros(node.value.shape()));
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), g);
                    }
                    Some(existing) => Array::add_assign(existing, &g),
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_values() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Array::scalar(0.0));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Array::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.gradients()["x"].item(), 6.0);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.gradients()["x"].item(), 12.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.gradients()["x"].item(), 6.0);
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(W v): dloss/dW[i][j] = v[j]
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Array::from_fn(&[3, 2], |i| i as f64));
        let v = g.constant(Array::new(vec![2, 1], vec![0.5, -2.0]).unwrap());
        let wv = g.matmul(w, v).unwrap();
        let loss = g.sum(wv);
        g.backward(loss).unwrap();
        assert_eq!(g.gradients()["w"].data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Array::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let w = g.param("w", Array::full(&[2, 2], 1.0));
        let c = g.constant(Array::full(&[2, 2], 2.0));
        let y = g.mul(w, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.gradients().len(), 1);
    }
}
