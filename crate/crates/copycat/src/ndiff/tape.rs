//! Reverse-mode autodiff over a flat operation tape.
//!
//! Every forward pass records nodes in evaluation order; `backward` walks
//! them once in reverse. Each op stores the ids of its inputs, so the whole
//! derivative logic is the single match in [`Tape::backward`].

use std::rc::Rc;

use super::params::ParameterStore;
use super::tensor::{dot, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf { name: Option<String> },
    MatVec(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// scale·x + shift, elementwise with constant coefficients.
    AffineConst { x: VarId, scale: f64 },
    Concat(Vec<VarId>),
    Sigmoid(VarId),
    Tanh(VarId),
    Exp(VarId),
    /// ln(max(x, floor)); zero gradient where the floor engaged.
    LnFloored { x: VarId, floor: f64 },
    Softmax(VarId),
    /// Σ_k weights[k] · items[k] over equal-length vectors.
    WeightedSum { weights: VarId, items: Vec<VarId> },
    Row { matrix: VarId, index: usize },
    At { x: VarId, index: usize },
    Sum(VarId),
    Dot(VarId, VarId),
    /// scalar · x with a scalar node.
    ScaleBy { scalar: VarId, x: VarId },
    PadTo(VarId),
    /// out[ids[k]] += weights[k]; the copy distribution builder.
    ScatterAdd { weights: VarId, ids: Rc<Vec<usize>> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    floor_events: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many log-floor clamps engaged during forward passes so far.
    pub fn floor_events(&self) -> usize {
        self.floor_events
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&mut self, value: Rc<Tensor>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// A constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn scalar(&mut self, value: f64) -> VarId {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a named parameter; its gradient can be collected afterwards
    /// with [`Tape::param_gradients`].
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> VarId {
        let value = store.value_rc(name);
        self.push_rc(value, Op::Leaf { name: Some(name.to_string()) })
    }

    pub fn matvec(&mut self, w: VarId, x: VarId) -> VarId {
        let out = self.value(w).matvec(self.value(x).data());
        self.push(Tensor::vector(out), Op::MatVec(w, x))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn zip(&self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise op on mismatched lengths");
        Tensor::vector(va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn affine_const(&mut self, x: VarId, scale: f64, shift: f64) -> VarId {
        let out = self.map(x, |v| scale * v + shift);
        self.push(out, Op::AffineConst { x, scale })
    }

    fn map(&self, x: VarId, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::vector(self.value(x).data().iter().map(|&v| f(v)).collect())
    }

    pub fn concat(&mut self, parts: &[VarId]) -> VarId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let out = self.map(x, f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// ln with a floor keeping the objective finite; clamped positions are
    /// counted as flooring events and pass no gradient.
    pub fn ln_floored(&mut self, x: VarId, floor: f64) -> VarId {
        assert!(floor > 0.0);
        self.floor_events += self.value(x).data().iter().filter(|&&v| v < floor).count();
        let out = self.map(x, |v| v.max(floor).ln());
        self.push(out, Op::LnFloored { x, floor })
    }

    /// Numerically stable masked softmax; masked positions are exactly 0.
    pub fn softmax(&mut self, x: VarId, mask: Option<&[bool]>) -> VarId {
        let data = self.value(x).data();
        let active = |i: usize| mask.map_or(true, |m| !m[i]);
        let max = data
            .iter()
            .enumerate()
            .filter(|(i, _)| active(*i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "softmax with every position masked");
        let mut out = vec![0.0; data.len()];
        let mut total = 0.0;
        for (i, &v) in data.iter().enumerate() {
            if active(i) {
                out[i] = (v - max).exp();
                total += out[i];
            }
        }
        for v in &mut out {
            *v /= total;
        }
        self.push(Tensor::vector(out), Op::Softmax(x))
    }

    pub fn weighted_sum(&mut self, weights: VarId, items: &[VarId]) -> VarId {
        let w = self.value(weights).data();
        assert_eq!(w.len(), items.len(), "one weight per item");
        assert!(!items.is_empty());
        let mut out = vec![0.0; self.value(items[0]).len()];
        for (&wk, &item) in w.iter().zip(items) {
            for (o, &v) in out.iter_mut().zip(self.value(item).data()) {
                *o += wk * v;
            }
        }
        self.push(
            Tensor::vector(out),
            Op::WeightedSum { weights, items: items.to_vec() },
        )
    }

    /// Row of a rank-2 node (embedding lookup).
    pub fn row(&mut self, matrix: VarId, index: usize) -> VarId {
        let out = Tensor::vector(self.value(matrix).row(index).to_vec());
        self.push(out, Op::Row { matrix, index })
    }

    /// Single element as a scalar node.
    pub fn at(&mut self, x: VarId, index: usize) -> VarId {
        let out = Tensor::scalar(self.value(x).data()[index]);
        self.push(out, Op::At { x, index })
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x))
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let out = dot(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(out), Op::Dot(a, b))
    }

    pub fn scale_by(&mut self, scalar: VarId, x: VarId) -> VarId {
        let s = self.value(scalar).item();
        let out = self.map(x, |v| s * v);
        self.push(out, Op::ScaleBy { scalar, x })
    }

    pub fn pad_to(&mut self, x: VarId, len: usize) -> VarId {
        let data = self.value(x).data();
        assert!(len >= data.len());
        let mut out = data.to_vec();
        out.resize(len, 0.0);
        self.push(Tensor::vector(out), Op::PadTo(x))
    }

    pub fn scatter_add(&mut self, weights: VarId, ids: Rc<Vec<usize>>, len: usize) -> VarId {
        let w = self.value(weights).data();
        assert_eq!(w.len(), ids.len(), "one target slot per weight");
        let mut out = vec![0.0; len];
        for (&id, &wk) in ids.iter().zip(w) {
            out[id] += wk;
        }
        self.push(Tensor::vector(out), Op::ScatterAdd { weights, ids })
    }

    /// y = Wx + b.
    pub fn affine(&mut self, w: VarId, b: VarId, x: VarId) -> VarId {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    /// One hidden tanh layer, affine output.
    pub fn ffnn_tanh(&mut self, f: &FfnnVars, x: VarId) -> VarId {
        let hidden = self.affine(f.w1, f.b1, x);
        let hidden = self.tanh(hidden);
        self.affine(f.w2, f.b2, hidden)
    }

    /// Standard GRU update: u and r gates, tanh candidate, convex blend
    /// h' = (1−u)·h + u·n.
    pub fn gru_cell(&mut self, g: &GruVars, x: VarId, h: VarId) -> VarId {
        let u = self.gate(g.w_u, g.u_u, g.b_u, x, h);
        let u = self.sigmoid(u);
        let r = self.gate(g.w_r, g.u_r, g.b_r, x, h);
        let r = self.sigmoid(r);
        let rh = self.mul(r, h);
        let n = self.gate(g.w_n, g.u_n, g.b_n, x, rh);
        let n = self.tanh(n);
        let keep = self.affine_const(u, -1.0, 1.0);
        let kept = self.mul(keep, h);
        let new = self.mul(u, n);
        self.add(kept, new)
    }

    fn gate(&mut self, w: VarId, u: VarId, b: VarId, x: VarId, h: VarId) -> VarId {
        let wx = self.matvec(w, x);
        let uh = self.matvec(u, h);
        let sum = self.add(wx, uh);
        self.add(sum, b)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward starts from a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.backstep(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { by_node: grads }
    }

    fn backstep(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = grad.data();
        let mut bump = |id: VarId, update: &dyn Fn(&mut Tensor)| {
            let slot = &mut grads[id.0];
            let buf = slot.get_or_insert_with(|| Tensor::zeros(self.value(id).shape().to_vec()));
            update(buf);
        };
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatVec(w, x) => {
                let wv = self.value(*w);
                let xv = self.value(*x).data();
                bump(*w, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (b, &xj) in buf.row_mut(i).iter_mut().zip(xv) {
                            *b += gi * xj;
                        }
                    }
                });
                bump(*x, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (b, &wij) in buf.data_mut().iter_mut().zip(wv.row(i)) {
                            *b += gi * wij;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                bump(*a, &|buf| axpy(buf, 1.0, g));
                bump(*b, &|buf| axpy(buf, 1.0, g));
            }
            Op::Sub(a, b) => {
                bump(*a, &|buf| axpy(buf, 1.0, g));
                bump(*b, &|buf| axpy(buf, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                bump(*a, &|buf| {
                    for ((o, &gi), &bi) in buf.data_mut().iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                });
                bump(*b, &|buf| {
                    for ((o, &gi), &ai) in buf.data_mut().iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AffineConst { x, scale } => {
                bump(*x, &|buf| axpy(buf, *scale, g));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let len = self.value(part).len();
                    let piece = &g[offset..offset + len];
                    bump(part, &|buf| axpy(buf, 1.0, piece));
                    offset += len;
                }
            }
            Op::Sigmoid(x) => {
                let y = self.value(VarId(idx)).data();
                bump(*x, &|buf| {
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.value(VarId(idx)).data();
                bump(*x, &|buf| {
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.value(VarId(idx)).data();
                bump(*x, &|buf| {
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::LnFloored { x, floor } => {
                let xv = self.value(*x).data();
                bump(*x, &|buf| {
                    for ((o, &gi), &xi) in buf.data_mut().iter_mut().zip(g).zip(xv) {
                        if xi >= *floor {
                            *o += gi / xi;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.value(VarId(idx)).data();
                let inner = dot(g, y);
                bump(*x, &|buf| {
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g).zip(y) {
                        *o += yi * (gi - inner);
                    }
                });
            }
            Op::WeightedSum { weights, items } => {
                let w = self.value(*weights).data();
                for (k, &item) in items.iter().enumerate() {
                    let iv = self.value(item).data();
                    bump(*weights, &|buf| buf.data_mut()[k] += dot(g, iv));
                    let wk = w[k];
                    bump(item, &|buf| axpy(buf, wk, g));
                }
            }
            Op::Row { matrix, index } => {
                bump(*matrix, &|buf| {
                    let row = buf.row_mut(*index);
                    for (o, &gi) in row.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::At { x, index } => {
                bump(*x, &|buf| buf.data_mut()[*index] += g[0]);
            }
            Op::Sum(x) => {
                bump(*x, &|buf| {
                    for o in buf.data_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                bump(*a, &|buf| axpy(buf, g[0], vb));
                bump(*b, &|buf| axpy(buf, g[0], va));
            }
            Op::ScaleBy { scalar, x } => {
                let s = self.value(*scalar).item();
                let xv = self.value(*x).data();
                bump(*scalar, &|buf| buf.data_mut()[0] += dot(g, xv));
                bump(*x, &|buf| axpy(buf, s, g));
            }
            Op::PadTo(x) => {
                let len = self.value(*x).len();
                let piece = &g[..len];
                bump(*x, &|buf| axpy(buf, 1.0, piece));
            }
            Op::ScatterAdd { weights, ids } => {
                bump(*weights, &|buf| {
                    for (o, &id) in buf.data_mut().iter_mut().zip(ids.iter()) {
                        *o += g[id];
                    }
                });
            }
        }
    }

    /// Sums gradients over every bound occurrence of each named parameter.
    pub fn param_gradients(
        &self,
        grads: &Gradients,
    ) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads.get(VarId(idx)) {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Tensor| axpy(acc, 1.0, g.data()))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn axpy(buf: &mut Tensor, a: f64, x: &[f64]) {
    debug_assert_eq!(buf.len(), x.len());
    for (o, &v) in buf.data_mut().iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Parameter bindings for one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_u: VarId,
    pub u_u: VarId,
    pub b_u: VarId,
    pub w_r: VarId,
    pub u_r: VarId,
    pub b_r: VarId,
    pub w_n: VarId,
    pub u_n: VarId,
    pub b_n: VarId,
}

/// Parameter bindings for a one-hidden-layer tanh network.
#[derive(Debug, Clone, Copy)]
pub struct FfnnVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}
