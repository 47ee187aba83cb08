//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of a forward pass in execution order;
//! [`Tape::backward`] replays the records once, in reverse, accumulating
//! vector-Jacobian products. Gradients are materialized only for nodes that
//! (transitively) depend on a [`Tape::var`] leaf, so differentiating a
//! handful of router deltas through a frozen model never allocates gradient
//! buffers for the model weights.
//!
//! A tape built with [`Tape::inference`] runs the exact same kernels but
//! records nothing; forward values are bit-identical between the two modes.
//! Tapes are single-owner: build one per forward pass and drop it.

use crate::tensor::{self, Tensor, TensorError};
use std::fmt;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Backward was requested on a non-recording (inference) tape.
    NotRecording,
    /// Backward source node is not a scalar.
    LossNotScalar { shape: Vec<usize> },
    /// The node exists but carries no gradient (it is not a variable).
    NoGradient { node: usize },
    /// The node id does not belong to this tape.
    UnknownNode { node: usize },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotRecording => write!(f, "backward on an inference tape"),
            Self::LossNotScalar { shape } => write!(f, "backward source has shape {shape:?}, expected scalar"),
            Self::NoGradient { node } => write!(f, "node {node} is not a differentiable variable"),
            Self::UnknownNode { node } => write!(f, "node {node} not found on tape"),
        }
    }
}

impl std::error::Error for TapeError {}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Silu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId },
    Softmax(NodeId),
    CausalSoftmax(NodeId),
    SelectSoftmax { z: NodeId, selected: Vec<Vec<usize>> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScatterRows { x: NodeId, idx: Vec<usize> },
    GatherEntries { x: NodeId, idx: Vec<usize> },
    ScaleRows { x: NodeId, s: NodeId },
    MeanRows(NodeId),
    Dot { x: NodeId, c: Tensor },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Recording context for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Tape {
    /// New recording tape.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// Non-recording tape: same kernels, no backward information.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        let requires = self.recording;
        self.push(value, Op::Leaf, requires)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.recording {
            self.nodes.push(Node { value, op, requires });
        } else {
            self.nodes.push(Node { value, op: Op::Leaf, requires: false });
        }
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn record(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        self.push(value, op, requires)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.record(v, Op::Add(a, b), req))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::add_bias(self.value(a), self.value(bias))?;
        let req = self.requires(a) || self.requires(bias);
        Ok(self.record(v, Op::AddBias(a, bias), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.record(v, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = tensor::scale(self.value(a), c)?;
        let req = self.requires(a);
        Ok(self.record(v, Op::Scale(a, c), req))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.record(v, Op::Matmul(a, b), req))
    }

    /// `a @ b^T`; saves the transpose of the second operand.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.record(v, Op::MatmulNT(a, b), req))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::silu(self.value(a))?;
        let req = self.requires(a);
        Ok(self.record(v, Op::Silu(a), req))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::rms_norm(self.value(x), self.value(gain))?;
        let req = self.requires(x) || self.requires(gain);
        Ok(self.record(v, Op::RmsNorm { x, gain }, req))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::softmax(self.value(a))?;
        let req = self.requires(a);
        Ok(self.record(v, Op::Softmax(a), req))
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::causal_softmax(self.value(a))?;
        let req = self.requires(a);
        Ok(self.record(v, Op::CausalSoftmax(a), req))
    }

    pub fn select_softmax(&mut self, z: NodeId, selected: &[Vec<usize>]) -> Result<NodeId, TensorError> {
        let v = tensor::select_softmax(self.value(z), selected)?;
        let req = self.requires(z);
        Ok(self.record(v, Op::SelectSoftmax { z, selected: selected.to_vec() }, req))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let v = tensor::gather_rows(self.value(x), idx)?;
        let req = self.requires(x);
        Ok(self.record(v, Op::GatherRows { x, idx: idx.to_vec() }, req))
    }

    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], rows: usize) -> Result<NodeId, TensorError> {
        let v = tensor::scatter_rows(self.value(x), idx, rows)?;
        let req = self.requires(x);
        Ok(self.record(v, Op::ScatterRows { x, idx: idx.to_vec() }, req))
    }

    pub fn gather_entries(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let v = tensor::gather_entries(self.value(x), idx)?;
        let req = self.requires(x);
        Ok(self.record(v, Op::GatherEntries { x, idx: idx.to_vec() }, req))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::scale_rows(self.value(x), self.value(s))?;
        let req = self.requires(x) || self.requires(s);
        Ok(self.record(v, Op::ScaleRows { x, s }, req))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::mean_rows(self.value(x))?;
        let req = self.requires(x);
        Ok(self.record(v, Op::MeanRows(x), req))
    }

    pub fn dot(&mut self, x: NodeId, c: Tensor) -> Result<NodeId, TensorError> {
        let v = tensor::dot(self.value(x), &c)?;
        let req = self.requires(x);
        Ok(self.record(v, Op::Dot { x, c }, req))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, TensorError> {
        let v = tensor::cross_entropy(self.value(logits), targets)?;
        let req = self.requires(logits);
        Ok(self.record(v, Op::CrossEntropy { logits, targets: targets.to_vec() }, req))
    }

    /// Backpropagate from a scalar node, visiting every recorded node once
    /// in reverse execution order. Returns gradients for all variables.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        if !self.recording {
            return Err(TapeError::NotRecording);
        }
        let src = self.nodes.get(loss.0).ok_or(TapeError::UnknownNode { node: loss.0 })?;
        if src.value.len() != 1 {
            return Err(TapeError::LossNotScalar { shape: src.value.shape().to_vec() });
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            grads.push(if node.requires { Some(vec![0.0; node.value.len()]) } else { None });
        }
        if let Some(g) = grads[loss.0].as_mut() {
            g[0] = 1.0;
        }

        for i in (0..self.nodes.len()).rev() {
            let out_grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &out_grad, &mut grads);
            // leaves keep their accumulated gradient; interior grads are dropped
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(out_grad);
            }
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = grads[a.0].as_mut() {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = grads[b.0].as_mut() {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(da) = grads[a.0].as_mut() {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = grads[b.0].as_mut() {
                    let n = db.len();
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = grads[a.0].as_mut() {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = grads[b.0].as_mut() {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = grads[a.0].as_mut() {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec()).expect("grad shape");
                if let Some(da) = grads[a.0].as_mut() {
                    let d = tensor::matmul_nt(&gt, val(*b)).expect("matmul grad lhs");
                    for (x, &y) in da.iter_mut().zip(d.data()) {
                        *x += y;
                    }
                }
                if let Some(db) = grads[b.0].as_mut() {
                    let d = tensor::matmul_tn(val(*a), &gt).expect("matmul grad rhs");
                    for (x, &y) in db.iter_mut().zip(d.data()) {
                        *x += y;
                    }
                }
            }
            Op::MatmulNT(a, b) => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec()).expect("grad shape");
                if let Some(da) = grads[a.0].as_mut() {
                    let d = tensor::matmul(&gt, val(*b)).expect("matmul_nt grad lhs");
                    for (x, &y) in da.iter_mut().zip(d.data()) {
                        *x += y;
                    }
                }
                if let Some(db) = grads[b.0].as_mut() {
                    let d = tensor::matmul_tn(&gt, val(*a)).expect("matmul_nt grad rhs");
                    for (x, &y) in db.iter_mut().zip(d.data()) {
                        *x += y;
                    }
                }
            }
            Op::Silu(a) => {
                if let Some(da) = grads[a.0].as_mut() {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(val(*a).data()) {
                        let s = 1.0 / (1.0 + (-x).exp());
                        *d += gv * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let xv = val(*x);
                let gv = val(*gain);
                let n = gv.len();
                let m = xv.rows();
                for r in 0..m {
                    let row = xv.row(r);
                    let grow = &g[r * n..(r + 1) * n];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + tensor::RMS_EPS).sqrt();
                    if grads[x.0].is_some() {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += grow[j] * gv.data()[j] * row[j];
                        }
                        let dx = grads[x.0].as_mut().expect("checked");
                        let corr = inv * inv * inv * dot / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += grow[j] * gv.data()[j] * inv - row[j] * corr;
                        }
                    }
                    if let Some(dg) = grads[gain.0].as_mut() {
                        for j in 0..n {
                            dg[j] += grow[j] * row[j] * inv;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if grads[a.0].is_some() {
                    let p = &self.nodes[i].value;
                    let n = p.cols();
                    let m = p.rows();
                    let da = grads[a.0].as_mut().expect("checked");
                    for r in 0..m {
                        let prow = &p.data()[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..n {
                            da[r * n + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                if grads[a.0].is_some() {
                    let p = &self.nodes[i].value;
                    let n = p.cols();
                    let da = grads[a.0].as_mut().expect("checked");
                    for r in 0..p.rows() {
                        let prow = &p.data()[r * n..r * n + r + 1];
                        let grow = &g[r * n..r * n + r + 1];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..=r {
                            da[r * n + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::SelectSoftmax { z, selected } => {
                if grads[z.0].is_some() {
                    let w = &self.nodes[i].value;
                    let n = w.cols();
                    let dz = grads[z.0].as_mut().expect("checked");
                    for (r, sel) in selected.iter().enumerate() {
                        let mut dot = 0.0;
                        for &j in sel {
                            dot += w.data()[r * n + j] * g[r * n + j];
                        }
                        for &j in sel {
                            let wj = w.data()[r * n + j];
                            dz[r * n + j] += wj * (g[r * n + j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(dx) = grads[x.0].as_mut() {
                    let n = val(*x).cols();
                    for (j, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            dx[src * n + c] += g[j * n + c];
                        }
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                if let Some(dx) = grads[x.0].as_mut() {
                    let n = val(*x).cols();
                    for (j, &dst) in idx.iter().enumerate() {
                        for c in 0..n {
                            dx[j * n + c] += g[dst * n + c];
                        }
                    }
                }
            }
            Op::GatherEntries { x, idx } => {
                if let Some(dx) = grads[x.0].as_mut() {
                    for (j, &src) in idx.iter().enumerate() {
                        dx[src] += g[j];
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let sv = val(*s);
                let xv = val(*x);
                let n = xv.cols();
                if let Some(dx) = grads[x.0].as_mut() {
                    for r in 0..xv.rows() {
                        let f = sv.data()[r];
                        for c in 0..n {
                            dx[r * n + c] += g[r * n + c] * f;
                        }
                    }
                }
                if let Some(ds) = grads[s.0].as_mut() {
                    for r in 0..xv.rows() {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += g[r * n + c] * xv.data()[r * n + c];
                        }
                        ds[r] += acc;
                    }
                }
            }
            Op::MeanRows(x) => {
                if let Some(dx) = grads[x.0].as_mut() {
                    let m = val(*x).rows();
                    let n = val(*x).cols();
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c] / m as f64;
                        }
                    }
                }
            }
            Op::Dot { x, c } => {
                if let Some(dx) = grads[x.0].as_mut() {
                    for (d, &cv) in dx.iter_mut().zip(c.data()) {
                        *d += g[0] * cv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if grads[logits.0].is_some() {
                    let lv = val(*logits);
                    let n = lv.cols();
                    let mut probs = vec![0.0; n];
                    let dl = grads[logits.0].as_mut().expect("checked");
                    for (r, &t) in targets.iter().enumerate() {
                        tensor::softmax_slice(lv.row(r), &mut probs);
                        for (j, &p) in probs.iter().enumerate() {
                            let ind = if j == t as usize { 1.0 } else { 0.0 };
                            dl[r * n + j] += g[0] * (p - ind);
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`], queryable per variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the backward source with respect to a variable node.
    ///
    /// Variables the loss does not depend on yield an all-zero gradient;
    /// asking for a non-variable (e.g. a frozen weight leaf) is an error.
    pub fn get(&self, id: NodeId) -> Result<Tensor, TapeError> {
        match self.grads.get(id.0) {
            None => Err(TapeError::UnknownNode { node: id.0 }),
            Some(None) => Err(TapeError::NoGradient { node: id.0 }),
            Some(Some(g)) => {
                Ok(Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("stored shape"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = x*x at x=3 -> df/dx = 6
        let mut t = Tape::new();
        let x = t.var(Tensor::from_vec(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn untouched_variable_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_vec(vec![3.0]));
        let unused = t.var(Tensor::from_vec(vec![5.0, 7.0]));
        let y = t.mul(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_vec(vec![2.0]));
        let w = t.leaf(Tensor::from_vec(vec![4.0]));
        let y = t.mul(x, w).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
        assert!(matches!(grads.get(w), Err(TapeError::NoGradient { .. })));
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut t = Tape::inference();
        let x = t.var(Tensor::from_vec(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        assert!(matches!(t.backward(y), Err(TapeError::NotRecording)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TapeError::LossNotScalar { .. })));
    }

    #[test]
    fn traced_forward_matches_untraced_bitwise() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.7, 2.9, 0.01, 4.4, -0.6]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![1.3, 0.7, -2.9, 3.01, -0.4, 0.66]).unwrap();
        let run = |mut t: Tape| {
            let x = t.var(a.clone());
            let y = t.leaf(b.clone());
            let s = t.mul(x, y).unwrap();
            let sm = t.softmax(s).unwrap();
            t.value(sm).clone()
        };
        let traced = run(Tape::new());
        let plain = run(Tape::inference());
        for (p, q) in traced.data().iter().zip(plain.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // loss = cross_entropy(softmax-ish pipeline built from several ops)
        let x0 = vec![0.4, -0.3, 1.2, 0.7, -0.9, 0.2];
        let w = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.8, 0.3, -0.5, 1.1]).unwrap();
        let gain = Tensor::from_vec(vec![1.0, 1.1, 0.9]);
        let targets = [2u32, 0];

        let mut eval = |xv: &[f64]| {
            let mut t = Tape::inference();
            let x = t.var(Tensor::new(vec![2, 3], xv.to_vec()).unwrap());
            let g = t.leaf(gain.clone());
            let wl = t.leaf(w.clone());
            let xn = t.rms_norm(x, g).unwrap();
            let h = t.matmul(xn, wl).unwrap();
            let h2 = t.silu(h).unwrap();
            let sc = t.scale(h2, 1.7).unwrap();
            let logits = t.matmul_nt(sc, wl).unwrap();
            let loss = t.cross_entropy(logits, &targets).unwrap();
            t.value(loss).item().unwrap()
        };

        let fd = finite_diff(&mut eval, &x0, 1e-6);

        let mut t = Tape::new();
        let x = t.var(Tensor::new(vec![2, 3], x0.clone()).unwrap());
        let g = t.leaf(gain.clone());
        let wl = t.leaf(w.clone());
        let xn = t.rms_norm(x, g).unwrap();
        let h = t.matmul(xn, wl).unwrap();
        let h2 = t.silu(h).unwrap();
        let sc = t.scale(h2, 1.7).unwrap();
        let logits = t.matmul_nt(sc, wl).unwrap();
        let loss = t.cross_entropy(logits, &targets).unwrap();
        let grads = t.backward(loss).unwrap();
        let got = grads.get(x).unwrap();

        for (a, f) in got.data().iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn select_softmax_gradient_matches_finite_differences() {
        let z0 = vec![1.2, -0.4, 0.9, 0.1, 2.0, -1.0, 0.3, 0.8];
        let sel = vec![vec![0usize, 2], vec![1usize, 3]];
        let coef = Tensor::new(vec![2, 4], vec![0.3, -1.0, 0.7, 0.2, 1.5, -0.4, 0.1, 0.9]).unwrap();

        let mut eval = |zv: &[f64]| {
            let mut t = Tape::inference();
            let z = t.var(Tensor::new(vec![2, 4], zv.to_vec()).unwrap());
            let c = t.leaf(coef.clone());
            let w = t.select_softmax(z, &sel).unwrap();
            let p = t.mul(w, c).unwrap();
            let m = t.mean_rows(p).unwrap();
            let s = t.dot(m, Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
            t.value(s).item().unwrap()
        };
        let fd = finite_diff(&mut eval, &z0, 1e-6);

        let mut t = Tape::new();
        let z = t.var(Tensor::new(vec![2, 4], z0.clone()).unwrap());
        let c = t.leaf(coef.clone());
        let w = t.select_softmax(z, &sel).unwrap();
        let p = t.mul(w, c).unwrap();
        let m = t.mean_rows(p).unwrap();
        let s = t.dot(m, Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        let grads = t.backward(s).unwrap();
        let got = grads.get(z).unwrap();
        for (a, f) in got.data().iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn gather_scatter_gradients_match_finite_differences() {
        let x0 = vec![0.5, -0.2, 1.4, 0.9, -1.1, 0.3];
        let sel_rows = vec![2usize, 0];
        let weights = Tensor::from_vec(vec![0.7, -1.3]);

        let mut eval = |xv: &[f64]| {
            let mut t = Tape::inference();
            let x = t.var(Tensor::new(vec![3, 2], xv.to_vec()).unwrap());
            let g = t.gather_rows(x, &sel_rows).unwrap();
            let wv = t.leaf(weights.clone());
            let sr = t.scale_rows(g, wv).unwrap();
            let back = t.scatter_rows(sr, &sel_rows, 3).unwrap();
            let flat = t.gather_entries(back, &[0, 1, 2, 3, 4, 5]).unwrap();
            let s = t.dot(flat, Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
            t.value(s).item().unwrap()
        };
        let fd = finite_diff(&mut eval, &x0, 1e-6);

        let mut t = Tape::new();
        let x = t.var(Tensor::new(vec![3, 2], x0.clone()).unwrap());
        let g = t.gather_rows(x, &sel_rows).unwrap();
        let wv = t.leaf(weights.clone());
        let sr = t.scale_rows(g, wv).unwrap();
        let back = t.scatter_rows(sr, &sel_rows, 3).unwrap();
        let flat = t.gather_entries(back, &[0, 1, 2, 3, 4, 5]).unwrap();
        let s = t.dot(flat, Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let grads = t.backward(s).unwrap();
        let got = grads.get(x).unwrap();
        for (a, f) in got.data().iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4, "analytic {a} vs fd {f}");
        }
    }
}
