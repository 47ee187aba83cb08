//! Dense row-major `f64` tensors and the forward kernels used by the model.
//!
//! Everything here is plain CPU code over `Vec<f64>`. Kernels are pure
//! functions; shape validation happens once at the public entry points and
//! every kernel output is checked for NaN/Inf (a non-finite value anywhere
//! is treated as an error, never silently propagated).

use std::fmt;

/// Errors produced by tensor construction and kernel evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the data length.
    ShapeData { shape: Vec<usize>, len: usize },
    /// Operand shapes are incompatible for the requested operation.
    DimMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    /// An index (token id, row, expert, ...) is out of range.
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    /// A kernel produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// The operation requires a different rank or a scalar.
    RankMismatch { op: &'static str, shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeData { shape, len } => {
                write!(f, "shape {shape:?} does not match data length {len}")
            }
            Self::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Self::RankMismatch { op, shape } => {
                write!(f, "{op}: unsupported operand shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense tensor: a shape and row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeData { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a scalar (shape `[1]`) tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::RankMismatch { op: "item", shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_finite(t: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn want_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::RankMismatch { op, shape: t.shape().to_vec() }),
    }
}

// ---------------------------------------------------------------------------
// Forward kernels. Each validates shapes, computes, and checks finiteness.
// The tape calls exactly these for both traced and untraced execution, so
// the two modes are bit-identical by construction.
// ---------------------------------------------------------------------------

/// `a [m,k] @ b [k,p] -> [m,p]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = want_rank2(a, "matmul")?;
    let (kb, p) = want_rank2(b, "matmul")?;
    if ka != kb {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * p..(i + 1) * p];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let t = Tensor { shape: vec![m, p], data: out };
    check_finite(&t, "matmul")?;
    Ok(t)
}

/// `a [m,k] @ b^T` where `b` is `[p,k] -> [m,p]`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = want_rank2(a, "matmul_nt")?;
    let (p, kb) = want_rank2(b, "matmul_nt")?;
    if ka != kb {
        return Err(TensorError::DimMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for j in 0..p {
            let brow = &b.data[j * ka..(j + 1) * ka];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * p + j] = acc;
        }
    }
    let t = Tensor { shape: vec![m, p], data: out };
    check_finite(&t, "matmul_nt")?;
    Ok(t)
}

/// `a^T [k,m] @ b [k,p] -> [m,p]` (used by backward rules only).
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (k, m) = want_rank2(a, "matmul_tn")?;
    let (kb, p) = want_rank2(b, "matmul_tn")?;
    if k != kb {
        return Err(TensorError::DimMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * p];
    for l in 0..k {
        let arow = &a.data[l * m..(l + 1) * m];
        let brow = &b.data[l * p..(l + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, p], data: out })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    check_finite(&t, "add")?;
    Ok(t)
}

/// Broadcast add of a length-`n` vector onto every row of `[m,n]`.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(a, "add_bias")?;
    if bias.shape() != [n] {
        return Err(TensorError::DimMismatch {
            op: "add_bias",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut data = a.data.clone();
    for r in 0..m {
        for (x, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(&bias.data) {
            *x += bv;
        }
    }
    let t = Tensor { shape: vec![m, n], data };
    check_finite(&t, "add_bias")?;
    Ok(t)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    check_finite(&t, "mul")?;
    Ok(t)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
    if !c.is_finite() {
        return Err(TensorError::NonFinite { op: "scale" });
    }
    let data = a.data.iter().map(|x| x * c).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    check_finite(&t, "scale")?;
    Ok(t)
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Result<Tensor, TensorError> {
    let data = a.data.iter().map(|&x| silu_scalar(x)).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    check_finite(&t, "silu")?;
    Ok(t)
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalization with a learned gain vector.
pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(x, "rms_norm")?;
    if gain.shape() != [n] {
        return Err(TensorError::DimMismatch {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (o, (&v, &g)) in data[r * n..(r + 1) * n].iter_mut().zip(row.iter().zip(&gain.data)) {
            *o = v * inv * g;
        }
    }
    let t = Tensor { shape: vec![m, n], data };
    check_finite(&t, "rms_norm")?;
    Ok(t)
}

/// Numerically stable softmax of a slice, written into `out`.
pub(crate) fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over a vector, or independently over each row of a matrix.
pub fn softmax(a: &Tensor) -> Result<Tensor, TensorError> {
    check_finite(a, "softmax")?;
    let (m, n) = match a.shape() {
        [n] => (1usize, *n),
        [m, n] => (*m, *n),
        _ => return Err(TensorError::RankMismatch { op: "softmax", shape: a.shape().to_vec() }),
    };
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        softmax_slice(&a.data[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
    }
    let t = Tensor { shape: a.shape.clone(), data };
    check_finite(&t, "softmax")?;
    Ok(t)
}

/// Causal softmax over a square score matrix: row `t` is a softmax over
/// columns `0..=t`, later columns are exactly zero.
pub fn causal_softmax(a: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(a, "causal_softmax")?;
    if m != n {
        return Err(TensorError::DimMismatch {
            op: "causal_softmax",
            lhs: a.shape().to_vec(),
            rhs: vec![m, m],
        });
    }
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        let row = &a.data[r * n..r * n + r + 1];
        softmax_slice(row, &mut data[r * n..r * n + r + 1]);
    }
    let t = Tensor { shape: vec![m, n], data };
    check_finite(&t, "causal_softmax")?;
    Ok(t)
}

/// Softmax restricted to a per-row selection: selected entries form a
/// softmax over their logits alone, unselected entries are exactly zero.
///
/// This equals softmax-then-renormalize over the selected set (the shared
/// normalizer cancels), and is how top-k weight renormalization is computed.
pub fn select_softmax(z: &Tensor, selected: &[Vec<usize>]) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(z, "select_softmax")?;
    if selected.len() != m {
        return Err(TensorError::DimMismatch {
            op: "select_softmax",
            lhs: z.shape().to_vec(),
            rhs: vec![selected.len()],
        });
    }
    let mut data = vec![0.0; m * n];
    for (r, sel) in selected.iter().enumerate() {
        let row = z.row(r);
        let mut max = f64::NEG_INFINITY;
        for &i in sel {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    what: "select_softmax column",
                    index: i,
                    bound: n,
                });
            }
            max = max.max(row[i]);
        }
        let mut sum = 0.0;
        for &i in sel {
            let e = (row[i] - max).exp();
            data[r * n + i] = e;
            sum += e;
        }
        for &i in sel {
            data[r * n + i] /= sum;
        }
    }
    let t = Tensor { shape: vec![m, n], data };
    check_finite(&t, "select_softmax")?;
    Ok(t)
}

/// Gather rows of `x` by index: `out[j] = x[idx[j]]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(x, "gather_rows")?;
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i >= m {
            return Err(TensorError::IndexOutOfRange { what: "gather row", index: i, bound: m });
        }
        data.extend_from_slice(x.row(i));
    }
    Ok(Tensor { shape: vec![idx.len(), n], data })
}

/// Scatter-add rows of `x` into a zero `[rows,n]` tensor: `out[idx[j]] += x[j]`.
pub fn scatter_rows(x: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(x, "scatter_rows")?;
    if idx.len() != m {
        return Err(TensorError::DimMismatch {
            op: "scatter_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![idx.len()],
        });
    }
    let mut data = vec![0.0; rows * n];
    for (j, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(TensorError::IndexOutOfRange { what: "scatter row", index: i, bound: rows });
        }
        for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(x.row(j)) {
            *o += v;
        }
    }
    Ok(Tensor { shape: vec![rows, n], data })
}

/// Gather scalar entries from flattened storage: `out[j] = x.data[idx[j]]`.
pub fn gather_entries(x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
    let mut data = Vec::with_capacity(idx.len());
    for &i in idx {
        if i >= x.len() {
            return Err(TensorError::IndexOutOfRange { what: "gather entry", index: i, bound: x.len() });
        }
        data.push(x.data[i]);
    }
    Ok(Tensor { shape: vec![idx.len()], data })
}

/// Scale each row of `x [m,n]` by the matching entry of `s [m]`.
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(x, "scale_rows")?;
    if s.shape() != [m] {
        return Err(TensorError::DimMismatch {
            op: "scale_rows",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        let f = s.data[r];
        for (o, &v) in data[r * n..(r + 1) * n].iter_mut().zip(x.row(r)) {
            *o = v * f;
        }
    }
    let t = Tensor { shape: vec![m, n], data };
    check_finite(&t, "scale_rows")?;
    Ok(t)
}

/// Column means of `[m,n] -> [n]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(x, "mean_rows")?;
    let mut data = vec![0.0; n];
    for r in 0..m {
        for (o, &v) in data.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    for o in data.iter_mut() {
        *o /= m as f64;
    }
    Ok(Tensor { shape: vec![n], data })
}

/// Dot product of a vector with a constant vector, as a scalar tensor.
pub fn dot(x: &Tensor, c: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape() != c.shape() || x.shape().len() != 1 {
        return Err(TensorError::DimMismatch {
            op: "dot",
            lhs: x.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let v = x.data.iter().zip(&c.data).map(|(a, b)| a * b).sum();
    let t = Tensor::scalar(v);
    check_finite(&t, "dot")?;
    Ok(t)
}

/// Stable log-sum-exp of a slice.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Summed next-token cross-entropy: `-sum_t log p(targets[t] | logits[t])`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor, TensorError> {
    let (m, n) = want_rank2(logits, "cross_entropy")?;
    if targets.len() != m {
        return Err(TensorError::DimMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= n {
            return Err(TensorError::IndexOutOfRange { what: "target", index: t, bound: n });
        }
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[t];
    }
    let t = Tensor::scalar(loss);
    check_finite(&t, "cross_entropy")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = matmul(&i2, &v).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_zeros() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 0.25, -1.0, 7.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::DimMismatch { .. })));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bt = Tensor::new(vec![2, 3], vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 1.0, 8.0, 2.0, 9.0, 3.0]).unwrap();
        let fast = matmul_nt(&a, &bt).unwrap();
        let slow = matmul(&a, &b).unwrap();
        assert_eq!(fast, slow);
    }

    #[test]
    fn softmax_uniform() {
        let out = softmax(&Tensor::from_vec(vec![0.0; 4])).unwrap();
        for &p in out.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_two_element() {
        for c in [-100.0, 0.0, 7.5, 300.0] {
            let out = softmax(&Tensor::from_vec(vec![c, c + 3f64.ln()])).unwrap();
            assert!((out.data()[0] - 0.25).abs() < 1e-12);
            assert!((out.data()[1] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let v = vec![0.3, -1.2, 4.0, 2.2, -0.5];
        let a = softmax(&Tensor::from_vec(v.clone())).unwrap();
        let b = softmax(&Tensor::from_vec(v.iter().map(|x| x + 17.25).collect())).unwrap();
        let sum: f64 = a.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Tensor::zeros(vec![1, 16]);
        let loss = cross_entropy(&logits, &[3]).unwrap().item().unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_logit_near_zero() {
        let mut logits = Tensor::zeros(vec![1, 8]);
        logits.data_mut()[2] = 30.0;
        let loss = cross_entropy(&logits, &[2]).unwrap().item().unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        // Direct per-element evaluation with plain scalar arithmetic.
        let data = vec![
            0.31, -1.4, 2.2, 0.05, -0.7, //
            1.9, 0.0, -2.5, 0.6, 1.1, //
            -0.2, 0.8, 0.4, -1.9, 2.7,
        ];
        let targets = [2u32, 0, 4];
        let logits = Tensor::new(vec![3, 5], data.clone()).unwrap();
        let got = cross_entropy(&logits, &targets).unwrap().item().unwrap();
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[t as usize].exp() / z).ln();
        }
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn select_softmax_equals_renormalized_full_softmax() {
        let z = Tensor::new(vec![1, 4], vec![2.0, 1.0, 0.0, -1.0]).unwrap();
        let sel = vec![vec![0usize, 1]];
        let w = select_softmax(&z, &sel).unwrap();
        let full = softmax(&z).unwrap();
        let denom = full.data()[0] + full.data()[1];
        assert!((w.data()[0] - full.data()[0] / denom).abs() < 1e-12);
        assert!((w.data()[1] - full.data()[1] / denom).abs() < 1e-12);
        assert_eq!(w.data()[2], 0.0);
        assert_eq!(w.data()[3], 0.0);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let s = Tensor::new(vec![3, 3], vec![0.1; 9]).unwrap();
        let p = causal_softmax(&s).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[2], 0.0);
        assert_eq!(p.data()[5], 0.0);
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        let row1: f64 = p.row(1).iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_gather_roundtrip() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let g = gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = scatter_rows(&g, &[2, 0], 4).unwrap();
        assert_eq!(s.row(2), &[5.0, 6.0]);
        assert_eq!(s.row(0), &[1.0, 2.0]);
        assert_eq!(s.row(1), &[0.0, 0.0]);
    }
}
