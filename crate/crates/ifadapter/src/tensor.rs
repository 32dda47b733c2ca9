//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors are immutable values holding row-major data behind an `Rc`.
//! Every operation on a gradient-requiring input records its parents and a
//! vector-Jacobian closure on the output node; [`backward`] walks the graph
//! once in reverse topological order and accumulates per-leaf gradients.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

/// Additive mask value standing in for negative infinity. Scores at or below
/// half this value are treated as fully masked out.
pub const NEG_INF: f64 = -1e9;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type Vjp = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    parents: Vec<Tensor>,
    vjp: Vjp,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Immutable dense tensor; cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                op,
            }),
        }
    }

    /// A tensor that does not participate in differentiation.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant: shape {:?} wants {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// A leaf tensor that accumulates a gradient during [`backward`].
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {:?} wants {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        vjp: Vjp,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let op = if requires_grad { Some(Op { parents, vjp }) } else { None };
        Tensor::new(shape, data, requires_grad, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{what}: expected 2-d tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok((self.shape()[0], self.shape()[1]))
    }

    // ─────────────────────────── elementwise ───────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|up| vec![Some(up.to_vec()), Some(up.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|up| {
                vec![
                    Some(up.to_vec()),
                    Some(up.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let a = self.data().to_vec();
        let b = other.data().to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |up| {
                vec![
                    Some(up.iter().zip(&b).map(|(u, bv)| u * bv).collect()),
                    Some(up.iter().zip(&a).map(|(u, av)| u * av).collect()),
                ]
            }),
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |up| vec![Some(up.iter().map(|u| u * c).collect())]),
        )
    }

    /// Multiply every entry by a single-element tensor (both sides differentiable).
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar: scalar operand has shape {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|v| v * sv).collect();
        let a = self.data().to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |up| {
                let da = up.iter().map(|u| u * sv).collect();
                let ds = up.iter().zip(&a).map(|(u, av)| u * av).sum::<f64>();
                vec![Some(da), Some(vec![ds])]
            }),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                vec![Some(
                    up.iter().zip(&saved).map(|(u, y)| u * (1.0 - y * y)).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                vec![Some(
                    up.iter()
                        .zip(&saved)
                        .map(|(u, y)| u * y * (1.0 - y))
                        .collect(),
                )]
            }),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.data().to_vec();
        let out = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let grad = up
                    .iter()
                    .zip(&x)
                    .map(|(u, &v)| {
                        let t = (C * (v + A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v);
                        u * d
                    })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    // ─────────────────────────── reductions ───────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |up| vec![Some(vec![up[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |up| vec![Some(vec![up[0] / n as f64; n])]),
        )
    }

    // ─────────────────────────── shape moves ───────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|up| vec![Some(up.to_vec())]),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.rows_cols("transpose")?;
        let src = self.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let mut g = vec![0.0; n * m];
                for j in 0..m {
                    for i in 0..n {
                        g[i * m + j] = up[j * n + i];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Vertically stack 2-d tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows: empty input".into()));
        }
        let cols = parts[0].rows_cols("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            rows += r;
            row_counts.push(r);
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            parts.to_vec(),
            Box::new(move |up| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut at = 0;
                for &r in &row_counts {
                    grads.push(Some(up[at..at + r * cols].to_vec()));
                    at += r * cols;
                }
                grads
            }),
        ))
    }

    /// Concatenate 1-d tensors end to end.
    pub fn concat_vec(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_vec: empty input".into()));
        }
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != 1 {
                return Err(Error::Shape(format!(
                    "concat_vec: expected 1-d parts, got {:?}",
                    p.shape()
                )));
            }
            lens.push(p.numel());
            data.extend_from_slice(p.data());
        }
        let total = data.len();
        Ok(Tensor::from_op(
            vec![total],
            data,
            parts.to_vec(),
            Box::new(move |up| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut at = 0;
                for &l in &lens {
                    grads.push(Some(up[at..at + l].to_vec()));
                    at += l;
                }
                grads
            }),
        ))
    }

    // ─────────────────────────── linear algebra ───────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.rows_cols("matmul lhs")?;
        let (k2, m) = other.rows_cols("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let out = matmul_raw(self.data(), other.data(), n, k, m);
        let a = self.data().to_vec();
        let b = other.data().to_vec();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |up| {
                // da = up . b^T, db = a^T . up
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    let urow = &up[i * m..(i + 1) * m];
                    let drow = &mut da[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let brow = &b[kk * m..(kk + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += urow[j] * brow[j];
                        }
                        drow[kk] = acc;
                    }
                }
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let arow = &a[i * k..(i + 1) * k];
                    let urow = &up[i * m..(i + 1) * m];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            let drow = &mut db[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                drow[j] += av * urow[j];
                            }
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// x . w + b with `b` broadcast across rows; `b` may be `None`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (n, k) = self.rows_cols("linear input")?;
        let (k2, m) = w.rows_cols("linear weight")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "linear: input cols {k} vs weight rows {k2}"
            )));
        }
        let mut out = matmul_raw(self.data(), w.data(), n, k, m);
        if let Some(bias) = b {
            if bias.numel() != m {
                return Err(Error::Shape(format!(
                    "linear: bias len {} vs out cols {m}",
                    bias.numel()
                )));
            }
            let bd = bias.data();
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] += bd[j];
                }
            }
        }
        let a = self.data().to_vec();
        let wd = w.data().to_vec();
        let has_bias = b.is_some();
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(bias) = b {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            parents,
            Box::new(move |up| {
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let urow = &up[i * m..(i + 1) * m];
                    let drow = &mut dx[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let wrow = &wd[kk * m..(kk + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += urow[j] * wrow[j];
                        }
                        drow[kk] = acc;
                    }
                }
                let mut dw = vec![0.0; k * m];
                for i in 0..n {
                    let arow = &a[i * k..(i + 1) * k];
                    let urow = &up[i * m..(i + 1) * m];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            let drow = &mut dw[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                drow[j] += av * urow[j];
                            }
                        }
                    }
                }
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += up[i * m + j];
                        }
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        ))
    }

    /// Add a `[d]` (or `[1, d]`) vector to every row of an `[n, d]` tensor.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        let (n, d) = self.rows_cols("add_row_broadcast")?;
        if row.numel() != d {
            return Err(Error::Shape(format!(
                "add_row_broadcast: row len {} vs cols {d}",
                row.numel()
            )));
        }
        let rd = row.data();
        let mut out = self.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += rd[j];
            }
        }
        let row_shape_len = row.numel();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |up| {
                let mut dr = vec![0.0; row_shape_len];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += up[i * d + j];
                    }
                }
                vec![Some(up.to_vec()), Some(dr)]
            }),
        ))
    }

    /// Scale each row of an `[n, d]` tensor by a constant per-row weight.
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Tensor> {
        let (n, d) = self.rows_cols("scale_rows")?;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "scale_rows: {} weights for {n} rows",
                weights.len()
            )));
        }
        let mut out = self.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= weights[i];
            }
        }
        let w = weights.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let mut g = up.to_vec();
                for i in 0..n {
                    for j in 0..d {
                        g[i * d + j] *= w[i];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Row-wise softmax. Rows flagged dead in `alive` produce all-zero output
    /// (the fully-masked-row convention) and propagate no gradient.
    pub fn softmax_rows(&self, alive: Option<&[bool]>) -> Result<Tensor> {
        let (n, m) = self.rows_cols("softmax_rows")?;
        if let Some(a) = alive {
            if a.len() != n {
                return Err(Error::Shape(format!(
                    "softmax_rows: {} alive flags for {n} rows",
                    a.len()
                )));
            }
        }
        let src = self.data();
        let mut out = vec![0.0; n * m];
        let alive_vec: Vec<bool> = match alive {
            Some(a) => a.to_vec(),
            None => vec![true; n],
        };
        for i in 0..n {
            if !alive_vec[i] {
                continue;
            }
            let row = &src[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        let probs = out.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let mut g = vec![0.0; n * m];
                for i in 0..n {
                    if !alive_vec[i] {
                        continue;
                    }
                    let p = &probs[i * m..(i + 1) * m];
                    let u = &up[i * m..(i + 1) * m];
                    let dot: f64 = p.iter().zip(u).map(|(pv, uv)| pv * uv).sum();
                    for j in 0..m {
                        g[i * m + j] = p[j] * (u[j] - dot);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// 3x3 same-padding convolution. Input `[c_in, h, w]`, kernel
    /// `[c_out, c_in, 3, 3]`, bias `[c_out]`, output `[c_out, h, w]`.
    pub fn conv3x3(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(Error::Shape(format!("conv3x3: input shape {sh:?}")));
        }
        let (cin, h, w) = (sh[0], sh[1], sh[2]);
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != cin || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Shape(format!(
                "conv3x3: kernel shape {ks:?} for input {sh:?}"
            )));
        }
        let cout = ks[0];
        if bias.numel() != cout {
            return Err(Error::Shape(format!(
                "conv3x3: bias len {} vs {cout} output channels",
                bias.numel()
            )));
        }
        let x = self.data();
        let k = kernel.data();
        let bd = bias.data();
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            let plane = &mut out[co * h * w..(co + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                let kb = &k[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += xin[sy as usize * w + sx as usize] * kb[dy * 3 + dx];
                            }
                        }
                        plane[y * w + xx] += acc;
                    }
                }
            }
        }
        let xsaved = x.to_vec();
        let ksaved = k.to_vec();
        Ok(Tensor::from_op(
            vec![cout, h, w],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |up| {
                let mut dx = vec![0.0; cin * h * w];
                let mut dk = vec![0.0; cout * cin * 9];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    let uplane = &up[co * h * w..(co + 1) * h * w];
                    db[co] += uplane.iter().sum::<f64>();
                    for ci in 0..cin {
                        let xin = &xsaved[ci * h * w..(ci + 1) * h * w];
                        let kb = &ksaved[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                        let dkb = &mut dk[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                        for y in 0..h {
                            for xx in 0..w {
                                let u = uplane[y * w + xx];
                                if u == 0.0 {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dxx in 0..3usize {
                                        let sx = xx as isize + dxx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let si = sy as usize * w + sx as usize;
                                        dx[ci * h * w + si] += u * kb[dy * 3 + dxx];
                                        dkb[dy * 3 + dxx] += u * xin[si];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dk), Some(db)]
            }),
        ))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// Per-tensor gradients produced by [`backward`], keyed by tensor id.
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&[f64]> {
        self.map.get(&id).map(|v| v.as_slice())
    }
}

/// Reverse sweep from a scalar loss. Returns gradients for every
/// gradient-requiring tensor reachable from `loss`.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("backward: non-finite loss".into()));
    }

    // Post-order DFS over the recorded graph; reversed it gives a valid
    // topological order from the loss down to the leaves.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.inner.op {
            for p in &op.parents {
                if p.inner.requires_grad && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    let mut map: HashMap<u64, Vec<f64>> = HashMap::new();
    map.insert(loss.id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(up) = map.get(&node.id()).cloned() else {
            continue;
        };
        if let Some(op) = &node.inner.op {
            let parent_grads = (op.vjp)(&up);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (parent, grad) in op.parents.iter().zip(parent_grads) {
                if !parent.inner.requires_grad {
                    continue;
                }
                if let Some(g) = grad {
                    debug_assert_eq!(g.len(), parent.numel());
                    map.entry(parent.id())
                        .and_modify(|acc| {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        })
                        .or_insert(g);
                }
            }
        }
    }
    Ok(Gradients { map })
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe)?;
        probe[i] = x[i] - step;
        let lo = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest mismatch between analytic and numeric gradients, measured as
/// |a - n| / max(|a|, |n|, 1e-2).
pub fn max_grad_mismatch(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}
