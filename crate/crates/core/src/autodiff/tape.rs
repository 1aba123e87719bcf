//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the handles of its
//! inputs. `backward` walks the list once in reverse and accumulates vector-
//! Jacobian products into the inputs that need them.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf. `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording arena for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Sizes of the (outer, axis, inner) blocks when iterating over `axis`.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m×n] = beta·c + a_eff[m×k] · b_eff[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover every index reachable through the supplied strides
    // (callers derive strides from the slice shapes) and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(op_name, a, b)?;
        let n: usize = shape.iter().product();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (sa, sb) = (va.len() == 1, vb.len() == 1);
        let data = (0..n)
            .map(|i| {
                let x = if sa { va[0] } else { va[i] };
                let y = if sb { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let xs = self.value(x);
        let rs = self.value(row);
        let cols = xs.cols();
        if rs.len() != cols {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: xs.shape().to_vec(),
                rhs: rs.shape().to_vec(),
            });
        }
        let r = rs.data();
        let data = xs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % cols]))
            .collect();
        let shape = xs.shape().to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a vector of length `cols`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `C = op(A)·op(B)` for 2-D operands, with optional transposes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (a_rs, a_cs) = if ta { (1, sa[1]) } else { (sa[1], 1) };
        let (b_rs, b_cs) = if tb { (1, sb[1]) } else { (sb[1], 1) };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_rs,
            a_cs,
            self.value(b).data(),
            b_rs,
            b_cs,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `A · Bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidOperand {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(Error::InvalidOperand {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_blocks(&shape, axis);
        if len == 0 {
            return Err(Error::InvalidOperand {
                op: "softmax",
                msg: "empty axis".into(),
            });
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| v[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.value(x);
        let cols = xs.cols();
        let rows = xs.rows();
        let v = xs.data();
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (c, a) in row.iter().enumerate() {
                out[r * cols + c] = (a - mean) * s;
            }
            rstd.push(s);
        }
        let shape = xs.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, rstd },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::InvalidOperand {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !conforms {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidOperand {
                op: "slice",
                msg: format!(
                    "range {start}..{} outside extent {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, full, inner) = axis_blocks(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums along `axis`, removing it (a 1-D input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::SumAxis { x, axis },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or(Error::InvalidOperand {
                op: "mean_axis",
                msg: format!("axis {axis} out of range"),
            })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if indices.is_empty() {
            return Err(Error::InvalidOperand {
                op: "gather",
                msg: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(Error::InvalidOperand {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", d.len()),
            });
        }
        let out = indices.iter().map(|&i| d[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of a 2-D tensor, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::InvalidOperand {
                op: "select_rows",
                msg: format!("rows {rows:?} invalid for shape {s:?}"),
            });
        }
        let c = s[1];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf recorded before `loss` gets an entry in the
    /// result (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(d) => Tensor::from_parts(shape, d),
                        None => Tensor::zeros(&shape),
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    /// Accumulates a same-shaped or broadcast-scalar contribution.
    fn accum_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        self.accum(grads, v, |slot| {
            if slot.len() == contrib.len() {
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            } else {
                slot[0] += contrib.iter().sum::<f64>();
            }
        });
    }

    fn bval(&self, v: Var, i: usize) -> f64 {
        let d = self.nodes[v.0].value.data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, g);
                self.accum_broadcast(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum_broadcast(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x * self.bval(*b, k))
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x * self.bval(*a, k))
                    .collect();
                self.accum_broadcast(grads, *a, &ga);
                self.accum_broadcast(grads, *b, &gb);
            }
            Op::Div(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x / self.bval(*b, k))
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let bv = self.bval(*b, k);
                        -x * self.bval(*a, k) / (bv * bv)
                    })
                    .collect();
                self.accum_broadcast(grads, *a, &ga);
                self.accum_broadcast(grads, *b, &gb);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for k in 0..g.len() {
                    let (x, y) = (self.bval(*a, k), self.bval(*b, k));
                    let pick_a = if is_max { x >= y } else { x <= y };
                    if pick_a {
                        ga[k] = g[k];
                    } else {
                        gb[k] = g[k];
                    }
                }
                self.accum_broadcast(grads, *a, &ga);
                self.accum_broadcast(grads, *b, &gb);
            }
            Op::AddRow(x, row) => {
                self.accum(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
                let cols = self.nodes[row.0].value.len();
                self.accum(grads, *row, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % cols] += gv;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let r = self.nodes[row.0].value.data();
                let xv = self.nodes[x.0].value.data();
                let cols = r.len();
                self.accum(grads, *x, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k] += gv * r[k % cols];
                    }
                });
                self.accum(grads, *row, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % cols] += gv * xv[k];
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accum(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
                });
            }
            Op::AddScalar(x) => {
                self.accum(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (sa, sb) = (av.shape(), bv.shape());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                // strides of the effective operands
                let (a_rs, a_cs) = if *ta { (1, sa[1]) } else { (sa[1], 1) };
                let (b_rs, b_cs) = if *tb { (1, sb[1]) } else { (sb[1], 1) };
                if self.nodes[a.0].requires_grad {
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; av.len()]);
                    if *ta {
                        // a is [k×m]: da += B_eff · dCᵀ
                        gemm(k, n, m, bv.data(), b_rs, b_cs, g, 1, n, slot, 1.0);
                    } else {
                        // a is [m×k]: da += dC · B_effᵀ
                        gemm(m, n, k, g, n, 1, bv.data(), b_cs, b_rs, slot, 1.0);
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let slot = grads[b.0].get_or_insert_with(|| vec![0.0; bv.len()]);
                    if *tb {
                        // b is [n×k]: db += dCᵀ · A_eff
                        gemm(n, m, k, g, 1, n, av.data(), a_rs, a_cs, slot, 1.0);
                    } else {
                        // b is [k×n]: db += A_effᵀ · dC
                        gemm(k, m, n, av.data(), a_cs, a_rs, g, n, 1, slot, 1.0);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                self.accum(grads, *x, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |s| {
                    for (s, &g) in s.iter_mut().zip(g) {
                        *s += g;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Exp(x) => {
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k];
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data();
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.data();
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * xv[k].signum() * f64::from(xv[k] != 0.0);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[x.0].value.data();
                self.accum(grads, *x, |s| {
                    for k in 0..s.len() {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_blocks(node.value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                s[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let cols = node.value.cols();
                self.accum(grads, *x, |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let gy = &g[range.clone()];
                        let y = &out[range.clone()];
                        let mean_g = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy =
                            gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            s[r * cols + c] += rs * (gy[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    self.accum(grads, *v, |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                s[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, full, inner) = axis_blocks(xs, *axis);
                let len = node.value.shape()[*axis];
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            s[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accum(grads, *x, |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                self.accum(grads, *x, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_blocks(self.nodes[x.0].value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                s[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accum(grads, *x, |s| {
                    for (k, &idx) in indices.iter().enumerate() {
                        s[idx] += g[k];
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.cols();
                self.accum(grads, *x, |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[r * c + j] += g[k * c + j];
                        }
                    }
                });
            }
        }
    }
}
