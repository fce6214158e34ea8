//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it in reverse and
//! accumulates gradients. Parameter leaves borrow their data from a
//! [`ParamStore`] and never copy it.
//!
//! Broadcasting is deliberately absent except along the leading batch
//! dimension ([`Tape::add_bias`]); every other op requires matching shapes.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, gemm};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

static BACKWARD_PASSES: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD_BACKWARD_PASSES: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of backward passes executed by this process so far.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.load(Ordering::SeqCst)
}

/// Number of backward passes executed on the calling thread so far.
pub fn thread_backward_pass_count() -> u64 {
    THREAD_BACKWARD_PASSES.with(|c| c.get())
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSoftmax(Var),
    LogAddExp(Var, Var),
    Sum(Var),
    Pick(Var, usize),
    Concat(Var, Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var },
    GatedScan { x: Var, segments: Vec<usize> },
    OuterAdd(Var, Var),
    BucketLogProbs { x: Var, ids: Vec<usize>, j: usize },
    RowScalar { x: Var, jacobian: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    flops: u64,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations recorded so far (forward and backward).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Var {
        self.push(shape, Cow::Owned(value), op, rg)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input: no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.owned(shape, t.into_data(), Op::Leaf, false)
    }

    /// A free input leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.owned(shape, t.into_data(), Op::Leaf, true)
    }

    /// A parameter leaf borrowing the store's data. Repeated calls for the
    /// same id return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Like [`Tape::param`] but without gradient tracking.
    pub fn frozen_param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::linear(self.value(a), m, k, self.value(b), n, n, None);
        self.flops += (2 * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.owned(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.flops += out.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.owned(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product; with a constant `b` this is a dropout mask.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("logaddexp", a, b, Op::LogAddExp(a, b), kernels::logaddexp)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        self.flops += out.len() as u64;
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.owned(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Adds a length-`n` bias to every row of an `[... × n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(b) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        self.flops += out.len() as u64;
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        Ok(self.owned(shape, out, Op::AddBias(x, b), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input to log_softmax".into()));
        }
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        kernels::log_softmax_rows(&mut out, n);
        self.flops += 4 * out.len() as u64;
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.owned(shape, out, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.flops += self.value(x).len() as u64;
        let rg = self.rg(x);
        self.owned(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Extracts element `index` (row-major) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::contract(format!("pick index {index} out of range {len}")));
        }
        let v = self.value(x)[index];
        let rg = self.rg(x);
        Ok(self.owned(vec![1], vec![v], Op::Pick(x, index), rg))
    }

    /// Concatenation along the last axis of two matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.matrix("concat", a)?;
        let (mb, nb) = self.matrix("concat", b)?;
        if ma != mb {
            return Err(Error::Shape {
                op: "concat",
                left: vec![ma, na],
                right: vec![mb, nb],
            });
        }
        let mut out = Vec::with_capacity(ma * (na + nb));
        for (ra, rb) in self.value(a).chunks_exact(na).zip(self.value(b).chunks_exact(nb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.owned(vec![ma, na + nb], out, Op::Concat(a, b), rg))
    }

    /// Columns `start..start+len` along the last (channel) axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if len == 0 || start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: shape,
                right: vec![start, len],
            });
        }
        if start == 0 && len == cols {
            return Ok(x);
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in self.value(x).chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.owned(new_shape, out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if len == 0 || start + len > rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: shape,
                right: vec![start, len],
            });
        }
        if start == 0 && len == rows {
            return Ok(x);
        }
        let stride: usize = shape[1..].iter().product();
        let out = self.value(x)[start * stride..(start + len) * stride].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let rg = self.rg(x);
        Ok(self.owned(new_shape, out, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.owned(shape, out, Op::Reshape(x), rg))
    }

    /// Row lookup into a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("embedding id {bad} >= table size {v}")));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        let tv = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(table);
        Ok(self.owned(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let out = kernels::layer_norm_rows(self.value(x), n, self.value(gain), self.value(bias));
        self.flops += 8 * out.len() as u64;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.owned(shape, out, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Single-gate recurrence over the rows of a `[T × 2d]` input; see
    /// [`kernels::gated_scan`].
    pub fn gated_scan(&mut self, x: Var) -> Result<Var> {
        let t = self.shape(x)[0];
        self.gated_scan_segments(x, &[t])
    }

    /// [`Tape::gated_scan`] over consecutive row segments of lengths
    /// `segments`, restarting from a zero state at each segment start. Lets
    /// several sequences share one matrix.
    pub fn gated_scan_segments(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (t, two_d) = self.matrix("gated_scan", x)?;
        if two_d % 2 != 0 || segments.iter().sum::<usize>() != t || segments.contains(&0) {
            return Err(Error::Shape {
                op: "gated_scan",
                left: vec![t, two_d],
                right: segments.to_vec(),
            });
        }
        let d = two_d / 2;
        let out = kernels::gated_scan_segments(self.value(x), d, segments);
        self.flops += 8 * out.len() as u64;
        let rg = self.rg(x);
        Ok(self.owned(
            vec![t, d],
            out,
            Op::GatedScan {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// `out[t·U + u, :] = a[t, :] + b[u, :]` for `a: [T × h]`, `b: [U × h]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, h) = self.matrix("outer_add", a)?;
        let (u, h2) = self.matrix("outer_add", b)?;
        if h != h2 {
            return Err(Error::Shape {
                op: "outer_add",
                left: vec![t, h],
                right: vec![u, h2],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(t * u * h);
        for ra in av.chunks_exact(h) {
            for rb in bv.chunks_exact(h) {
                out.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        self.flops += out.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.owned(vec![t * u, h], out, Op::OuterAdd(a, b), rg))
    }

    /// Buckets each row of log-probabilities `[N × V]` into `j` selected
    /// entries (`ids` holds `j` indices per row) plus a remainder bucket
    /// holding the log of the unselected mass. Output is `[N × (j+1)]`.
    pub fn bucket_log_probs(&mut self, x: Var, ids: &[usize], j: usize) -> Result<Var> {
        let (rows, v) = rows_cols(self.shape(x));
        if j == 0 || j >= v || ids.len() != rows * j {
            return Err(Error::contract(format!(
                "bucket_log_probs: j={j}, V={v}, {} ids for {rows} rows",
                ids.len()
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * (j + 1));
        let mut selected = vec![false; v];
        for (r, row) in xv.chunks_exact(v).enumerate() {
            let sel = &ids[r * j..(r + 1) * j];
            selected.iter_mut().for_each(|s| *s = false);
            for &i in sel {
                if i >= v || selected[i] {
                    return Err(Error::contract(format!("bucket ids {sel:?} invalid for V={v}")));
                }
                selected[i] = true;
                out.push(row[i]);
            }
            let m = row
                .iter()
                .zip(&selected)
                .filter(|(_, &s)| !s)
                .map(|(&l, _)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let rest = if m == f64::NEG_INFINITY {
                m
            } else {
                m + row
                    .iter()
                    .zip(&selected)
                    .filter(|(_, &s)| !s)
                    .map(|(&l, _)| (l - m).exp())
                    .sum::<f64>()
                    .ln()
            };
            out.push(rest);
        }
        self.flops += (3 * rows * v) as u64;
        let rg = self.rg(x);
        Ok(self.owned(
            vec![rows, j + 1],
            out,
            Op::BucketLogProbs {
                x,
                ids: ids.to_vec(),
                j,
            },
            rg,
        ))
    }

    /// Applies a scalar function to each row of `x`. `f(row)` returns the
    /// value and its gradient with respect to the row. Output is `[N]`.
    pub fn row_scalar(&mut self, x: Var, mut f: impl FnMut(usize, &[f64]) -> (f64, Vec<f64>)) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut out = Vec::with_capacity(rows);
        let mut jacobian = Vec::with_capacity(rows * cols);
        for (r, row) in self.value(x).chunks_exact(cols).enumerate() {
            let (val, grad) = f(r, row);
            if grad.len() != cols {
                return Err(Error::Shape {
                    op: "row_scalar",
                    left: vec![cols],
                    right: vec![grad.len()],
                });
            }
            out.push(val);
            jacobian.extend(grad);
        }
        self.flops += (4 * rows * cols) as u64;
        let rg = self.rg(x);
        Ok(self.owned(vec![rows], out, Op::RowScalar { x, jacobian }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        BACKWARD_PASSES.fetch_add(1, Ordering::SeqCst);
        THREAD_BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut flops = 0u64;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            flops += self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.flops += flops;
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> u64 {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(buf);
        };
        let node = &nodes[i];
        let y = &node.value;
        let n = g.len() as u64;
        match &node.op {
            Op::Leaf | Op::Param => 0,
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let cols = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| gemm(m, cols, k, g, (cols, 1), bv, (1, cols), 1.0, da));
                acc(*b, &mut |db| gemm(k, m, cols, av, (1, k), g, (cols, 1), 1.0, db));
                (4 * m * k * cols) as u64
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                2 * n
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                2 * n
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
                4 * n
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
                n
            }
            Op::AddBias(x, b) => {
                let cols = nodes[b.0].value.len();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(cols) {
                        d.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                });
                2 * n
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
                n
            }
            Op::Tanh(x) => {
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
                3 * n
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
                3 * n
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                        let gs: f64 = gr.iter().sum();
                        for k in 0..cols {
                            dr[k] += gr[k] - yr[k].exp() * gs;
                        }
                    }
                });
                4 * n
            }
            Op::LogAddExp(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let w = |xv: &[f64], k: usize| {
                    if y[k] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (xv[k] - y[k]).exp()
                    }
                };
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * w(av, k);
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * w(bv, k);
                    }
                });
                6 * n
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0]));
                nodes[x.0].value.len() as u64
            }
            Op::Pick(x, idx) => {
                acc(*x, &mut |d| d[*idx] += g[0]);
                1
            }
            Op::Concat(a, b) => {
                let (na, nb) = (nodes[a.0].shape[1], nodes[b.0].shape[1]);
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(na).zip(g.chunks_exact(na + nb)) {
                        dr.iter_mut().zip(&gr[..na]).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(nb).zip(g.chunks_exact(na + nb)) {
                        dr.iter_mut().zip(&gr[na..]).for_each(|(x, y)| *x += y);
                    }
                });
                n
            }
            Op::SliceCols { x, start } => {
                let len = *node.shape.last().unwrap();
                let cols = *nodes[x.0].shape.last().unwrap();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                        dr[*start..start + len].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                n
            }
            Op::SliceRows { x, start } => {
                let stride: usize = node.shape[1..].iter().product();
                acc(*x, &mut |d| {
                    d[start * stride..start * stride + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
                n
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                n
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (gr, &id) in g.chunks_exact(dim).zip(ids) {
                        d[id * dim..(id + 1) * dim].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                n
            }
            Op::LayerNorm { x, gain, bias } => {
                let cols = nodes[gain.0].value.len();
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                acc(*bias, &mut |d| {
                    for gr in g.chunks_exact(cols) {
                        d.iter_mut().zip(gr).for_each(|(a, y)| *a += y);
                    }
                });
                acc(*gain, &mut |d| {
                    for (xr, gr) in xv.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        let (mean, inv) = kernels::row_stats(xr);
                        for k in 0..cols {
                            d[k] += gr[k] * (xr[k] - mean) * inv;
                        }
                    }
                });
                acc(*x, &mut |d| {
                    let nf = cols as f64;
                    for ((dr, xr), gr) in d.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let (mean, inv) = kernels::row_stats(xr);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..cols {
                            let dxh = gr[k] * gv[k];
                            s1 += dxh;
                            s2 += dxh * (xr[k] - mean) * inv;
                        }
                        for k in 0..cols {
                            let xh = (xr[k] - mean) * inv;
                            dr[k] += inv * (gr[k] * gv[k] - s1 / nf - xh * s2 / nf);
                        }
                    }
                });
                12 * n
            }
            Op::GatedScan { x, segments } => {
                let d = node.shape[1];
                let xv = &nodes[x.0].value;
                acc(*x, &mut |dx| {
                    let mut end = node.shape[0];
                    for &len in segments.iter().rev() {
                        let start = end - len;
                        let mut carry = vec![0.0; d];
                        for t in (start..end).rev() {
                            let row = &xv[t * 2 * d..(t + 1) * 2 * d];
                            for i in 0..d {
                                let gate = kernels::sigmoid(row[i]);
                                let cand = row[d + i].tanh();
                                let prev = if t == start { 0.0 } else { y[(t - 1) * d + i] };
                                let dh = g[t * d + i] + carry[i];
                                dx[t * 2 * d + i] += dh * (prev - cand) * gate * (1.0 - gate);
                                dx[t * 2 * d + d + i] += dh * (1.0 - gate) * (1.0 - cand * cand);
                                carry[i] = dh * gate;
                            }
                        }
                        end = start;
                    }
                });
                12 * n
            }
            Op::OuterAdd(a, b) => {
                let (t, h) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let u = nodes[b.0].shape[0];
                acc(*a, &mut |d| {
                    for ti in 0..t {
                        for ui in 0..u {
                            let gr = &g[(ti * u + ui) * h..(ti * u + ui + 1) * h];
                            d[ti * h..(ti + 1) * h].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for ti in 0..t {
                        for ui in 0..u {
                            let gr = &g[(ti * u + ui) * h..(ti * u + ui + 1) * h];
                            d[ui * h..(ui + 1) * h].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    }
                });
                2 * n
            }
            Op::BucketLogProbs { x, ids, j } => {
                let v = *nodes[x.0].shape.last().unwrap();
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    let mut selected = vec![false; v];
                    for (r, (dr, xr)) in d.chunks_exact_mut(v).zip(xv.chunks_exact(v)).enumerate() {
                        let sel = &ids[r * j..(r + 1) * j];
                        let gr = &g[r * (j + 1)..(r + 1) * (j + 1)];
                        selected.iter_mut().for_each(|s| *s = false);
                        for (k, &id) in sel.iter().enumerate() {
                            selected[id] = true;
                            dr[id] += gr[k];
                        }
                        let rest = y[r * (j + 1) + j];
                        if rest == f64::NEG_INFINITY {
                            continue;
                        }
                        for i in 0..v {
                            if !selected[i] {
                                dr[i] += gr[*j] * (xr[i] - rest).exp();
                            }
                        }
                    }
                });
                3 * (nodes[x.0].value.len() as u64)
            }
            Op::RowScalar { x, jacobian } => {
                let cols = *nodes[x.0].shape.last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, jr), gr) in d.chunks_exact_mut(cols).zip(jacobian.chunks_exact(cols)).zip(g) {
                        dr.iter_mut().zip(jr).for_each(|(a, b)| *a += gr * b);
                    }
                });
                2 * jacobian.len() as u64
            }
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// track gradients or was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Like [`Gradients::wrt`] but zeros for unreachable nodes.
    pub fn wrt_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }

    /// Adds `scale` times every parameter gradient into `out`.
    pub fn accumulate_params(&self, out: &mut ParamGrads, scale: f64) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.get_mut(id).iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }
}
