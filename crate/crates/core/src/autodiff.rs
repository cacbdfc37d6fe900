//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Every value is a row-major `Array2<f64>`: rows are reaches (or batch
//! entries), columns are features. Scalars are `1 x 1`. Operations are
//! recorded on a [`Tape`] as they execute; [`Tape::backward`] replays the
//! tape in exact reverse order and accumulates adjoints additively, so a
//! value used twice receives the sum of both contributions.
//!
//! ```
//! use grc_core::autodiff::Tape;
//! use ndarray::array;
//!
//! let tape = Tape::new();
//! let x = tape.param(0, array![[1.0, 2.0], [3.0, 4.0]]);
//! let loss = x.sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param(0).unwrap(), &array![[1.0, 1.0], [1.0, 1.0]]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of tape values. `F32` rounds every op output through
/// single precision; arithmetic still runs in double.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Compressed sparse rows, used for `D^-1 (A + I)` style aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                if c >= n_cols {
                    return Err(Error::invalid(format!(
                        "column {c} out of range for {n_cols} columns"
                    )));
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols));
        for i in 0..self.n_rows() {
            for (j, v) in self.row(i) {
                out[[i, j]] += v;
            }
        }
        out
    }

    /// `self . x`
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), x.ncols()));
        for (i, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (j, w) in self.row(i) {
                out_row.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// `copies` independent copies of `self` along the diagonal.
    pub fn block_diagonal(&self, copies: usize) -> Self {
        let (r, c) = (self.n_rows(), self.n_cols);
        let mut indptr = Vec::with_capacity(r * copies + 1);
        let mut indices = Vec::with_capacity(self.indices.len() * copies);
        let mut values = Vec::with_capacity(self.values.len() * copies);
        indptr.push(0);
        for b in 0..copies {
            for i in 0..r {
                for (j, v) in self.row(i) {
                    indices.push(b * c + j);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
        }
        Self {
            n_cols: c * copies,
            indptr,
            indices,
            values,
        }
    }

    /// `self^T . g`
    pub fn apply_transpose(&self, g: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_cols, g.ncols()));
        for i in 0..self.n_rows() {
            let g_row = g.row(i);
            for (j, w) in self.row(i) {
                out.row_mut(j).scaled_add(w, &g_row);
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>, Axis),
    SliceCols(usize, usize),
    Aggregate(usize, Arc<CsrMatrix>),
    Sum(usize),
    MeanSquare(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: BTreeMap<usize, Array2<f64>>,
}

impl Gradients {
    /// Gradient of any recorded value; `None` when it does not reach the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Array2<f64>> {
        self.nodes.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient for a parameter slot.
    pub fn param(&self, slot: usize) -> Option<&Array2<f64>> {
        self.params.get(&slot)
    }

    /// Gradient for a parameter slot, or zeros of `shape` when the slot is off
    /// the loss path.
    pub fn param_or_zeros(&self, slot: usize, shape: (usize, usize)) -> Array2<f64> {
        self.params
            .get(&slot)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn into_params(self) -> BTreeMap<usize, Array2<f64>> {
        self.params
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_of(a: &Array2<f64>) -> Vec<usize> {
    a.shape().to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut value: Array2<f64>, op: Op) -> Var<'_> {
        if self.precision == Precision::F32 {
            value.mapv_inplace(|v| v as f32 as f64);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A constant input. It never receives a gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf whose gradient is reported under `slot`.
    pub fn param(&self, slot: usize, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Param(slot))
    }

    /// Clears the consumed flag so `backward` may run again.
    pub fn reset_grad(&self) {
        self.consumed.set(false);
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.sweep(loss, true)
    }

    /// Like [`Tape::backward`] but drops intermediate adjoints as soon as
    /// they are propagated; only parameter gradients are returned.
    pub fn backward_params(&self, loss: Var<'_>) -> Result<BTreeMap<usize, Array2<f64>>> {
        Ok(self.sweep(loss, false)?.into_params())
    }

    fn sweep(&self, loss: Var<'_>, keep: bool) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::BackwardConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.idx].value.dim();
        if loss_shape != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: vec![loss_shape.0, loss_shape.1],
                right: vec![1, 1],
            });
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Array2::ones((1, 1)));
        let mut params = BTreeMap::new();

        fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    params
                        .entry(*slot)
                        .and_modify(|acc: &mut Array2<f64>| *acc += &g)
                        .or_insert_with(|| g.clone());
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ga = g.dot(&bv.t());
                    let gb = av.t().dot(&g);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::MatMulNT(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ga = g.dot(bv);
                    let gb = g.t().dot(av);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*b], g.clone());
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*b], -&g);
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[*b], gb);
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::Hadamard(a, b) => {
                    let ga = &g * &nodes[*b].value;
                    let gb = &g * &nodes[*a].value;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads[*a], &g * *c),
                Op::Gelu(a) => {
                    let mut ga = nodes[*a].value.mapv(gelu_grad_scalar);
                    ga *= &g;
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = node.value.mapv(|y| y * (1.0 - y));
                    ga *= &g;
                    accumulate(&mut grads[*a], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = node.value.mapv(|y| 1.0 - y * y);
                    ga *= &g;
                    accumulate(&mut grads[*a], ga);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = nodes[p].value.len_of(*axis);
                        let piece = match axis.index() {
                            0 => g.slice(s![offset..offset + width, ..]).to_owned(),
                            _ => g.slice(s![.., offset..offset + width]).to_owned(),
                        };
                        accumulate(&mut grads[p], piece);
                        offset += width;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[*a], ga);
                }
                Op::Aggregate(a, adj) => {
                    accumulate(&mut grads[*a], adj.apply_transpose(g.view()));
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads[*a], ga);
                }
                Op::MeanSquare(a) => {
                    let av = &nodes[*a].value;
                    let k = 2.0 * g[[0, 0]] / av.len() as f64;
                    accumulate(&mut grads[*a], av * k);
                }
                Op::SumSquares(a) => {
                    let av = &nodes[*a].value;
                    accumulate(&mut grads[*a], av * (2.0 * g[[0, 0]]));
                }
            }
            if keep {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn scalar(&self) -> f64 {
        self.value()[[0, 0]]
    }

    /// Same value, cut from the tape: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        let v = self.to_array();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().mapv(f);
        self.tape.push(out, op)
    }

    fn binary_same_shape(
        &self,
        other: &Var<'_>,
        name: &'static str,
    ) -> Result<(Ref<'t, Array2<f64>>, Ref<'t, Array2<f64>>)> {
        self.same_tape(other);
        let a = self.value();
        let b = Ref::map(self.tape.nodes.borrow(), |n| &n[other.idx].value);
        if a.dim() != b.dim() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: shape_of(&a),
                right: shape_of(&b),
            });
        }
        Ok((a, b))
    }

    /// `self . other`
    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.ncols() != b.nrows() {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: shape_of(a),
                    right: shape_of(b),
                });
            }
            a.dot(b)
        };
        Ok(self.tape.push(out, Op::MatMul(self.idx, other.idx)))
    }

    /// `self . other^T`, the natural form for `(out, in)` weight matrices.
    pub fn matmul_t(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.ncols() != b.ncols() {
                return Err(Error::ShapeMismatch {
                    op: "matmul_t",
                    left: shape_of(a),
                    right: shape_of(b),
                });
            }
            a.dot(&b.t())
        };
        Ok(self.tape.push(out, Op::MatMulNT(self.idx, other.idx)))
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = self.binary_same_shape(other, "add")?;
            &*a + &*b
        };
        Ok(self.tape.push(out, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = self.binary_same_shape(other, "sub")?;
            &*a - &*b
        };
        Ok(self.tape.push(out, Op::Sub(self.idx, other.idx)))
    }

    pub fn hadamard(&self, other: &Var<'_>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = self.binary_same_shape(other, "hadamard")?;
            &*a * &*b
        };
        Ok(self.tape.push(out, Op::Hadamard(self.idx, other.idx)))
    }

    /// Adds a `1 x c` row vector to every row.
    pub fn add_row(&self, bias: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[bias.idx].value);
            if b.nrows() != 1 || b.ncols() != a.ncols() {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    left: shape_of(a),
                    right: shape_of(b),
                });
            }
            a + b
        };
        Ok(self.tape.push(out, Op::AddRow(self.idx, bias.idx)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|v| v * c, Op::Scale(self.idx, c))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu_scalar, Op::Gelu(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid_scalar, Op::Sigmoid(self.idx))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.idx))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis > 1 {
            return Err(Error::invalid(format!("concat axis {axis} on 2-D tensors")));
        }
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    nodes[p.idx].value.view()
                })
                .collect();
            let other = 1 - axis;
            let expect = views[0].len_of(Axis(other));
            if let Some(bad) = views.iter().find(|v| v.len_of(Axis(other)) != expect) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: views[0].shape().to_vec(),
                    right: bad.shape().to_vec(),
                });
            }
            concatenate(Axis(axis), &views).expect("shapes checked")
        };
        Ok(tape.push(
            out,
            Op::Concat(parts.iter().map(|p| p.idx).collect(), Axis(axis)),
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if start > end || end > a.ncols() {
                return Err(Error::ShapeMismatch {
                    op: "slice_cols",
                    left: shape_of(&a),
                    right: vec![start, end],
                });
            }
            a.slice(s![.., start..end]).to_owned()
        };
        Ok(self.tape.push(out, Op::SliceCols(self.idx, start)))
    }

    /// Sparse row aggregation `adj . self` (e.g. `D^-1 (A + I) X`).
    pub fn row_normalize_apply(&self, adj: &Arc<CsrMatrix>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if adj.n_cols() != a.nrows() {
                return Err(Error::ShapeMismatch {
                    op: "row_normalize_apply",
                    left: vec![adj.n_rows(), adj.n_cols()],
                    right: shape_of(&a),
                });
            }
            adj.apply(a.view())
        };
        Ok(self.tape.push(out, Op::Aggregate(self.idx, Arc::clone(adj))))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Array2::from_elem((1, 1), s), Op::Sum(self.idx))
    }

    pub fn mean_square(&self) -> Var<'t> {
        let m = {
            let a = self.value();
            a.iter().map(|v| v * v).sum::<f64>() / a.len().max(1) as f64
        };
        self.tape
            .push(Array2::from_elem((1, 1), m), Op::MeanSquare(self.idx))
    }

    pub fn sum_squares(&self) -> Var<'t> {
        let m = self.value().iter().map(|v| v * v).sum::<f64>();
        self.tape
            .push(Array2::from_elem((1, 1), m), Op::SumSquares(self.idx))
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        Zip::from(&*self.value()).for_each(|v| ok &= v.is_finite());
        ok
    }
}
