//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of that output with respect to every node.
//!
//! Everything is two-dimensional: row vectors are `1 × n`, column vectors
//! `n × 1`, scalars `1 × 1`. Shape errors are programming errors and panic.

use std::cell::RefCell;

use ndarray::{s, Array2, Axis, Zip};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Gelu(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows { base: usize, rows: usize, index: Vec<usize> },
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MaxAll(usize, (usize, usize)),
    Pick(usize, Vec<(usize, usize)>),
    Broadcast(usize),
    RowCosine(usize, usize),
    Reshape(usize),
    LayerNormRows(usize),
}

#[derive(Default)]
struct Inner {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Operation record. Handles borrow the tape, so a tape outlives its graph.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Array2<f64>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient for `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf holding `value`.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.var(Array2::zeros((rows, cols)))
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        Var { tape: self, id: inner.values.len() - 1 }
    }

    fn map1(&self, a: usize, f: impl FnOnce(&Array2<f64>) -> Array2<f64>, op: Op) -> Var<'_> {
        let value = f(&self.inner.borrow().values[a]);
        self.push(value, op)
    }

    fn map2(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: Op,
    ) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            f(&inner.values[a], &inner.values[b])
        };
        self.push(value, op)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| inner.values[p.id].view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| inner.values[p.id].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        let inner = self.inner.borrow();
        let n = inner.values.len();
        assert_eq!(inner.values[out.id].dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[out.id] = Some(Array2::ones((1, 1)));

        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let vals = &inner.values;
            match &inner.ops[id] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&vals[*b].t()));
                    accumulate(&mut grads, *b, vals[*a].t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &vals[*b]);
                    accumulate(&mut grads, *b, &g * &vals[*a]);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&vals[*a], &vals[*b]);
                    accumulate(&mut grads, *a, &g / vb);
                    let mut gb = g.clone();
                    Zip::from(&mut gb).and(va).and(vb).for_each(|x, &p, &q| *x = -*x * p / (q * q));
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * &vals[*a]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *col, gc);
                    accumulate(&mut grads, *a, &g * &vals[*col]);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &vals[id];
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, y * &(&g - &dot));
                }
                Op::Gelu(a) => {
                    let mut ga = vals[*a].mapv(gelu_grad);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&vals[*a]).for_each(|x, &v| {
                        if v <= 0.0 {
                            *x = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = vals[*a].mapv(sigmoid);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&vals[id]).for_each(|x, &y| {
                        *x = if y > 0.0 { *x / (2.0 * y) } else { 0.0 }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => accumulate(&mut grads, *a, &g * &vals[*a] * 2.0),
                Op::Abs(a) => {
                    let mut ga = vals[*a].mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, Array2::from_elem(vals[*a].dim(), g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(vals[*a].dim()).expect("sum_rows broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(vals[*a].dim()).expect("sum_cols broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(vals[*a].dim());
                    for (k, &row) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(row);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterRows { base, rows, index } => {
                    let mut gr = Array2::zeros(vals[*rows].dim());
                    let mut gb = g.clone();
                    for (k, &row) in index.iter().enumerate() {
                        gr.row_mut(k).assign(&g.row(row));
                        gb.row_mut(row).fill(0.0);
                    }
                    accumulate(&mut grads, *rows, gr);
                    accumulate(&mut grads, *base, gb);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(vals[*a].dim());
                    let width = g.ncols();
                    ga.slice_mut(s![.., *start..*start + width]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = vals[p].ncols();
                        accumulate(&mut grads, p, g.slice(s![.., offset..offset + width]).to_owned());
                        offset += width;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let height = vals[p].nrows();
                        accumulate(&mut grads, p, g.slice(s![offset..offset + height, ..]).to_owned());
                        offset += height;
                    }
                }
                Op::MaxAll(a, at) => {
                    let mut ga = Array2::zeros(vals[*a].dim());
                    ga[*at] = g[[0, 0]];
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, at) => {
                    let mut ga = Array2::zeros(vals[*a].dim());
                    for (k, &ij) in at.iter().enumerate() {
                        ga[ij] += g[[k, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Broadcast(a) => accumulate(&mut grads, *a, Array2::from_elem((1, 1), g.sum())),
                Op::RowCosine(a, b) => {
                    let (ga, gb) = row_cosine_grad(&vals[*a], &vals[*b], &vals[id], &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(vals[*a].dim())
                        .expect("reshape gradient");
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a) => {
                    let ga = layer_norm_grad(&vals[*a], &vals[id], &g);
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[id] = Some(g);
        }

        let shapes = inner.values.iter().map(|v| v.dim()).collect();
        Grads { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    y
}

fn row_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), 1));
    for (i, (ra, rb)) in a.rows().into_iter().zip(b.rows()).enumerate() {
        let na = ra.dot(&ra).sqrt();
        let nb = rb.dot(&rb).sqrt();
        if na > 0.0 && nb > 0.0 {
            out[[i, 0]] = ra.dot(&rb) / (na * nb);
        }
    }
    out
}

fn row_cosine_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cos: &Array2<f64>,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut ga = Array2::zeros(a.dim());
    let mut gb = Array2::zeros(b.dim());
    for i in 0..a.nrows() {
        let (ra, rb) = (a.row(i), b.row(i));
        let na = ra.dot(&ra).sqrt();
        let nb = rb.dot(&rb).sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let c = cos[[i, 0]];
        let gi = g[[i, 0]];
        let inv = 1.0 / (na * nb);
        ga.row_mut(i).assign(&((&rb * inv - &ra * (c / (na * na))) * gi));
        gb.row_mut(i).assign(&((&ra * inv - &rb * (c / (nb * nb))) * gi));
    }
    (ga, gb)
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    y
}

fn layer_norm_grad(x: &Array2<f64>, y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let gy = g.row(i);
        let yi = y.row(i);
        let mean_g = gy.sum() / n;
        let mean_gy = gy.dot(&yi) / n;
        for j in 0..row.len() {
            out[[i, j]] = inv * (gy[j] - mean_g - yi[j] * mean_gy);
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().values[self.id].dim()
    }

    pub fn scalar_value(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(v.dim(), (1, 1), "scalar_value on a non-scalar");
            v[[0, 0]]
        })
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.map2(
            self.id,
            rhs.id,
            |a, b| {
                assert_eq!(a.ncols(), b.nrows(), "matmul {:?} x {:?}", a.dim(), b.dim());
                a.dot(b)
            },
            Op::MatMul(self.id, rhs.id),
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.map2(self.id, rhs.id, |a, b| same_shape("add", a, b) + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.map2(self.id, rhs.id, |a, b| same_shape("sub", a, b) - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.map2(self.id, rhs.id, |a, b| same_shape("mul", a, b) * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.map2(self.id, rhs.id, |a, b| same_shape("div", a, b) / b, Op::Div(self.id, rhs.id))
    }

    /// Adds the `1 × n` row `bias` to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.tape.map2(
            self.id,
            bias.id,
            |a, b| {
                assert_eq!(b.dim(), (1, a.ncols()), "add_row {:?} + {:?}", a.dim(), b.dim());
                a + b
            },
            Op::AddRow(self.id, bias.id),
        )
    }

    /// Scales row `i` by `col[i]` (`col` is `n × 1`).
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.tape.map2(
            self.id,
            col.id,
            |a, c| {
                assert_eq!(c.dim(), (a.nrows(), 1), "mul_col {:?} * {:?}", a.dim(), c.dim());
                a * c
            },
            Op::MulCol(self.id, col.id),
        )
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.tape.map1(self.id, |a| a * factor, Op::Scale(self.id, factor))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.map1(self.id, |a| a + c, Op::AddScalar(self.id))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.t().as_standard_layout().into_owned(), Op::Transpose(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape.map1(self.id, softmax_rows, Op::SoftmaxRows(self.id))
    }

    pub fn gelu(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(gelu), Op::Gelu(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(softplus), Op::Softplus(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(|v| v * v), Op::Square(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.map1(self.id, |a| a.mapv(f64::abs), Op::Abs(self.id))
    }

    /// Sum of all entries, as a `1 × 1`.
    pub fn sum(self) -> Var<'t> {
        self.tape.map1(self.id, |a| Array2::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Per-row sums, `n × 1`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::SumRows(self.id),
        )
    }

    /// Per-column sums, `1 × m`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::SumCols(self.id),
        )
    }

    pub fn gather_rows(self, index: &[usize]) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| a.select(Axis(0), index),
            Op::GatherRows(self.id, index.to_vec()),
        )
    }

    /// Copy of `self` with row `index[k]` replaced by row `k` of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(self, rows: Var<'t>, index: &[usize]) -> Var<'t> {
        self.tape.map2(
            self.id,
            rows.id,
            |base, r| {
                assert_eq!(r.nrows(), index.len(), "scatter_rows: {} rows for {} indices", r.nrows(), index.len());
                assert_eq!(r.ncols(), base.ncols(), "scatter_rows: column mismatch");
                let mut out = base.clone();
                for (k, &row) in index.iter().enumerate() {
                    out.row_mut(row).assign(&r.row(k));
                }
                out
            },
            Op::ScatterRows { base: self.id, rows: rows.id, index: index.to_vec() },
        )
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| a.slice(s![.., start..start + width]).to_owned(),
            Op::SliceCols(self.id, start),
        )
    }

    /// Global maximum as a `1 × 1`; the gradient goes to the first maximal entry.
    pub fn max_all(self) -> Var<'t> {
        let (value, at) = self.with_value(|a| {
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for ((i, j), &v) in a.indexed_iter() {
                if v > best.0 {
                    best = (v, (i, j));
                }
            }
            best
        });
        self.tape.push(Array2::from_elem((1, 1), value), Op::MaxAll(self.id, at))
    }

    /// Selected entries as an `n × 1` column, in the given order.
    pub fn pick(self, at: &[(usize, usize)]) -> Var<'t> {
        let value = self.with_value(|a| Array2::from_shape_fn((at.len(), 1), |(k, _)| a[at[k]]));
        self.tape.push(value, Op::Pick(self.id, at.to_vec()))
    }

    /// Repeats a `1 × 1` into a `rows × cols` matrix.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| {
                assert_eq!(a.dim(), (1, 1), "broadcast of a non-scalar");
                Array2::from_elem((rows, cols), a[[0, 0]])
            },
            Op::Broadcast(self.id),
        )
    }

    /// Cosine similarity between matching rows, `n × 1`. Rows where either
    /// side has zero norm yield 0 with zero gradient.
    pub fn row_cosine(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.map2(
            self.id,
            rhs.id,
            |a, b| row_cosine(same_shape("row_cosine", a, b), b),
            Op::RowCosine(self.id, rhs.id),
        )
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.map1(
            self.id,
            |a| {
                a.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((rows, cols))
                    .expect("reshape: element count differs")
            },
            Op::Reshape(self.id),
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(self) -> Var<'t> {
        self.tape.map1(self.id, layer_norm, Op::LayerNormRows(self.id))
    }
}

fn same_shape<'a>(what: &str, a: &'a Array2<f64>, b: &Array2<f64>) -> &'a Array2<f64> {
    assert_eq!(a.dim(), b.dim(), "{what}: shape {:?} vs {:?}", a.dim(), b.dim());
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at `x0` for every entry.
    fn check(x0: Array2<f64>, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = f(&tape, x);
        let g = tape.backward(y).wrt(x);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (i, j) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[i, j]] += delta;
                let t = Tape::new();
                let v = t.var(xp);
                f(&t, v).scalar_value()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = g[[i, j]];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry ({i},{j}): analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        check(x0.clone(), |t, x| x.gelu().mul(t.var(w.clone())).sum());
        check(x0.clone(), |_, x| x.softplus().square().sum());
        check(x0.mapv(|v| v + 2.0), |_, x| x.sqrt().sum());
        check(x0.clone(), |t, x| x.div(t.var(w.mapv(|v| v + 3.0))).sum());
        check(x0.mapv(|v| v + 3.0), |t, x| t.var(w.clone()).div(x).sum());
        check(x0.clone(), |_, x| x.abs().scale(0.5).add_scalar(2.0).square().sum());
        check(x0.clone(), |_, x| x.relu().mul(x).sum());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random(&mut rng, 4, 6);
        let w = random(&mut rng, 6, 3);
        let bias = random(&mut rng, 1, 3);
        let col = random(&mut rng, 4, 1);
        check(x0.clone(), |t, x| {
            x.matmul(t.var(w.clone())).add_row(t.var(bias.clone())).softmax_rows().square().sum()
        });
        check(x0.clone(), |t, x| x.t().matmul(t.var(col.clone())).square().sum());
        check(x0.clone(), |t, x| x.mul_col(t.var(col.clone())).sum_rows().square().sum());
        check(x0.clone(), |_, x| x.sum_cols().square().sum());
        check(x0.clone(), |_, x| x.gather_rows(&[2, 0, 2]).square().sum());
        check(x0.clone(), |_, x| {
            let rows = x.gather_rows(&[1]).scale(3.0);
            x.scatter_rows(rows, &[3]).square().sum()
        });
        check(x0.clone(), |t, x| {
            let parts = [x.slice_cols(0, 2), x.slice_cols(2, 4).gelu()];
            t.concat_cols(&parts).square().sum()
        });
        check(x0.clone(), |t, x| {
            let parts = [x.gather_rows(&[0]), x];
            t.concat_rows(&parts).reshape(5 * 3, 2).square().sum()
        });
        check(x0.clone(), |_, x| x.layer_norm_rows().mul(x).sum());
        check(x0.clone(), |t, x| x.row_cosine(t.var(x0.mapv(|v| v * v + 0.1))).sum());
        check(x0.clone(), |_, x| {
            let m = x.max_all();
            x.div(m.broadcast(4, 6)).square().sum()
        });
        check(x0.clone(), |_, x| x.pick(&[(0, 1), (3, 5), (0, 1)]).square().sum());
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        let tape = Tape::new();
        let x = tape.var(array![[3.0]]);
        let y = x.mul(x).add(x);
        let g = tape.backward(y.sum());
        assert_eq!(g.wrt(x)[[0, 0]], 7.0);
    }

    #[test]
    fn zero_norm_cosine_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[0.0, 0.0], [1.0, 2.0]]);
        let b = tape.var(array![[1.0, 1.0], [2.0, 4.0]]);
        let c = a.row_cosine(b);
        let v = c.value();
        assert_eq!(v[[0, 0]], 0.0);
        assert!((v[[1, 0]] - 1.0).abs() < 1e-15);
        let g = tape.backward(c.sum());
        assert_eq!(g.wrt(a).row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(array![[1.0, 2.0]]);
        let unused = tape.var(array![[5.0]]);
        let g = tape.backward(x.sum());
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), array![[0.0]]);
    }
}
