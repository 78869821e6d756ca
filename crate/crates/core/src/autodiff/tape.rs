//! Wengert tape over batched dense matrices.
//!
//! Every value on the tape is a `rows x cols` matrix where rows index the batch.
//! Nodes are evaluated eagerly as they are recorded, so a tape built in one
//! pass can immediately be differentiated. A recorded tape can also be
//! replayed with new inputs or parameter values via [`Tape::forward`], which is
//! what the finite-difference checks rely on.

use ndarray::{concatenate, s, Array2, Axis, Zip};
use thiserror::Error;

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tape values are stale; call forward() before backward()")]
    NotEvaluated,
    #[error("node {0} is not an input node")]
    NotAnInput(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the core primitive set.
///
/// `backward` returns one optional gradient per input, each shaped like the
/// corresponding input. `None` means the op does not propagate into that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Mat]) -> Mat;
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Input,
    Param(ParamId),
    /// `x · w + b` with `w` laid out `in x out` and `b` a single row.
    Affine { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// Multiply column `j` by the constant `row[j]`.
    MulColumns { x: Var, row: Vec<f64> },
    BroadcastRows { x: Var, rows: usize },
    Gather { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    Sum(Var),
    Mean(Var),
    /// Mean over rows of the squared row norm of `a - b`.
    Mse(Var, Var),
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LeakyRelu { x, .. }
            | Op::MulColumns { x, .. }
            | Op::BroadcastRows { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::Sin(x)
            | Op::Cos(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn scalar(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
}

/// Single-owner computation record. Not shareable across threads.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Mat>,
    adjoints: Vec<Option<Mat>>,
    stale: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    /// Adjoint of `v` from the last backward pass, if any gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Smallest |input| over all leaky-rectifier nodes (infinity if none).
    pub fn kink_margin(&self) -> f64 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::LeakyRelu { x, .. } => Some(self.values[x.0].fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var, TapeError> {
        if let Some(bad) = op.inputs().into_iter().find(|v| v.0 >= self.ops.len()) {
            return Err(TapeError::Shape {
                op: "record",
                detail: format!("input node {} is not on this tape", bad.0),
            });
        }
        let value = self.eval(&op, None)?;
        Ok(self.push(op, value))
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.input(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var, TapeError> {
        let id = store
            .id(name)
            .ok_or_else(|| TapeError::UnknownParam(name.to_string()))?;
        Ok(self.param(store, id))
    }

    /// Replace the value of an input leaf. Marks the tape stale until the
    /// next [`Tape::forward`].
    pub fn set_input(&mut self, v: Var, value: Mat) -> Result<(), TapeError> {
        match self.ops.get(v.0) {
            Some(Op::Input) => {
                self.values[v.0] = value;
                self.stale = true;
                Ok(())
            }
            _ => Err(TapeError::NotAnInput(v.0)),
        }
    }

    // ── Primitive ops ───────────────────────────────────────────────────

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TapeError> {
        self.record(Op::Affine { x, w, b })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.record(Op::LeakyRelu { x, slope }).expect("unary op")
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.record(Op::Sin(x)).expect("unary op")
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.record(Op::Cos(x)).expect("unary op")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.record(Op::Tanh(x)).expect("unary op")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.record(Op::Exp(x)).expect("unary op")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::Sigmoid(x)).expect("unary op")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.record(Op::Softplus(x)).expect("unary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.record(Op::Scale(x, c)).expect("unary op")
    }

    pub fn mul_columns(&mut self, x: Var, row: Vec<f64>) -> Result<Var, TapeError> {
        self.record(Op::MulColumns { x, row })
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, TapeError> {
        self.record(Op::BroadcastRows { x, rows })
    }

    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var, TapeError> {
        self.record(Op::Gather { x, index })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        self.record(Op::SliceCols { x, start, len })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        self.record(Op::SliceRows { x, start, len })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x)).expect("reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.record(Op::Mean(x)).expect("reduction")
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Op::Mse(a, b))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        self.record(Op::Custom {
            op,
            inputs: inputs.to_vec(),
        })
        .expect("custom ops validate their own inputs")
    }

    // ── Evaluation ──────────────────────────────────────────────────────

    fn eval(&self, op: &Op, store: Option<&ParamStore>) -> Result<Mat, TapeError> {
        let val = |v: &Var| &self.values[v.0];
        let same = |name: &'static str, a: &Mat, b: &Mat| -> Result<(), TapeError> {
            if a.dim() != b.dim() {
                return Err(TapeError::Shape {
                    op: name,
                    detail: format!("{:?} vs {:?}", a.dim(), b.dim()),
                });
            }
            Ok(())
        };
        Ok(match op {
            Op::Input => unreachable!("leaves are not re-evaluated"),
            Op::Param(id) => store.expect("param replay needs a store").value(*id).clone(),
            Op::Affine { x, w, b } => {
                let (x, w) = (val(x), val(w));
                if x.ncols() != w.nrows() {
                    return Err(TapeError::Shape {
                        op: "affine",
                        detail: format!("input {:?} weight {:?}", x.dim(), w.dim()),
                    });
                }
                let mut y = x.dot(w);
                if let Some(b) = b {
                    let b = val(b);
                    if b.dim() != (1, w.ncols()) {
                        return Err(TapeError::Shape {
                            op: "affine",
                            detail: format!("bias {:?} for {} outputs", b.dim(), w.ncols()),
                        });
                    }
                    y += b;
                }
                y
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                val(x).mapv(|v| if v > 0.0 { v } else { s * v })
            }
            Op::Sin(x) => val(x).mapv(f64::sin),
            Op::Cos(x) => val(x).mapv(f64::cos),
            Op::Tanh(x) => val(x).mapv(f64::tanh),
            Op::Exp(x) => val(x).mapv(f64::exp),
            Op::Sigmoid(x) => val(x).mapv(sigmoid),
            Op::Softplus(x) => val(x).mapv(softplus),
            Op::Add(a, b) => {
                same("add", val(a), val(b))?;
                val(a) + val(b)
            }
            Op::Sub(a, b) => {
                same("sub", val(a), val(b))?;
                val(a) - val(b)
            }
            Op::Mul(a, b) => {
                same("mul", val(a), val(b))?;
                val(a) * val(b)
            }
            Op::Div(a, b) => {
                same("div", val(a), val(b))?;
                val(a) / val(b)
            }
            Op::Scale(x, c) => val(x) * *c,
            Op::MulColumns { x, row } => {
                let x = val(x);
                if x.ncols() != row.len() {
                    return Err(TapeError::Shape {
                        op: "mul_columns",
                        detail: format!("{} columns vs {} weights", x.ncols(), row.len()),
                    });
                }
                let mut y = x.clone();
                for (mut col, w) in y.columns_mut().into_iter().zip(row) {
                    col *= *w;
                }
                y
            }
            Op::BroadcastRows { x, rows } => {
                let x = val(x);
                if x.nrows() != 1 {
                    return Err(TapeError::Shape {
                        op: "broadcast_rows",
                        detail: format!("expected a single row, got {:?}", x.dim()),
                    });
                }
                x.broadcast((*rows, x.ncols())).unwrap().to_owned()
            }
            Op::Gather { x, index } => {
                let x = val(x);
                if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
                    return Err(TapeError::Shape {
                        op: "gather",
                        detail: format!("row {bad} out of {}", x.nrows()),
                    });
                }
                x.select(Axis(0), index)
            }
            Op::ConcatCols(parts) => {
                let views: Vec<_> = parts.iter().map(|p| val(p).view()).collect();
                concatenate(Axis(1), &views).map_err(|e| TapeError::Shape {
                    op: "concat_cols",
                    detail: e.to_string(),
                })?
            }
            Op::ConcatRows(parts) => {
                let views: Vec<_> = parts.iter().map(|p| val(p).view()).collect();
                concatenate(Axis(0), &views).map_err(|e| TapeError::Shape {
                    op: "concat_rows",
                    detail: e.to_string(),
                })?
            }
            Op::SliceCols { x, start, len } => {
                let x = val(x);
                if start + len > x.ncols() {
                    return Err(TapeError::Shape {
                        op: "slice_cols",
                        detail: format!("{}..{} of {}", start, start + len, x.ncols()),
                    });
                }
                x.slice(s![.., *start..start + len]).to_owned()
            }
            Op::SliceRows { x, start, len } => {
                let x = val(x);
                if start + len > x.nrows() {
                    return Err(TapeError::Shape {
                        op: "slice_rows",
                        detail: format!("{}..{} of {}", start, start + len, x.nrows()),
                    });
                }
                x.slice(s![*start..start + len, ..]).to_owned()
            }
            Op::Sum(x) => scalar(val(x).sum()),
            Op::Mean(x) => scalar(val(x).mean().unwrap_or(0.0)),
            Op::Mse(a, b) => {
                let (a, b) = (val(a), val(b));
                same("mse", a, b)?;
                let rows = a.nrows().max(1) as f64;
                let mut acc = 0.0;
                Zip::from(a).and(b).for_each(|&p, &q| acc += (p - q) * (p - q));
                scalar(acc / rows)
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Mat> = inputs.iter().map(val).collect();
                op.forward(&ins)
            }
        })
    }

    /// Re-evaluate every non-input node in recording order, re-reading
    /// parameter leaves from `store`.
    pub fn forward(&mut self, store: &ParamStore) -> Result<(), TapeError> {
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Input) {
                continue;
            }
            let v = self.eval(&self.ops[i], Some(store))?;
            self.values[i] = v;
        }
        self.stale = false;
        Ok(())
    }

    /// Propagate `seed` (shaped like `root`) backwards. Parameter gradients are
    /// added into `store`; node adjoints stay readable through [`Tape::grad`].
    pub fn backward(&mut self, root: Var, seed: &Mat, store: &mut ParamStore) -> Result<(), TapeError> {
        if self.stale {
            return Err(TapeError::NotEvaluated);
        }
        if seed.dim() != self.values[root.0].dim() {
            return Err(TapeError::Shape {
                op: "backward",
                detail: format!("seed {:?} vs root {:?}", seed.dim(), self.values[root.0].dim()),
            });
        }
        let mut adj: Vec<Option<Mat>> = (0..self.ops.len()).map(|_| None).collect();
        adj[root.0] = Some(seed.clone());

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let val = |v: &Var| &self.values[v.0];
            let out = &self.values[i];
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Affine { x, w, b } => {
                    acc(&mut adj, *x, g.dot(&val(w).t()));
                    acc(&mut adj, *w, val(x).t().dot(&g));
                    if let Some(b) = b {
                        acc(&mut adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(val(x)).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(&mut adj, *x, gx);
                }
                Op::Sin(x) => acc(&mut adj, *x, &g * &val(x).mapv(f64::cos)),
                Op::Cos(x) => acc(&mut adj, *x, -(&g * &val(x).mapv(f64::sin))),
                Op::Tanh(x) => acc(&mut adj, *x, &g * &out.mapv(|y| 1.0 - y * y)),
                Op::Exp(x) => acc(&mut adj, *x, &g * out),
                Op::Sigmoid(x) => acc(&mut adj, *x, &g * &out.mapv(|y| y * (1.0 - y))),
                Op::Softplus(x) => acc(&mut adj, *x, &g * &val(x).mapv(sigmoid)),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut adj, *a, &g * val(b));
                    acc(&mut adj, *b, &g * val(a));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    acc(&mut adj, *a, &g / bv);
                    acc(&mut adj, *b, -(&g * av / &(bv * bv)));
                }
                Op::Scale(x, c) => acc(&mut adj, *x, &g * *c),
                Op::MulColumns { x, row } => {
                    let mut gx = g.clone();
                    for (mut col, w) in gx.columns_mut().into_iter().zip(row) {
                        col *= *w;
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::BroadcastRows { x, .. } => {
                    acc(&mut adj, *x, g.sum_axis(Axis(0)).insert_axis(Axis(0)))
                }
                Op::Gather { x, index } => {
                    let mut gx = Mat::zeros(val(x).dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(p).ncols();
                        acc(&mut adj, *p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(p).nrows();
                        acc(&mut adj, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Mat::zeros(val(x).dim());
                    gx.slice_mut(s![.., *start..start + len]).assign(&g);
                    acc(&mut adj, *x, gx);
                }
                Op::SliceRows { x, start, len } => {
                    let mut gx = Mat::zeros(val(x).dim());
                    gx.slice_mut(s![*start..start + len, ..]).assign(&g);
                    acc(&mut adj, *x, gx);
                }
                Op::Sum(x) => acc(&mut adj, *x, Mat::from_elem(val(x).dim(), g[[0, 0]])),
                Op::Mean(x) => {
                    let n = val(x).len().max(1) as f64;
                    acc(&mut adj, *x, Mat::from_elem(val(x).dim(), g[[0, 0]] / n))
                }
                Op::Mse(a, b) => {
                    let rows = val(a).nrows().max(1) as f64;
                    let d = (val(a) - val(b)) * (2.0 * g[[0, 0]] / rows);
                    acc(&mut adj, *b, -&d);
                    acc(&mut adj, *a, d);
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&Mat> = inputs.iter().map(val).collect();
                    let grads = op.backward(&ins, out, &g);
                    for (v, gi) in inputs.iter().zip(grads) {
                        if let Some(gi) = gi {
                            acc(&mut adj, *v, gi);
                        }
                    }
                }
            }
            adj[i] = Some(g);
        }
        self.adjoints = adj;
        Ok(())
    }
}
