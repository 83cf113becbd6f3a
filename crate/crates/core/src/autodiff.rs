//! Reverse-mode automatic differentiation over a dynamic graph.
//!
//! Every value lives in a [`Graph`] arena as a dense 2-D `f64` tensor
//! (scalars are `1 x 1`). Backward rules are themselves written in terms of
//! graph primitives, so a gradient computed with `differentiable = true` is an
//! ordinary node that can be differentiated again. That is what makes the
//! input-gradient penalties in [`crate::trainer`] trainable.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Margin kept from the arccos endpoints by [`Graph::safe_acos`].
pub const ACOS_MARGIN: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift(f64),
    MatMul,
    Transpose,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Arccos,
    Atan2,
    Clamp { lo: f64, hi: f64 },
    /// Sum of every entry, `1 x 1` result.
    SumAll,
    /// Per-row sum, `r x 1` result.
    SumRows,
    /// Per-column sum, `1 x c` result.
    SumCols,
    /// Replicate a `1 x 1`, `1 x c` or `r x 1` tensor up to `rows x cols`.
    Broadcast { rows: usize, cols: usize },
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::Atan2 => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Arccos => "arccos",
            Primitive::Atan2 => "atan2",
            Primitive::Clamp { .. } => "clamp",
            Primitive::SumAll => "sum",
            Primitive::SumRows => "sum_rows",
            Primitive::SumCols => "sum_cols",
            Primitive::Broadcast { .. } => "broadcast",
        }
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Leaf,
    Constant,
    Op(Primitive, [Var; 2]),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
}

/// Append-only arena of recorded values. Single-threaded; build one per thread.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dim(),
            rhs: b.dim(),
        });
    }
    Ok(())
}

fn forward(prim: Primitive, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let name = prim.name();
    let value = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::Atan2 => {
            let b = b.expect("binary primitive");
            same_shape(name, a, b)?;
            match prim {
                Primitive::Add => a + b,
                Primitive::Sub => a - b,
                Primitive::Mul => a * b,
                Primitive::Div => a / b,
                _ => {
                    let mut out = a.clone();
                    out.zip_mut_with(b, |y, &x| *y = y.atan2(x));
                    out
                }
            }
        }
        Primitive::MatMul => {
            let b = b.expect("binary primitive");
            if a.ncols() != b.nrows() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.dim(),
                    rhs: b.dim(),
                });
            }
            a.dot(b)
        }
        Primitive::Neg => a.mapv(|v| -v),
        Primitive::Scale(c) => a.mapv(|v| v * c),
        Primitive::Shift(c) => a.mapv(|v| v + c),
        Primitive::Transpose => a.t().to_owned(),
        Primitive::Tanh => a.mapv(f64::tanh),
        Primitive::Sigmoid => a.mapv(stable_sigmoid),
        Primitive::Softplus => a.mapv(stable_softplus),
        Primitive::Exp => a.mapv(f64::exp),
        Primitive::Log => a.mapv(f64::ln),
        Primitive::Sqrt => a.mapv(f64::sqrt),
        Primitive::Arccos => {
            if a.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Domain { op: name });
            }
            a.mapv(f64::acos)
        }
        Primitive::Clamp { lo, hi } => {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "clamp bounds lo={lo} > hi={hi}"
                )));
            }
            a.mapv(|v| v.clamp(lo, hi))
        }
        Primitive::SumAll => Array2::from_elem((1, 1), a.sum()),
        Primitive::SumRows => a.sum_axis(Axis(1)).insert_axis(Axis(1)),
        Primitive::SumCols => a.sum_axis(Axis(0)).insert_axis(Axis(0)),
        Primitive::Broadcast { rows, cols } => {
            let (r, c) = a.dim();
            let ok = (r == rows || r == 1) && (c == cols || c == 1);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: (r, c),
                    rhs: (rows, cols),
                });
            }
            a.broadcast((rows, cols))
                .expect("checked broadcast")
                .to_owned()
        }
    };
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: name });
    }
    Ok(value)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, origin: Origin) -> Var {
        self.nodes.push(Node { value, origin });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(value: &Tensor, op: &'static str) -> Result<()> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        Self::check_finite(&value, "leaf")?;
        Ok(self.push(value, Origin::Leaf))
    }

    /// A value treated as fixed by [`Graph::gradient`].
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        Self::check_finite(&value, "constant")?;
        Ok(self.push(value, Origin::Constant))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shortcut for the single entry of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Record one primitive applied to `operands`.
    pub fn record(&mut self, prim: Primitive, operands: &[Var]) -> Result<Var> {
        if operands.len() != prim.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} operands, got {}",
                prim.name(),
                prim.arity(),
                operands.len()
            )));
        }
        let a = operands[0];
        let b = operands.get(1).copied();
        let value = forward(prim, self.value(a), b.map(|b| self.value(b)))?;
        Ok(self.push(value, Origin::Op(prim, [a, b.unwrap_or(a)])))
    }

    fn unary(&mut self, prim: Primitive, a: Var) -> Result<Var> {
        self.record(prim, &[a])
    }

    /// Binary elementwise op, broadcasting the smaller operand when needed.
    fn binary(&mut self, prim: Primitive, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return self.record(prim, &[a, b]);
        }
        let fits = |from: (usize, usize), to: (usize, usize)| {
            (from.0 == to.0 || from.0 == 1) && (from.1 == to.1 || from.1 == 1)
        };
        if fits(sb, sa) {
            let b = self.broadcast_to(b, sa)?;
            self.record(prim, &[a, b])
        } else if fits(sa, sb) {
            let a = self.broadcast_to(a, sb)?;
            self.record(prim, &[a, b])
        } else {
            Err(Error::ShapeMismatch {
                op: prim.name(),
                lhs: sa,
                rhs: sb,
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Primitive::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Primitive::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Primitive::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Primitive::Div, a, b)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(Primitive::Atan2, y, x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Primitive::Scale(c), a)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Primitive::Shift(c), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Transpose, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Sqrt, a)
    }

    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Arccos, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Primitive::Clamp { lo, hi }, a)
    }

    /// arccos with its argument clamped to `[-1 + 1e-7, 1 - 1e-7]` so the
    /// derivative stays finite when rounding pushes a cosine onto an endpoint.
    pub fn safe_acos(&mut self, a: Var) -> Result<Var> {
        let c = self.clamp(a, -1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN)?;
        self.acos(c)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::SumAll, a)
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::SumRows, a)
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::SumCols, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn broadcast_to(&mut self, a: Var, to: (usize, usize)) -> Result<Var> {
        if self.shape(a) == to {
            return Ok(a);
        }
        self.unary(
            Primitive::Broadcast {
                rows: to.0,
                cols: to.1,
            },
            a,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.record(Primitive::Mul, &[a, b])?;
        self.sum(p)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.record(Primitive::Mul, &[a, a])?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Row-wise inner products of two equally shaped matrices, `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.record(Primitive::Mul, &[a, b])?;
        self.sum_rows(p)
    }

    /// Row-wise log-softmax. The per-row max is subtracted as a constant,
    /// which leaves every derivative unchanged.
    pub fn log_softmax_rows(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        let max = zv
            .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .insert_axis(Axis(1));
        let m = self.constant(max)?;
        let shifted = self.sub(z, m)?;
        let e = self.exp(shifted)?;
        let s = self.sum_rows(e)?;
        let lse = self.ln(s)?;
        self.sub(shifted, lse)
    }

    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        let ls = self.log_softmax_rows(z)?;
        self.exp(ls)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        let onehot = one_hot(labels, rows, cols)?;
        let ls = self.log_softmax_rows(logits)?;
        let mask = self.constant(onehot)?;
        let picked = self.record(Primitive::Mul, &[ls, mask])?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / rows as f64)
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// With `differentiable = true` the backward pass stays on the graph and
    /// the returned nodes can be differentiated again. Otherwise the backward
    /// nodes are discarded and the results come back as constants.
    pub fn gradient(&mut self, root: Var, wrt: &[Var], differentiable: bool) -> Result<Vec<Var>> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let n = root.0 + 1;

        let mut ancestor = vec![false; n];
        ancestor[root.0] = true;
        for i in (0..n).rev() {
            if !ancestor[i] {
                continue;
            }
            if let Origin::Op(prim, ops) = &self.nodes[i].origin {
                for op in &ops[..prim.arity()] {
                    ancestor[op.0] = true;
                }
            }
        }
        for w in wrt {
            if w.0 >= n || !ancestor[w.0] {
                return Err(Error::Unreachable(w.0));
            }
        }

        // Only nodes downstream of a target need a backward rule.
        let mut leads = vec![false; n];
        for w in wrt {
            leads[w.0] = true;
        }
        for i in 0..n {
            if let Origin::Op(prim, ops) = &self.nodes[i].origin {
                if ops[..prim.arity()].iter().any(|o| leads[o.0]) {
                    leads[i] = true;
                }
            }
        }

        let mark = self.nodes.len();
        let result = self.backward(root, wrt, &leads);
        let grads = match result {
            Ok(g) => g,
            Err(e) => {
                self.nodes.truncate(mark);
                return Err(e);
            }
        };
        if differentiable {
            return Ok(grads);
        }
        let values: Vec<Tensor> = grads.iter().map(|g| self.value(*g).clone()).collect();
        self.nodes.truncate(mark);
        values.into_iter().map(|v| self.constant(v)).collect()
    }

    fn backward(&mut self, root: Var, wrt: &[Var], leads: &[bool]) -> Result<Vec<Var>> {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[root.0] = Some(self.constant(Array2::ones((1, 1)))?);
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !leads[i] {
                continue;
            }
            let Origin::Op(prim, ops) = self.nodes[i].origin.clone() else {
                continue;
            };
            let wanted = [leads[ops[0].0], prim.arity() == 2 && leads[ops[1].0]];
            let contribs = self.vjp(Var(i), prim, ops, g, wanted)?;
            for (k, c) in contribs.into_iter().enumerate() {
                let Some(c) = c else { continue };
                let p = ops[k].0;
                grads[p] = Some(match grads[p] {
                    Some(prev) => self.record(Primitive::Add, &[prev, c])?,
                    None => c,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads[w.0] {
                Some(g) => out.push(g),
                None => {
                    let z = Array2::zeros(self.shape(*w));
                    out.push(self.constant(z)?);
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of node `y = prim(a, b)` with upstream `g`,
    /// expressed in graph primitives.
    fn vjp(
        &mut self,
        y: Var,
        prim: Primitive,
        ops: [Var; 2],
        g: Var,
        wanted: [bool; 2],
    ) -> Result<[Option<Var>; 2]> {
        let [a, b] = ops;
        let mut out = [None, None];
        match prim {
            Primitive::Add => {
                out = [Some(g), Some(g)];
            }
            Primitive::Sub => {
                out[0] = Some(g);
                if wanted[1] {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Primitive::Mul => {
                if wanted[0] {
                    out[0] = Some(self.record(Primitive::Mul, &[g, b])?);
                }
                if wanted[1] {
                    out[1] = Some(self.record(Primitive::Mul, &[g, a])?);
                }
            }
            Primitive::Div => {
                if wanted[0] {
                    out[0] = Some(self.record(Primitive::Div, &[g, b])?);
                }
                if wanted[1] {
                    // d(a/b)/db = -(a/b)/b
                    let gy = self.record(Primitive::Mul, &[g, y])?;
                    let q = self.record(Primitive::Div, &[gy, b])?;
                    out[1] = Some(self.neg(q)?);
                }
            }
            Primitive::Neg => out[0] = Some(self.neg(g)?),
            Primitive::Scale(c) => out[0] = Some(self.scale(g, c)?),
            Primitive::Shift(_) => out[0] = Some(g),
            Primitive::MatMul => {
                if wanted[0] {
                    let bt = self.transpose(b)?;
                    out[0] = Some(self.matmul(g, bt)?);
                }
                if wanted[1] {
                    let at = self.transpose(a)?;
                    out[1] = Some(self.matmul(at, g)?);
                }
            }
            Primitive::Transpose => out[0] = Some(self.transpose(g)?),
            Primitive::Tanh => {
                let yy = self.record(Primitive::Mul, &[y, y])?;
                let d = self.affine(yy, -1.0, 1.0)?;
                out[0] = Some(self.record(Primitive::Mul, &[g, d])?);
            }
            Primitive::Sigmoid => {
                let one_minus = self.affine(y, -1.0, 1.0)?;
                let d = self.record(Primitive::Mul, &[y, one_minus])?;
                out[0] = Some(self.record(Primitive::Mul, &[g, d])?);
            }
            Primitive::Softplus => {
                let s = self.sigmoid(a)?;
                out[0] = Some(self.record(Primitive::Mul, &[g, s])?);
            }
            Primitive::Exp => out[0] = Some(self.record(Primitive::Mul, &[g, y])?),
            Primitive::Log => out[0] = Some(self.record(Primitive::Div, &[g, a])?),
            Primitive::Sqrt => {
                let q = self.record(Primitive::Div, &[g, y])?;
                out[0] = Some(self.scale(q, 0.5)?);
            }
            Primitive::Arccos => {
                let aa = self.record(Primitive::Mul, &[a, a])?;
                let one_minus = self.affine(aa, -1.0, 1.0)?;
                let s = self.sqrt(one_minus)?;
                let q = self.record(Primitive::Div, &[g, s])?;
                out[0] = Some(self.neg(q)?);
            }
            Primitive::Atan2 => {
                // y = atan2(a, b): dy/da = b / r2, dy/db = -a / r2
                let aa = self.record(Primitive::Mul, &[a, a])?;
                let bb = self.record(Primitive::Mul, &[b, b])?;
                let r2 = self.record(Primitive::Add, &[aa, bb])?;
                let g_r2 = self.record(Primitive::Div, &[g, r2])?;
                if wanted[0] {
                    out[0] = Some(self.record(Primitive::Mul, &[g_r2, b])?);
                }
                if wanted[1] {
                    let t = self.record(Primitive::Mul, &[g_r2, a])?;
                    out[1] = Some(self.neg(t)?);
                }
            }
            Primitive::Clamp { lo, hi } => {
                let mask = self
                    .value(a)
                    .mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                out[0] = Some(self.record(Primitive::Mul, &[g, m])?);
            }
            Primitive::SumAll | Primitive::SumRows | Primitive::SumCols => {
                let to = self.shape(a);
                out[0] = Some(self.broadcast_to(g, to)?);
            }
            Primitive::Broadcast { rows, cols } => {
                let (r, c) = self.shape(a);
                let mut acc = g;
                if r == 1 && rows != 1 {
                    acc = self.sum_cols(acc)?;
                }
                if c == 1 && cols != 1 {
                    acc = self.sum_rows(acc)?;
                }
                out[0] = Some(acc);
            }
        }
        if !wanted[0] {
            out[0] = None;
        }
        if !wanted[1] || prim.arity() == 1 {
            out[1] = None;
        }
        Ok(out)
    }

    /// `c * a + d`, two recorded primitives.
    fn affine(&mut self, a: Var, c: f64, d: f64) -> Result<Var> {
        let s = self.scale(a, c)?;
        self.shift(s, d)
    }
}

pub fn one_hot(labels: &[usize], rows: usize, classes: usize) -> Result<Tensor> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: labels.len(),
        });
    }
    let mut t = Array2::zeros((rows, classes));
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::BadLabel { label: y, classes });
        }
        t[[r, y]] = 1.0;
    }
    Ok(t)
}
