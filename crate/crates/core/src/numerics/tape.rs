//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! Each op evaluates eagerly and appends a node; `backward` replays the tape
//! in reverse. Node ids are only valid on the tape that issued them.

use super::params::{ParamRef, ParamStore};
use super::tensor::{matmul_raw, Tensor};
use super::NumericsError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimension indexed by a slice/concat, or collapsed by a reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamRef>),
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Sum(usize, Option<Axis>),
    Mean(usize, Option<Axis>),
    SquaredL2(usize),
    Concat(Vec<usize>, Axis),
    Slice { src: usize, axis: Axis, start: usize },
    Transpose(usize),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SquaredL2(_) => "squared_l2",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// False for constants and everything computed only from constants.
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name(), node });
        }
        let grad = match &op {
            Op::Leaf(_) => true,
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.nodes[*a].grad || self.nodes[*b].grad,
            Op::Concat(parts, _) => parts.iter().any(|&p| self.nodes[p].grad),
            &Op::Scale(a, _)
            | &Op::Relu(a)
            | &Op::Tanh(a)
            | &Op::Sigmoid(a)
            | &Op::Softmax(a)
            | &Op::Sum(a, _)
            | &Op::Mean(a, _)
            | &Op::SquaredL2(a)
            | &Op::Slice { src: a, .. }
            | &Op::Transpose(a)
            | &Op::Reshape(a) => self.nodes[a].grad,
        };
        self.nodes.push(Node { value, op, grad });
        Ok(Var(node))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        self.nodes[v.0].value.dims2().ok_or_else(|| NumericsError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.nodes[v.0].value.shape().to_vec(),
            rhs: vec![],
        })
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    /// Non-trainable leaf whose gradient can still be read back.
    pub fn input(&mut self, value: Tensor) -> Var {
        let node = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf(None), grad: true });
        Var(node)
    }

    /// Leaf that never receives a gradient (data, one-hot tables, targets);
    /// backward skips work that only feeds constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let node = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf(None), grad: false });
        Var(node)
    }

    /// Leaf bound to parameter `index` of `store`; its gradient is reported
    /// by [`Gradients::for_store`].
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let node = self.nodes.len();
        self.nodes.push(Node {
            value: store.value(index).clone(),
            op: Op::Leaf(Some(ParamRef { store: store.tag(), index })),
            grad: true,
        });
        Var(node)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, n);
        self.push(Tensor::matrix(r, n, out)?, Op::Matmul(a.0, b.0))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, NumericsError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (ra, ca) = self.dims(a, op)?;
        let (rb, cb) = self.dims(b, op)?;
        let r = match (ra, rb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(self.mismatch(op, a, b)),
        };
        let c = match (ca, cb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(self.mismatch(op, a, b)),
        };
        Ok(vec![r, c])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, NumericsError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "subtract",
            Binary::Mul => "multiply",
        };
        let shape = self.broadcast_shape(name, a, b)?;
        let (ra, ca) = self.dims(a, name)?;
        let (rb, cb) = self.dims(b, name)?;
        let (r, c) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for j in 0..c {
                let x = av[ia * ca + if ca == 1 { 0 } else { j }];
                let y = bv[ib * cb + if cb == 1 { 0 } else { j }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let op = match kind {
            Binary::Add => Op::Add(a.0, b.0),
            Binary::Sub => Op::Sub(a.0, b.0),
            Binary::Mul => Op::Mul(a.0, b.0),
        };
        self.push(Tensor::new(shape, out)?, op)
    }

    /// Elementwise sum; a `1 x c` or `r x 1` operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, "softmax")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let shape = src.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a.0))
    }

    fn reduce(&self, a: Var, axis: Option<Axis>, op: &'static str) -> Result<Tensor, NumericsError> {
        let (r, c) = self.dims(a, op)?;
        let v = self.value(a).data();
        Ok(match axis {
            None => Tensor::scalar(v.iter().sum()),
            Some(Axis::Rows) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                Tensor::matrix(1, c, out)?
            }
            Some(Axis::Cols) => {
                let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
                Tensor::matrix(r, 1, out)?
            }
        })
    }

    /// Sum of all entries (`None`) or along one axis, keeping it as size 1.
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Result<Var, NumericsError> {
        let out = self.reduce(a, axis, "sum")?;
        self.push(out, Op::Sum(a.0, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, "mean")?;
        let count = match axis {
            None => r * c,
            Some(Axis::Rows) => r,
            Some(Axis::Cols) => c,
        } as f64;
        let out = self.reduce(a, axis, "mean")?.map(|v| v / count);
        self.push(out, Op::Mean(a.0, axis))
    }

    /// Sum of squared entries, as a `1 x 1` tensor.
    pub fn squared_l2(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).squared_norm());
        self.push(out, Op::SquaredL2(a.0))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyConcat)?;
        let (r0, c0) = self.dims(first, "concat")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p, "concat")?;
            match axis {
                Axis::Rows if c == c0 => total += r,
                Axis::Cols if r == r0 => total += c,
                _ => return Err(self.mismatch("concat", first, p)),
            }
        }
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(total, c0, data)?
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(r0, total, data)?
            }
        };
        self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect(), axis))
    }

    /// Half-open range `start..end` of rows or columns.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, "slice")?;
        let limit = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start >= end || end > limit {
            return Err(NumericsError::SliceBounds { node: self.nodes.len(), start, end, len: limit });
        }
        let src = self.value(a);
        let out = match axis {
            Axis::Rows => Tensor::matrix(end - start, c, src.data()[start * c..end * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&src.row_slice(i)[start..end]);
                }
                Tensor::matrix(r, end - start, data)?
            }
        };
        self.push(out, Op::Slice { src: a.0, axis, start })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.dims(a, "transpose")?;
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    /// Reinterprets the row-major data under a new matrix shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let node = self.nodes.len();
        let out = self.value(a).clone().reshaped(vec![rows, cols]).map_err(|_| NumericsError::ShapeMismatch {
            op: "reshape",
            node,
            lhs: self.value(a).shape().to_vec(),
            rhs: vec![rows, cols],
        })?;
        self.push(out, Op::Reshape(a.0))
    }

    /// Gradients of `output`, contracted with `seed`, for every node.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients, NumericsError> {
        self.backward_multi(vec![(output, seed)])
    }

    /// Backward pass with several seeded outputs; their contributions add.
    pub fn backward_multi(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, NumericsError> {
        if seeds.is_empty() {
            return Err(NumericsError::EmptyBackward);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, seed) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(NumericsError::NotRecorded(v.0));
            }
            if seed.len() != self.nodes[v.0].value.len() {
                return Err(NumericsError::SeedShape {
                    node: v.0,
                    expected: self.nodes[v.0].value.shape().to_vec(),
                    got: seed.shape().to_vec(),
                });
            }
            let seed = seed.reshaped(self.nodes[v.0].value.shape().to_vec())?;
            accumulate(&mut grads[v.0], seed);
            last = last.max(v.0);
        }

        for idx in (0..=last).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf(Some(p)) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(
        &self,
        grads: &mut [Option<Tensor>],
        target: usize,
        grad: impl FnOnce() -> Result<Tensor, NumericsError>,
    ) -> Result<(), NumericsError> {
        if self.nodes[target].grad {
            accumulate(&mut grads[target], grad()?);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            &Op::Matmul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (r, k) = av.dims2().unwrap();
                let (_, n) = bv.dims2().unwrap();
                // dA = G B^T, dB = A^T G
                self.acc(grads, a, || Tensor::new(av.shape().to_vec(), matmul_raw(g.data(), bv.transpose().data(), r, n, k)))?;
                self.acc(grads, b, || Tensor::new(bv.shape().to_vec(), matmul_raw(av.transpose().data(), g.data(), k, r, n)))?;
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, || unbroadcast(g, &self.nodes[a].value))?;
                self.acc(grads, b, || unbroadcast(g, &self.nodes[b].value))?;
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, || unbroadcast(g, &self.nodes[a].value))?;
                self.acc(grads, b, || unbroadcast(&g.map(|v| -v), &self.nodes[b].value))?;
            }
            &Op::Mul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                self.acc(grads, a, || unbroadcast(&elementwise_broadcast(g, bv, |x, y| x * y), av))?;
                self.acc(grads, b, || unbroadcast(&elementwise_broadcast(g, av, |x, y| x * y), bv))?;
            }
            &Op::Scale(a, f) => self.acc(grads, a, || Ok(g.map(|v| v * f)))?,
            &Op::Relu(a) => {
                let x = &self.nodes[a].value;
                self.acc(grads, a, || Ok(zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })))?;
            }
            &Op::Tanh(a) => self.acc(grads, a, || Ok(zip_map(g, out, |gv, y| gv * (1.0 - y * y))))?,
            &Op::Sigmoid(a) => self.acc(grads, a, || Ok(zip_map(g, out, |gv, y| gv * y * (1.0 - y))))?,
            &Op::Softmax(a) => {
                let (r, c) = out.dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.acc(grads, a, || Tensor::new(out.shape().to_vec(), dx))?;
            }
            &Op::Sum(a, axis) | &Op::Mean(a, axis) => {
                let x = &self.nodes[a].value;
                let (r, c) = x.dims2().unwrap();
                let count = match (&node.op, axis) {
                    (Op::Sum(..), _) => 1.0,
                    (_, None) => (r * c) as f64,
                    (_, Some(Axis::Rows)) => r as f64,
                    (_, Some(Axis::Cols)) => c as f64,
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            None => g.data()[0],
                            Some(Axis::Rows) => g.data()[j],
                            Some(Axis::Cols) => g.data()[i],
                        };
                        dx[i * c + j] = gv / count;
                    }
                }
                self.acc(grads, a, || Tensor::new(x.shape().to_vec(), dx))?;
            }
            &Op::SquaredL2(a) => {
                let s = 2.0 * g.data()[0];
                self.acc(grads, a, || Ok(self.nodes[a].value.map(|v| s * v)))?;
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                let (_, total_c) = g.dims2().unwrap();
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let (r, c) = pv.dims2().unwrap();
                    let piece = match axis {
                        Axis::Rows => {
                            let d = g.data()[offset * c..(offset + r) * c].to_vec();
                            offset += r;
                            d
                        }
                        Axis::Cols => {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * total_c + offset..i * total_c + offset + c]);
                            }
                            offset += c;
                            d
                        }
                    };
                    self.acc(grads, p, || Tensor::new(pv.shape().to_vec(), piece))?;
                }
            }
            &Op::Slice { src, axis, start } => {
                let sv = &self.nodes[src].value;
                let (r, c) = sv.dims2().unwrap();
                let (gr, gc) = g.dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => dx[start * c..(start + gr) * c].copy_from_slice(g.data()),
                    Axis::Cols => {
                        for i in 0..r {
                            dx[i * c + start..i * c + start + gc].copy_from_slice(g.row_slice(i));
                        }
                    }
                }
                self.acc(grads, src, || Tensor::new(sv.shape().to_vec(), dx))?;
            }
            &Op::Transpose(a) => {
                let gt = g.transpose().reshaped(self.nodes[a].value.shape().to_vec())?;
                self.acc(grads, a, || Ok(gt))?;
            }
            &Op::Reshape(a) => {
                let gr = g.clone().reshaped(self.nodes[a].value.shape().to_vec())?;
                self.acc(grads, a, || Ok(gr))?;
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

/// `f(g, other)` with `other` broadcast to `g`'s shape.
fn elementwise_broadcast(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = g.dims2().unwrap();
    let (ro, co) = other.dims2().unwrap();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let io = if ro == 1 { 0 } else { i };
        for j in 0..c {
            let jo = if co == 1 { 0 } else { j };
            out.push(f(g.data()[i * c + j], other.data()[io * co + jo]));
        }
    }
    Tensor::new(g.shape().to_vec(), out).expect("same length")
}

/// Sums `g` over the dimensions along which `target` was broadcast.
fn unbroadcast(g: &Tensor, target: &Tensor) -> Result<Tensor, NumericsError> {
    if g.shape() == target.shape() {
        return Ok(g.clone());
    }
    let (r, c) = g.dims2().unwrap();
    let (rt, ct) = target.dims2().unwrap();
    let mut out = vec![0.0; rt * ct];
    for i in 0..r {
        let it = if rt == 1 { 0 } else { i };
        for j in 0..c {
            let jt = if ct == 1 { 0 } else { j };
            out[it * ct + jt] += g.data()[i * c + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out)
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamRef)>,
}

impl Gradients {
    /// Gradient at `v`, or `None` when `v` does not influence the seeds.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, zero-filled when unreached.
    pub fn wrt_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// One gradient per parameter of `store`, summed over every leaf that
    /// used it; unused parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..store.len()).map(|i| Tensor::zeros(store.value(i).shape())).collect();
        for &(node, p) in &self.params {
            if p.store != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                for (a, b) in out[p.index].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        out
    }
}
