//! Reverse-mode tape over dense tensors.
//!
//! Every forward op appends one node holding its value and a tagged record
//! of its inputs. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.

use crate::boxes::{log_softplus, log_softplus_grad, sigmoid, softplus};
use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    MaxAll(Var, usize),
    SumAxis(Var, usize),
    Softplus(Var),
    LogSoftplus(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    ClampMax(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    GatherRows(Var, Vec<usize>),
    /// `picks[g][j]` is the source row chosen for column `j` of group `g`
    /// (empty for an empty group).
    SegmentMax {
        input: Var,
        groups: Vec<Vec<usize>>,
        picks: Vec<Vec<usize>>,
    },
    NormRows(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the
    /// root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().contains(&0.0) {
            return Err(Error::data("reciprocal of zero"));
        }
        Ok(self.unary(a, |x| 1.0 / x, Op::Recip(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", self.shape(a))));
        }
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::MeanAll(a), &[a])
    }

    /// Maximum over all entries; ties resolve to the lowest index.
    pub fn max(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let mut best = 0;
        for (i, &x) in data.iter().enumerate() {
            if x > data[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(data[best]);
        self.push(value, Op::MaxAll(a, best), &[a])
    }

    /// Sums a 2-D tensor over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::shape(format!("sum_axis({axis}) of {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let value = if axis == 1 {
            Tensor::vector((0..r).map(|i| t.row(i).iter().sum()).collect())
        } else {
            Tensor::vector((0..c).map(|j| (0..r).map(|i| t.get(i, j)).sum()).collect())
        };
        Ok(self.push(value, Op::SumAxis(a, axis), &[a]))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `ln(softplus(x))`, stable for very negative inputs.
    pub fn log_softplus(&mut self, a: Var) -> Var {
        self.unary(a, log_softplus, Op::LogSoftplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::data(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if y > x { y } else { x });
        Ok(self.push(value, Op::Maximum(a, b), &[a, b]))
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if y < x { y } else { x });
        Ok(self.push(value, Op::Minimum(a, b), &[a, b]))
    }

    /// `min(x, k)`; entries above `k` receive no gradient.
    pub fn clamp_max(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x.min(k), Op::ClampMax(a, k))
    }

    /// Concatenates 1-D tensors, or 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let rank = self.shape(*first).len();
        if rank == 0 || axis >= rank || rank > 2 {
            return Err(Error::shape(format!(
                "concat along {axis} of rank-{rank} tensors"
            )));
        }
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == self.shape(*first)[d]);
            if !ok {
                return Err(shape_err("concat", self.shape(*first), s));
            }
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut n = 0;
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
                n += self.shape(*p)[0];
            }
            let mut shape = self.shape(*first).to_vec();
            shape[0] = n;
            Tensor::new(shape, data)?
        } else {
            let rows = self.shape(*first)[0];
            let total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 || s.len() > 2 {
            return Err(Error::shape(format!(
                "slice [{start}, {}) along {axis} of {s:?}",
                start + len
            )));
        }
        let value = if s.len() == 1 {
            Tensor::vector(t.data()[start..start + len].to_vec())
        } else if axis == 0 {
            let c = s[1];
            Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(s[0] * len);
            for i in 0..s[0] {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::matrix(s[0], len, data)?
        };
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Broadcasts `a` to `shape` with right-aligned size-1 expansion.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let map = broadcast_map(&src, shape)?;
        let data = self.value(a).data();
        let value = Tensor::new(shape.to_vec(), map.iter().map(|&i| data[i]).collect())?;
        Ok(self.push(value, Op::Broadcast(a), &[a]))
    }

    /// Rows `idx` of a 2-D tensor (or entries of a 1-D tensor).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows();
        if idx.is_empty() {
            return Err(Error::shape("gather of no rows"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("row {bad} out of range {n}")));
        }
        let value = match t.shape().len() {
            1 => Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect()),
            2 => {
                let c = t.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(t.row(i));
                }
                Tensor::matrix(idx.len(), c, data)?
            }
            _ => return Err(Error::shape(format!("gather from {:?}", t.shape()))),
        };
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// For each group of row indices, the column-wise maximum of those rows
    /// of a 2-D tensor. Empty groups produce a zero row with no gradient.
    /// Ties resolve to the earliest index in the group.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape(format!("segment_max of {:?}", t.shape())));
        }
        let (n, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; groups.len() * c];
        let mut choice = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                choice.push(Vec::new());
                continue;
            }
            if let Some(bad) = members.iter().find(|&&i| i >= n) {
                return Err(Error::shape(format!("row {bad} out of range {n}")));
            }
            let mut picks = Vec::with_capacity(c);
            for j in 0..c {
                let mut best = members[0];
                for &i in &members[1..] {
                    if t.get(i, j) > t.get(best, j) {
                        best = i;
                    }
                }
                data[g * c + j] = t.get(best, j);
                picks.push(best);
            }
            choice.push(picks);
        }
        let value = Tensor::matrix(groups.len(), c, data)?;
        let op = Op::SegmentMax {
            input: a,
            groups: groups.to_vec(),
            picks: choice,
        };
        Ok(self.push(value, op, &[a]))
    }

    /// Euclidean norm of each row of a 2-D tensor. The gradient at a zero
    /// row is taken as zero.
    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape(format!("norm_rows of {:?}", t.shape())));
        }
        let value = Tensor::vector(
            (0..t.rows())
                .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
        Ok(self.push(value, Op::NormRows(a), &[a]))
    }

    /// Smallest distance of any recorded non-smooth op from its kink
    /// (relu/abs at 0, max/min ties, clamp boundary, zero norm). Finite
    /// difference checks are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        let mut upd = |x: f64| {
            if x.abs() < m {
                m = x.abs();
            }
        };
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    self.nodes[a.0].value.data().iter().for_each(|&x| upd(x));
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    x.data().iter().zip(y.data()).for_each(|(p, q)| upd(p - q));
                }
                Op::ClampMax(a, k) => {
                    self.nodes[a.0].value.data().iter().for_each(|&x| upd(x - k));
                }
                Op::NormRows(_) => node.value.data().iter().for_each(|&x| upd(x)),
                Op::MaxAll(a, best) => {
                    let d = self.nodes[a.0].value.data();
                    for (i, &x) in d.iter().enumerate() {
                        if i != *best {
                            upd(d[*best] - x);
                        }
                    }
                }
                Op::SegmentMax { input, groups, picks } => {
                    let t = &self.nodes[input.0].value;
                    for (g, members) in groups.iter().enumerate() {
                        for (j, &best) in picks[g].iter().enumerate() {
                            for &i in members {
                                if i != best {
                                    upd(t.get(best, j) - t.get(i, j));
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.map(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y), &mut grads);
                    acc(*b, g.zip_map(val(*a), |x, y| x * y), &mut grads);
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x), &mut grads),
                Op::Scale(a, k) => acc(*a, g.map(|x| k * x), &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Recip(a) => acc(*a, g.zip_map(val(*a), |gx, x| -gx / (x * x)), &mut grads),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.matmul(&val(*b).transpose())?, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, val(*a).transpose().matmul(&g)?, &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::SumAll(a) => {
                    acc(*a, Tensor::full(val(*a).shape(), g.item()), &mut grads);
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Tensor::full(val(*a).shape(), g.item() / n), &mut grads);
                }
                Op::MaxAll(a, best) => {
                    let mut d = Tensor::zeros(val(*a).shape());
                    d.data_mut()[*best] = g.item();
                    acc(*a, d, &mut grads);
                }
                Op::SumAxis(a, axis) => {
                    let src = val(*a);
                    let (r, c) = (src.rows(), src.cols());
                    let data = (0..r * c)
                        .map(|k| if *axis == 1 { g.data()[k / c] } else { g.data()[k % c] })
                        .collect();
                    acc(*a, Tensor::new(src.shape().to_vec(), data)?, &mut grads);
                }
                Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx * sigmoid(x)), &mut grads),
                Op::LogSoftplus(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gx, x| gx * log_softplus_grad(x)),
                    &mut grads,
                ),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }),
                    &mut grads,
                ),
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gx, x| {
                        if x > 0.0 {
                            gx
                        } else if x < 0.0 {
                            -gx
                        } else {
                            0.0
                        }
                    }),
                    &mut grads,
                ),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx / x), &mut grads),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gx, y| gx * y), &mut grads),
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (x, y) = (val(*a), val(*b));
                    let pick_b: Vec<bool> = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(p, q)| if is_max { q > p } else { q < p })
                        .collect();
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(&pick_b)
                        .map(|(gx, pb)| if *pb { 0.0 } else { *gx })
                        .collect();
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(&pick_b)
                        .map(|(gx, pb)| if *pb { *gx } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), ga)?, &mut grads);
                    acc(*b, Tensor::new(y.shape().to_vec(), gb)?, &mut grads);
                }
                Op::ClampMax(a, k) => acc(
                    *a,
                    g.zip_map(val(*a), |gx, x| if x > *k { 0.0 } else { gx }),
                    &mut grads,
                ),
                Op::Concat(parts, axis) => {
                    let rank = g.shape().len();
                    let mut offset = 0;
                    for p in parts {
                        let s = val(*p).shape().to_vec();
                        let piece = if rank == 1 || *axis == 0 {
                            let len: usize = s.iter().product();
                            let d = g.data()[offset..offset + len].to_vec();
                            offset += len;
                            Tensor::new(s, d)?
                        } else {
                            let w = s[1];
                            let mut d = Vec::with_capacity(s[0] * w);
                            for r in 0..s[0] {
                                d.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            offset += w;
                            Tensor::new(s, d)?
                        };
                        acc(*p, piece, &mut grads);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let src = val(*input);
                    let mut d = Tensor::zeros(src.shape());
                    if src.shape().len() == 1 {
                        d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    } else if *axis == 0 {
                        let c = src.cols();
                        d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    } else {
                        let (c, w) = (src.cols(), g.cols());
                        for r in 0..src.rows() {
                            d.data_mut()[r * c + start..r * c + start + w]
                                .copy_from_slice(g.row(r));
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::Broadcast(a) => {
                    let src = val(*a);
                    let map = broadcast_map(src.shape(), g.shape())?;
                    let mut d = Tensor::zeros(src.shape());
                    for (k, &i) in map.iter().enumerate() {
                        d.data_mut()[i] += g.data()[k];
                    }
                    acc(*a, d, &mut grads);
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let c = if src.shape().len() == 1 { 1 } else { src.cols() };
                    let mut d = Tensor::zeros(src.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d.data_mut()[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SegmentMax { input, picks, .. } => {
                    let src = val(*input);
                    let c = src.cols();
                    let mut d = Tensor::zeros(src.shape());
                    for (grp, cols) in picks.iter().enumerate() {
                        for (j, &row) in cols.iter().enumerate() {
                            d.data_mut()[row * c + j] += g.data()[grp * c + j];
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::NormRows(a) => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut d = Tensor::zeros(src.shape());
                    for r in 0..src.rows() {
                        let norm = node.value.data()[r];
                        if norm > 0.0 {
                            for j in 0..c {
                                d.data_mut()[r * c + j] = g.data()[r] * src.get(r, j) / norm;
                            }
                        }
                    }
                    acc(*a, d, &mut grads);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// For each flat index of `target`, the flat index of `src` it reads from.
fn broadcast_map(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(shape_err("broadcast", src, target));
    }
    let pad = target.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(src.iter().copied()).collect();
    for (s, t) in padded.iter().zip(target) {
        if *s != 1 && s != t {
            return Err(shape_err("broadcast", src, target));
        }
    }
    let total: usize = target.iter().product();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for d in (0..target.len()).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}
