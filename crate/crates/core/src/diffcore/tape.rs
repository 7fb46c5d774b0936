use super::array::Array;
use crate::error::{dim_err, Error, Result};

/// Guard added inside every logarithm.
pub const EPS_LOG: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for 2-D arrays. Results keep two dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce everything to a one-element array.
    All,
    /// Collapse rows, one value per column (`1 × cols`).
    Rows,
    /// Collapse columns, one value per row (`rows × 1`).
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Log,
    Exp,
    Tanh,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    Unary(Unary, NodeId),
    /// Softmax along `Axis::Cols` (per row) or `Axis::Rows` (per column).
    Softmax(NodeId, Axis),
    Reduce(Reduce, NodeId, Axis),
    ConcatCols(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    grad: Array,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass, parents always before children.
///
/// Binary elementwise ops accept equal shapes or a one-element operand on
/// either side; nothing else broadcasts. Row-vector biases are broadcast with
/// an explicit `ones(B×1) · bias(1×C)` matmul.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> NodeId {
        let grad = value.zeros_like();
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.node(id).value
    }

    pub fn grad(&self, id: NodeId) -> &Array {
        &self.node(id).grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.numel() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return dim_err(format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()));
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let f = match kind {
            Unary::Log => |x: f64| (x + EPS_LOG).ln(),
            Unary::Exp => f64::exp,
            Unary::Tanh => f64::tanh,
            Unary::Abs => f64::abs,
            Unary::Neg => |x: f64| -x,
        };
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Unary(kind, a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Abs, a)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Neg, a)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, false, Op::Leaf)
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = x.clone();
        let lanes: Vec<Vec<usize>> = match axis {
            Axis::Cols => (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect(),
            Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
            Axis::All => vec![(0..r * c).collect()],
        };
        let data = out.data_mut();
        for lane in &lanes {
            let max = lane.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Contract("softmax of non-finite input".into()));
            }
            let mut total = 0.0;
            for &i in lane {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for &i in lane {
                data[i] /= total;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Softmax(a, axis)))
    }

    pub fn reduce(&mut self, kind: Reduce, a: NodeId, axis: Axis) -> NodeId {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let (shape, sums): (Vec<usize>, Vec<f64>) = match axis {
            Axis::All => (vec![1], vec![x.data().iter().sum()]),
            Axis::Rows => (vec![1, c], (0..c).map(|j| (0..r).map(|i| x.get(i, j)).sum()).collect()),
            Axis::Cols => (vec![r, 1], x.row_iter().map(|row| row.iter().sum()).collect()),
        };
        let count = match axis {
            Axis::All => (r * c) as f64,
            Axis::Rows => r as f64,
            Axis::Cols => c as f64,
        };
        let data = match kind {
            Reduce::Sum => sums,
            Reduce::Mean => sums.into_iter().map(|s| s / count).collect(),
        };
        let value = Array::new(shape, data).expect("reduction shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Reduce(kind, a, axis))
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.reduce(Reduce::Mean, a, axis)
    }

    /// Horizontal concatenation of 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero arrays");
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols row counts disagree");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let value = Array::matrix(rows, total, data)?;
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Accumulates `d loss / d node` into every node that requires grad.
    ///
    /// Adjoints are propagated in a scratch buffer, so calling `backward`
    /// twice without `zero_grad` exactly doubles every stored gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (parent, contrib) in self.local_adjoints(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[idx].grad.add_assign(&g);
        }
        Ok(())
    }

    fn local_adjoints(&self, idx: usize, g: &Array) -> Result<Vec<(NodeId, Array)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, g.matmul(&vb.transpose())?), (*b, va.transpose().matmul(g)?)]
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => (broadcast_mul(g, vb), broadcast_mul(g, va)),
                };
                vec![(*a, unbroadcast(ga, va)), (*b, unbroadcast(gb, vb))]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let d: Vec<f64> = match kind {
                    Unary::Log => zip3(g, x, y, |g, x, _| g / (x + EPS_LOG)),
                    Unary::Exp => zip3(g, x, y, |g, _, y| g * y),
                    Unary::Tanh => zip3(g, x, y, |g, _, y| g * (1.0 - y * y)),
                    Unary::Abs => zip3(g, x, y, |g, x, _| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    Unary::Neg => zip3(g, x, y, |g, _, _| -g),
                };
                vec![(*a, Array::new(x.shape().to_vec(), d)?)]
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                let lanes: Vec<Vec<usize>> = match axis {
                    Axis::Cols => (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect(),
                    Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
                    Axis::All => vec![(0..r * c).collect()],
                };
                for lane in &lanes {
                    let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
                    for &i in lane {
                        d[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
                vec![(*a, Array::new(y.shape().to_vec(), d)?)]
            }
            Op::Reduce(kind, a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let count = match axis {
                    Axis::All => (r * c) as f64,
                    Axis::Rows => r as f64,
                    Axis::Cols => c as f64,
                };
                let factor = match kind {
                    Reduce::Sum => 1.0,
                    Reduce::Mean => 1.0 / count,
                };
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let gi = match axis {
                            Axis::All => g.data()[0],
                            Axis::Rows => g.data()[j],
                            Axis::Cols => g.data()[i],
                        };
                        d[i * c + j] = gi * factor;
                    }
                }
                vec![(*a, Array::new(x.shape().to_vec(), d)?)]
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        d.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    res.push((p, Array::new(self.value(p).shape().to_vec(), d)?));
                }
                res
            }
        };
        Ok(out)
    }
}

fn zip3(g: &Array, x: &Array, y: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    g.data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

fn broadcast_mul(g: &Array, other: &Array) -> Array {
    if other.numel() == 1 {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else if g.numel() == other.numel() {
        let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Array::new(g.shape().to_vec(), data).expect("same shape")
    } else {
        // g is one element, other is the full operand
        let s = g.data()[0];
        other.map(|v| v * s)
    }
}

/// Folds an adjoint back onto the operand's shape.
fn unbroadcast(grad: Array, operand: &Array) -> Array {
    if grad.shape() == operand.shape() {
        grad
    } else {
        let total: f64 = grad.data().iter().sum();
        Array::full(operand.shape(), total)
    }
}
