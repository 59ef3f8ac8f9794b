use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds the engine can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Exp,
    Log,
    Square,
    Mean,
    Sum,
    /// Column-wise concatenation of 2D tensors with equal row counts.
    Concat,
    /// Multiply by a constant.
    Scale(f64),
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::MatMul => "matmul",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Scale(_) => "scale",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(OpKind, usize, usize),
    Unary(OpKind, usize),
    Concat(Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's parents precede it.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shapes_of<T: Real>(ts: &[&Tensor<T>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// stopgrad: a value-equal leaf cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.detached();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor of the leaf's shape, zeros when unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        for &v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("{name}: unknown tape node {}", v.0)));
            }
            if !self.nodes[v.0].value.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let arity_err = |want: usize| {
            Error::invalid(format!("{name} takes {want} input(s), got {}", inputs.len()))
        };
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (a, b) = (inputs[0].0, inputs[1].0);
                let value = self.binary_value(kind, a, b)?;
                Ok(self.push(value, Op::Binary(kind, a, b), rg))
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
                let value = self.concat_value(&ids)?;
                Ok(self.push(value, Op::Concat(ids), rg))
            }
            _ => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = inputs[0].0;
                let value = self.unary_value(kind, a)?;
                Ok(self.push(value, Op::Unary(kind, a), rg))
            }
        }
    }

    fn binary_value(&self, kind: OpKind, a: usize, b: usize) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let name = kind.name();
        if kind == OpKind::MatMul {
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape(name, shapes_of(&[ta, tb])));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let c = kernels::matmul(ta.data(), tb.data(), m, k, n);
            return Tensor::new(vec![m, n], c);
        }
        let f = |x: T, y: T| match kind {
            OpKind::Add => x + y,
            OpKind::Sub => x - y,
            _ => x * y,
        };
        if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.is_scalar() {
            let s = tb.item();
            Ok(ta.map(|x| f(x, s)))
        } else if ta.is_scalar() {
            let s = ta.item();
            Ok(tb.map(|y| f(s, y)))
        } else {
            Err(Error::shape(name, shapes_of(&[ta, tb])))
        }
    }

    fn unary_value(&self, kind: OpKind, a: usize) -> Result<Tensor<T>> {
        let ta = &self.nodes[a].value;
        Ok(match kind {
            OpKind::Tanh => ta.map(|x| x.tanh()),
            OpKind::Exp => ta.map(|x| x.exp()),
            OpKind::Log => {
                if ta.data().iter().any(|&x| x <= T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "input must be strictly positive".into(),
                    });
                }
                ta.map(|x| x.ln())
            }
            OpKind::Square => ta.map(|x| x * x),
            OpKind::Sum => Tensor::scalar(ta.data().iter().copied().sum()),
            OpKind::Mean => {
                let n = T::of(ta.numel() as f64);
                Tensor::scalar(ta.data().iter().copied().sum::<T>() / n)
            }
            OpKind::Scale(s) => {
                let s = T::of(s);
                ta.map(|x| x * s)
            }
            _ => unreachable!("binary kinds handled elsewhere"),
        })
    }

    fn concat_value(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let rows = parts[0].shape()[0];
        if parts.iter().any(|p| p.shape().len() != 2 || p.shape()[0] != rows) {
            return Err(Error::shape("concat", shapes_of(&parts)));
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in &parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, total], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }

    /// Adds `∂root/∂leaf` into every reachable leaf that requires grad.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_t = &self.nodes[root.0].value;
        if !root_t.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_t.shape()),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(g),
                    }
                }
                Op::Unary(kind, a) => {
                    let a = *a;
                    if !self.nodes[a].requires_grad {
                        continue;
                    }
                    let x = self.nodes[a].value.data();
                    let y = node.value.data();
                    let n = x.len();
                    let contrib: Vec<T> = match kind {
                        OpKind::Tanh => y.iter().zip(&g).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                        OpKind::Exp => y.iter().zip(&g).map(|(&y, &g)| g * y).collect(),
                        OpKind::Log => x.iter().zip(&g).map(|(&x, &g)| g / x).collect(),
                        OpKind::Square => {
                            let two = T::of(2.0);
                            x.iter().zip(&g).map(|(&x, &g)| g * two * x).collect()
                        }
                        OpKind::Sum => vec![g[0]; n],
                        OpKind::Mean => vec![g[0] / T::of(n as f64); n],
                        OpKind::Scale(s) => {
                            let s = T::of(*s);
                            g.iter().map(|&g| g * s).collect()
                        }
                        _ => unreachable!(),
                    };
                    accumulate(&mut adj[a], contrib);
                }
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (ga, gb) = (self.nodes[a].requires_grad, self.nodes[b].requires_grad);
                    match kind {
                        OpKind::MatMul => {
                            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                            if ga {
                                let mut da = vec![T::zero(); m * k];
                                kernels::matmul_nt_acc(&mut da, &g, tb.data(), m, k, n);
                                accumulate(&mut adj[a], da);
                            }
                            if gb {
                                let mut db = vec![T::zero(); k * n];
                                kernels::matmul_tn_acc(&mut db, ta.data(), &g, m, k, n);
                                accumulate(&mut adj[b], db);
                            }
                        }
                        _ => {
                            let out_len = g.len();
                            // Expand scalar operands to the output length.
                            let av = |j: usize| if ta.numel() == out_len { ta.data()[j] } else { ta.data()[0] };
                            let bv = |j: usize| if tb.numel() == out_len { tb.data()[j] } else { tb.data()[0] };
                            let (da, db): (Vec<T>, Vec<T>) = match kind {
                                OpKind::Add => (g.clone(), g.clone()),
                                OpKind::Sub => (g.clone(), g.iter().map(|&v| -v).collect()),
                                OpKind::Mul => (
                                    (0..out_len).map(|j| g[j] * bv(j)).collect(),
                                    (0..out_len).map(|j| g[j] * av(j)).collect(),
                                ),
                                _ => unreachable!(),
                            };
                            if ga {
                                accumulate(&mut adj[a], reduce_to(da, ta.numel()));
                            }
                            if gb {
                                accumulate(&mut adj[b], reduce_to(db, tb.numel()));
                            }
                        }
                    }
                }
                Op::Concat(ids) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in ids {
                        let w = self.nodes[p].value.shape()[1];
                        if self.nodes[p].requires_grad {
                            let mut part = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut adj[p], part);
                        }
                        offset += w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn reduce_to<T: Real>(g: Vec<T>, numel: usize) -> Vec<T> {
    if g.len() == numel {
        g
    } else {
        vec![g.into_iter().sum()]
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}
