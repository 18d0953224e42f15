use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{matmul_backward, matmul_kernel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Primitive kinds understood by [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Square,
    Sum,
    Mean,
    SumRows,
    Concat,
    /// Broadcast a scalar, `[n]` or `[1, n]` input to `[rows, n]` (or any shape for scalars).
    Broadcast { rows: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Concat(Vec<usize>),
    Broadcast(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. A tape is meant to be rebuilt for every training step.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        let i = v.idx as usize;
        if v.tape != self.id || i >= self.nodes.len() {
            return Err(Error::UnknownNode(i));
        }
        Ok(i)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.resolve(v).expect("var belongs to another tape")]
    }

    /// Records a differentiable leaf (a parameter or an input we want `∂/∂x` for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records a leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let value = n.value.map(f);
        let rg = n.requires_grad;
        self.push(op(a.index()), value, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a).value.shape(), self.node(b).value.shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.resolve(a)?;
        self.resolve(b)?;
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value = na.value.zip_map(&nb.value, f)?;
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(op(a.index(), b.index()), value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.resolve(a)?;
        self.resolve(b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(na.value.data(), nb.value.data(), m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(
            Op::MatMul(a.index(), b.index()),
            Tensor::matrix(m, n, data),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let value = n.value.map(|v| v * c);
        let rg = n.requires_grad;
        self.push(Op::Scale(a.index(), c), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu, gelu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |v| v * v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.data().iter().sum();
        let rg = n.requires_grad;
        self.push(Op::Sum(a.index()), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let len = n.value.len().max(1) as f64;
        let s = n.value.data().iter().sum::<f64>() / len;
        let rg = n.requires_grad;
        self.push(Op::Mean(a.index()), Tensor::scalar(s), rg)
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.resolve(a)?;
        let n = self.node(a);
        let shape = n.value.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (m, c) = (shape[0], shape[1]);
        let data = (0..m)
            .map(|r| n.value.data()[r * c..(r + 1) * c].iter().sum())
            .collect();
        let rg = n.requires_grad;
        Ok(self.push(Op::SumRows(a.index()), Tensor::matrix(m, 1, data), rg))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        for &p in parts {
            self.resolve(p)?;
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| &self.node(p).value).collect();
        let value = Tensor::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(
            Op::Concat(parts.iter().map(|p| p.index()).collect()),
            value,
            rg,
        ))
    }

    /// Broadcasts a scalar, `[n]` or `[1, n]` tensor to `[rows, n]`.
    pub fn broadcast(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.resolve(a)?;
        let n = self.node(a);
        let shape = n.value.shape();
        let width = match shape {
            [] => 1,
            [w] => *w,
            [1, w] => *w,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: shape.to_vec(),
                    rhs: vec![rows],
                })
            }
        };
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            data.extend_from_slice(n.value.data());
        }
        let rg = n.requires_grad;
        Ok(self.push(
            Op::Broadcast(a.index()),
            Tensor::matrix(rows, width, data),
            rg,
        ))
    }

    /// Generic entry point keyed by primitive kind.
    pub fn forward_op(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::Broadcast { rows } => {
                arity(1)?;
                self.broadcast(inputs[0], rows)
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                self.resolve(a)?;
                Ok(match kind {
                    Primitive::Scale(c) => self.scale(a, c),
                    Primitive::Relu => self.relu(a),
                    Primitive::Gelu => self.gelu(a),
                    Primitive::Square => self.square(a),
                    Primitive::Sum => self.sum(a),
                    Primitive::Mean => self.mean(a),
                    Primitive::SumRows => return self.sum_rows(a),
                    _ => unreachable!(),
                })
            }
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.resolve(root)?;
        let root_val = &self.nodes[r].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        adj[r] = Some(vec![1.0]);

        for i in (0..=r).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let dims = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut da = self.nodes[*a]
                        .requires_grad
                        .then(|| take_or_zero(&mut adj, *a, va.len()));
                    let mut db = self.nodes[*b]
                        .requires_grad
                        .then(|| take_or_zero(&mut adj, *b, vb.len()));
                    matmul_backward(
                        va.data(),
                        vb.data(),
                        &g,
                        dims,
                        da.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(da) = da {
                        adj[*a] = Some(da);
                    }
                    if let Some(db) = db {
                        adj[*b] = Some(db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, |d| axpy(d, 1.0, &g));
                    self.accumulate(&mut adj, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, |d| axpy(d, 1.0, &g));
                    self.accumulate(&mut adj, *b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.accumulate(&mut adj, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    self.accumulate(&mut adj, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(a, c) => self.accumulate(&mut adj, *a, |d| axpy(d, *c, &g)),
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut adj, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut adj, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += g * gelu_grad(*x);
                        }
                    });
                }
                Op::Square(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut adj, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += 2.0 * g * x;
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.accumulate(&mut adj, *a, |d| d.iter_mut().for_each(|d| *d += g0));
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let g0 = g[0] / n;
                    self.accumulate(&mut adj, *a, |d| d.iter_mut().for_each(|d| *d += g0));
                }
                Op::SumRows(a) => {
                    let c = self.nodes[*a].value.shape()[1];
                    self.accumulate(&mut adj, *a, |d| {
                        for (r, row) in d.chunks_mut(c.max(1)).enumerate() {
                            row.iter_mut().for_each(|v| *v += g[r]);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.shape()[1];
                        self.accumulate(&mut adj, p, |d| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                axpy(&mut d[r * w..(r + 1) * w], 1.0, src);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Broadcast(a) => {
                    let w = self.nodes[*a].value.len();
                    self.accumulate(&mut adj, *a, |d| {
                        for chunk in g.chunks(w.max(1)) {
                            axpy(d, 1.0, chunk);
                        }
                    });
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes[..=r]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads: adj,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let len = self.nodes[i].value.len();
        let buf = adj[i].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn take_or_zero(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> Vec<f64> {
    adj[i].take().unwrap_or_else(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Adjoints produced by [`Tape::backward`]. Only leaves keep their buffers.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf. Leaves that do not feed
    /// the root get a zero tensor.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        let i = v.idx as usize;
        if v.tape != self.tape {
            return Err(Error::UnknownNode(i));
        }
        if i >= self.shapes.len() {
            // recorded after the root: cannot influence it
            return Err(Error::UnknownNode(i));
        }
        let shape = self.shapes[i].clone();
        Ok(match &self.grads[i] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}

/// `∂root/∂input` in one call.
pub fn grad_wrt_input(tape: &Tape, root: Var, input: Var) -> Result<Tensor> {
    tape.resolve(input)?;
    tape.backward(root)?.wrt(input)
}
