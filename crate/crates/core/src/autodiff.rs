//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a 1×1 result walks the tape in reverse insertion
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), g))
    }

    /// Adds a 1×C bias row to every row of an R×C matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: sa,
                right: sb,
            });
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..value.rows() {
            for (x, bj) in value.row_mut(i).iter_mut().zip(&b) {
                *x += bj;
            }
        }
        let g = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddRowBias(a, bias), g))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Abs(a), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::validation("concat_cols of zero tensors"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let src = self.value(a);
        let value = Matrix::from_fn(r, end - start, |i, j| src.get(i, start + j));
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), g))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::filled(1, 1, m.sum() / m.len() as f64);
        let g = self.any_grad(&[a]);
        self.push(value, Op::MeanAll(a), g)
    }

    /// Reverse sweep from a 1×1 `loss`, returning gradients for every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::validation("backward on an empty tape"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::validation(format!(
                "backward requires a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::validation(
                "backward on a detached tensor (no trainable inputs)",
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = upstream.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).t_matmul(&upstream);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *a, || upstream.clone());
                    self.pass(&mut grads, *b, || upstream.clone());
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *a, || upstream.clone());
                    self.pass(&mut grads, *b, || upstream.map(|x| -x));
                }
                Op::Hadamard(a, b) => {
                    self.pass(&mut grads, *a, || upstream.zip_map(self.value(*b), |g, y| g * y));
                    self.pass(&mut grads, *b, || upstream.zip_map(self.value(*a), |g, x| g * x));
                }
                Op::AddRowBias(a, bias) => {
                    self.pass(&mut grads, *a, || upstream.clone());
                    self.pass(&mut grads, *bias, || {
                        let mut db = Matrix::zeros(1, upstream.cols());
                        for i in 0..upstream.rows() {
                            for (d, g) in db.data_mut().iter_mut().zip(upstream.row(i)) {
                                *d += g;
                            }
                        }
                        db
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.pass(&mut grads, *a, || upstream.zip_map(y, |g, s| g * s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.pass(&mut grads, *a, || upstream.zip_map(y, |g, t| g * (1.0 - t * t)));
                }
                Op::Abs(a) => {
                    self.pass(&mut grads, *a, || {
                        upstream.zip_map(self.value(*a), |g, x| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.pass(&mut grads, *a, || upstream.map(|g| g * s));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.requires_grad(p) {
                            let piece = Matrix::from_fn(r, c, |i, j| upstream.get(i, offset + j));
                            accumulate(&mut grads, p, piece);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let start = *start;
                    self.pass(&mut grads, *a, || {
                        let (r, c) = self.shape(*a);
                        let mut g = Matrix::zeros(r, c);
                        for i in 0..r {
                            g.row_mut(i)[start..start + upstream.cols()]
                                .copy_from_slice(upstream.row(i));
                        }
                        g
                    });
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.shape(*a);
                    let g = upstream.get(0, 0) / (r * c) as f64;
                    self.pass(&mut grads, *a, || Matrix::filled(r, c, g));
                }
            }
            // leaves keep their gradient for retrieval
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }

    fn pass(&self, grads: &mut [Option<Matrix>], target: Var, f: impl FnOnce() -> Matrix) {
        if self.requires_grad(target) {
            accumulate(grads, target, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: Var, g: Matrix) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
