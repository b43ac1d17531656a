//! Reverse-mode differentiation over a linear tape of dense tensor ops.
//!
//! Shape rules: elementwise ops (`add`, `sub`, `mul`) require identical shapes.
//! The only broadcast is the bias of [`Tape::affine`], which is added to every row.
//! `concat` joins 2-D tensors along columns.

use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Silu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable input; its gradient is available through [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Gradients are tracked only when `track` is set
    /// and the parameter is marked trainable; otherwise it enters as a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, track: bool) -> Var {
        let p = store.get(id);
        let tracked = track && p.trainable();
        self.nodes.push(Node {
            value: p.shared(),
            op: if tracked { Op::Param(id) } else { Op::Constant },
            needs_grad: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(Error::Shape {
                op: "affine",
                detail: format!("x {:?}, w {:?}", xv.shape(), wv.shape()),
            });
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; n * m];
        let mut beta = 0.0;
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::Shape {
                    op: "affine",
                    detail: format!("bias {:?} for {m} outputs", bv.shape()),
                });
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
            beta = 1.0;
        }
        gemm(xv.data(), false, wv.data(), true, n, k, m, &mut out, beta);
        let value = Tensor::checked(vec![n, m], out, "affine")?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Affine { x, w, b }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let value = self.value(x).map(f, name)?;
        let ng = self.needs(x);
        Ok(self.push(value, op, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x), "silu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {s}")));
        }
        self.unary(x, |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::checked(vec![1], vec![self.value(x).sum()], "sum")?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::checked(vec![1], vec![self.value(x).mean()], "mean")?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Mean(x), ng))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = match op {
            Op::Add(..) => av.add(bv)?,
            Op::Sub(..) => av.sub(bv)?,
            Op::Mul(..) => av.mul(bv)?,
            _ => unreachable!(),
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&values)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Stop-gradient: same value, no gradient flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut leaves = Vec::new();
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant | Op::Detach => {}
                Op::Leaf => leaves.push((Var(i), g)),
                Op::Param(id) => params.push((*id, g)),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                    if self.needs(*x) {
                        let mut gx = vec![0.0; n * k];
                        gemm(g.data(), false, wv.data(), false, n, m, k, &mut gx, 0.0);
                        self.send(&mut grads, *x, Tensor::raw(vec![n, k], gx));
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; m * k];
                        gemm(g.data(), true, xv.data(), false, m, n, k, &mut gw, 0.0);
                        self.send(&mut grads, *w, Tensor::raw(wv.shape().to_vec(), gw));
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(b).shape().to_vec();
                        self.send(&mut grads, b, Tensor::raw(shape, gb));
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = g.zip(y, |gi, yi| gi * (1.0 - yi * yi), "tanh'")?;
                    self.send(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let gx = g.zip(self.value(*x), |gi, xi| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    }, "silu'")?;
                    self.send(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g.zip(self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }, "relu'")?;
                    self.send(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    self.send(&mut grads, *x, Tensor::full(xv.shape(), g.item()));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let v = g.item() / xv.len() as f64;
                    self.send(&mut grads, *x, Tensor::full(xv.shape(), v));
                }
                Op::Square(x) => {
                    let gx = g.zip(self.value(*x), |gi, xi| 2.0 * gi * xi, "square'")?;
                    self.send(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => {
                    let gx = g.scale(*s)?;
                    self.send(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.send(&mut grads, *b, g.clone());
                    }
                    self.send(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.send(&mut grads, *b, g.scale(-1.0)?);
                    }
                    self.send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.mul(self.value(*b))?;
                        self.send(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.mul(self.value(*a))?;
                        self.send(&mut grads, *b, gb);
                    }
                }
                Op::Concat(parts) => {
                    let n = g.rows();
                    let width = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.needs(p) {
                            let mut data = Vec::with_capacity(n * c);
                            for r in 0..n {
                                data.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                            }
                            self.send(&mut grads, p, Tensor::raw(vec![n, c], data));
                        }
                        offset += c;
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.needs(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Result of [`Tape::backward`]: gradients of leaves and of tracked parameter bindings.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a [`Tape::leaf`]; `None` if no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    /// One entry per tracked binding; a parameter bound twice appears twice.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Summed gradient of a parameter across all its bindings.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (pid, g) in &self.params {
            if *pid != id {
                continue;
            }
            match &mut acc {
                Some(a) => {
                    for (x, v) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += v;
                    }
                }
                None => acc = Some(g.clone()),
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_and_affine_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0]]));
        assert_eq!(tape.value(x).data(), &[1.0, 2.0]);

        let w = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[vec![3.0, -1.0]]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -2.0, 7.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_input_path() {
        // loss = ||W x||² / 2 with x detached: dW = (Wx) xᵀ, dx = 0.
        let mut store = ParamStore::new();
        let wv = t(&[vec![1.0, 2.0], vec![-0.5, 3.0]]);
        let wid = store.add("w", wv.clone(), true).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![0.7, -1.3]]));
        let xd = tape.detach(x);
        let w = tape.param(&store, wid, true);
        let y = tape.affine(xd, w, None).unwrap();
        let sq = tape.square(y).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).is_none());
        let wx = [1.0 * 0.7 + 2.0 * -1.3, -0.5 * 0.7 + 3.0 * -1.3];
        let xs = [0.7, -1.3];
        let want: Vec<f64> = (0..2).flat_map(|i| (0..2).map(move |j| wx[i] * xs[j])).collect();
        let got = g.param(wid).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let x = tape.constant(t(&[vec![1.0, 2.0]]));
        let w = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
        assert!(tape.affine(x, w, None).is_err());
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::vector(vec![2.0]).unwrap(), true).unwrap();
        let mut tape = Tape::new();
        let a1 = tape.param(&store, id, true);
        let a2 = tape.param(&store, id, true);
        let p = tape.mul(a1, a2).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(id).data(), &[4.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("frozen", Tensor::vector(vec![2.0]).unwrap(), false).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id, true);
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap());
        let p = tape.mul(a, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param(id).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0]);
    }
}
