//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! replays the nodes in reverse and accumulates gradients into the leaves
//! created with [`Tape::param`].

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Neg,
    Square,
    Recip,
    Sqrt,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        a_t: bool,
        b_t: bool,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Affine {
        a: usize,
        scale: T,
    },
    Clamp {
        a: usize,
        lo: T,
        hi: T,
    },
    Softmax {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Sum {
        a: usize,
    },
    SumAxis0 {
        a: usize,
    },
    SumAxis1 {
        a: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(usize, Vec<usize>)>,
    },
    Column {
        a: usize,
        col: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    /// Drop every recorded node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {v:?} was not recorded on this tape"
            )));
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx]
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node(v).grad.as_ref()
    }

    /// Copy of `v`'s value as a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (ar, ac) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (m, k1) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k1, n, av.data(), a_t, bv.data(), b_t, &mut out, false);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: ia,
                b: ib,
                a_t,
                b_t,
            },
            rg,
        ))
    }

    fn bcast_of(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Bcast> {
        if a.shape() == b.shape() {
            return Ok(Bcast::Same);
        }
        if b.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if a.shape().len() == 2 {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            if (b.shape() == [c] || b.shape() == [1, c]) && b.numel() == c {
                return Ok(Bcast::Row);
            }
            if b.shape() == [r, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::shape(op, a.shape(), b.shape()))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bcast = Self::bcast_of(name, av, bv)?;
        let cols = av.cols();
        let bd = bv.data();
        if kind == BinaryKind::Div && bd.iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bmap(bcast, i, cols)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                bcast,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may also be a scalar, a row (`[cols]` or `[1, cols]`) or a column (`[rows, 1]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        match kind {
            UnaryKind::Log if av.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain("log of a non-positive value".into()));
            }
            UnaryKind::Recip if av.data().iter().any(|v| v.is_zero()) => {
                return Err(Error::Domain("reciprocal of zero".into()));
            }
            UnaryKind::Sqrt if av.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain("square root of a negative value".into()));
            }
            _ => {}
        }
        let value = av.map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
            UnaryKind::Recip => x.recip(),
            UnaryKind::Sqrt => x.sqrt(),
        });
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Unary { kind, a: ia }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Recip, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * scale + shift);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Affine { a: ia, scale }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.affine(a, factor, T::zero())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.affine(a, T::one(), c)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x.max(lo).min(hi));
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Clamp { a: ia, lo, hi }, rg))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = softmax_rows(&self.nodes[ia].value);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Softmax { a: ia }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`; identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        let ia = self.check(a)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let av = &self.nodes[ia].value;
        let mask: Vec<T> = (0..av.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Dropout { a: ia, mask }, rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ia }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::lit(1.0 / n.max(1) as f64))
    }

    /// Column sums of a matrix, shape `[1, cols]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::SumAxis0 { a: ia }, rg))
    }

    /// Row sums of a matrix, shape `[rows, 1]`.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let out: Vec<T> = (0..av.rows())
            .map(|i| av.row(i).iter().copied().sum())
            .collect();
        let rg = self.rg(ia);
        Ok(self.push(
            Tensor::new(&[out.len(), 1], out)?,
            Op::SumAxis1 { a: ia },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape(), &[bad]));
        }
        let value = av.select_rows(idx);
        let rg = self.rg(ia);
        Ok(self.push(
            value,
            Op::GatherRows {
                a: ia,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Assemble an `rows×cols` matrix whose row `idx[j]` is row `j` of the
    /// matching part. Rows not covered by any part are zero.
    pub fn scatter_rows(
        &mut self,
        rows: usize,
        cols: usize,
        parts: &[(Var, Vec<usize>)],
    ) -> Result<Var> {
        let mut out = vec![T::zero(); rows * cols];
        let mut recorded = Vec::with_capacity(parts.len());
        let mut rg = false;
        for (v, idx) in parts {
            let iv = self.check(*v)?;
            let pv = &self.nodes[iv].value;
            if pv.cols() != cols || pv.rows() != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::shape("scatter_rows", pv.shape(), &[rows, cols]));
            }
            for (j, &i) in idx.iter().enumerate() {
                out[i * cols..(i + 1) * cols].copy_from_slice(pv.row(j));
            }
            rg |= self.rg(iv);
            recorded.push((iv, idx.clone()));
        }
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::ScatterRows { parts: recorded },
            rg,
        ))
    }

    /// Column `col` as an `[rows, 1]` matrix.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.shape().len() != 2 || col >= av.cols() {
            return Err(Error::shape("column", av.shape(), &[col]));
        }
        let out: Vec<T> = (0..av.rows()).map(|i| av.get(i, col)).collect();
        let rg = self.rg(ia);
        Ok(self.push(
            Tensor::new(&[out.len(), 1], out)?,
            Op::Column { a: ia, col },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Gradients add into existing leaf
    /// gradients, so several calls within one step accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::shape("backward", self.nodes[il].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *d;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let m = out.shape()[0];
                let n = out.shape()[1];
                let k = if a_t { av.shape()[0] } else { av.shape()[1] };
                if self.rg(a) {
                    let ga = slot(grads, a, av.numel());
                    if a_t {
                        T::gemm(k, n, m, bv.data(), b_t, g, true, ga, true);
                    } else {
                        T::gemm(m, n, k, g, false, bv.data(), !b_t, ga, true);
                    }
                }
                if self.rg(b) {
                    let gb = slot(grads, b, bv.numel());
                    if b_t {
                        T::gemm(n, m, k, g, true, av.data(), a_t, gb, true);
                    } else {
                        T::gemm(k, m, n, av.data(), !a_t, g, false, gb, true);
                    }
                }
            }
            &Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let cols = av.cols();
                let (ad, bd) = (av.data(), bv.data());
                if self.rg(a) {
                    let ga = slot(grads, a, ad.len());
                    for (idx, (o, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        let y = bd[bmap(bcast, idx, cols)];
                        *o += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * y,
                            BinaryKind::Div => gi / y,
                        };
                    }
                }
                if self.rg(b) {
                    let gb = slot(grads, b, bd.len());
                    for (idx, (&gi, &x)) in g.iter().zip(ad).enumerate() {
                        let j = bmap(bcast, idx, cols);
                        let y = bd[j];
                        gb[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * x,
                            BinaryKind::Div => -gi * x / (y * y),
                        };
                    }
                }
            }
            &Op::Unary { kind, a } => {
                if !self.rg(a) {
                    return;
                }
                let xd = self.nodes[a].value.data();
                let yd = out.data();
                let ga = slot(grads, a, xd.len());
                for j in 0..ga.len() {
                    let (x, y, gi) = (xd[j], yd[j], g[j]);
                    ga[j] += match kind {
                        UnaryKind::Exp => gi * y,
                        UnaryKind::Log => gi / x,
                        UnaryKind::Relu => {
                            if x > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sigmoid => gi * y * (T::one() - y),
                        UnaryKind::Neg => -gi,
                        UnaryKind::Square => gi * (x + x),
                        UnaryKind::Recip => -gi * y * y,
                        UnaryKind::Sqrt => gi / (y + y),
                    };
                }
            }
            &Op::Affine { a, scale } => {
                if self.rg(a) {
                    let ga = slot(grads, a, g.len());
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * scale;
                    }
                }
            }
            &Op::Clamp { a, lo, hi } => {
                if self.rg(a) {
                    let xd = self.nodes[a].value.data();
                    let ga = slot(grads, a, g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(xd) {
                        if x >= lo && x <= hi {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                if self.rg(a) {
                    let cols = out.cols();
                    let ga = slot(grads, a, g.len());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            &Op::Sum { a } => {
                if self.rg(a) {
                    let n = self.nodes[a].value.numel();
                    for o in slot(grads, a, n).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::SumAxis0 { a } => {
                if self.rg(a) {
                    let av = &self.nodes[a].value;
                    let c = av.cols();
                    let ga = slot(grads, a, av.numel());
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += g[j % c];
                    }
                }
            }
            &Op::SumAxis1 { a } => {
                if self.rg(a) {
                    let av = &self.nodes[a].value;
                    let c = av.cols();
                    let ga = slot(grads, a, av.numel());
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += g[j / c];
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    let ga = slot(grads, *a, av.numel());
                    for (j, &i) in idx.iter().enumerate() {
                        for (o, &gi) in ga[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[j * c..(j + 1) * c])
                        {
                            *o += gi;
                        }
                    }
                }
            }
            Op::ScatterRows { parts } => {
                let c = out.cols();
                for (p, idx) in parts {
                    if !self.rg(*p) {
                        continue;
                    }
                    let gp = slot(grads, *p, idx.len() * c);
                    for (j, &i) in idx.iter().enumerate() {
                        for (o, &gi) in gp[j * c..(j + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                        {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Column { a, col } => {
                if self.rg(a) {
                    let av = &self.nodes[a].value;
                    let c = av.cols();
                    let ga = slot(grads, a, av.numel());
                    for (r, &gi) in g.iter().enumerate() {
                        ga[r * c + col] += gi;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn bmap(b: Bcast, i: usize, cols: usize) -> usize {
    match b {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax over each row.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}
