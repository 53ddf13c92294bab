//! Reverse-mode differentiation over a flat tape of small dense tensors.
//!
//! Nodes are appended in evaluation order and only reference earlier nodes,
//! so the tape is always a DAG in topological order and backward is a single
//! reverse sweep. Shape errors are programming errors and panic.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Detach,
    Row(Var, usize),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    LogSoftmax(Var),
    Exp(Var),
    Sum(Var),
    Pick(Var, usize),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    SumOf(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "not a scalar");
        n.value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Differentiable input; its gradient is reported by [`Gradients::of`].
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len());
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len());
        self.push(rows, cols, value, Op::Const)
    }

    pub fn constant_vec(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.constant(1, n, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(1, 1, vec![value])
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (r, c, v) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, v, Op::Detach)
    }

    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let n = self.node(m);
        assert!(r < n.rows, "row {r} out of {}", n.rows);
        let v = n.value[r * n.cols..(r + 1) * n.cols].to_vec();
        let cols = n.cols;
        self.push(1, cols, v, Op::Row(m, r))
    }

    /// Row vector times matrix: `(1 x n) (n x m) -> (1 x m)`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Var {
        let (xn, wn) = (self.node(x), self.node(w));
        assert_eq!(xn.rows, 1);
        assert_eq!(xn.cols, wn.rows, "vecmat inner dimension");
        let m = wn.cols;
        let mut out = vec![0.0; m];
        for (i, &xi) in xn.value.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &wn.value[i * m..(i + 1) * m];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        self.push(1, m, out, Op::VecMat(x, w))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (an, bn) = (self.node(a), self.node(b));
        assert_eq!((an.rows, an.cols), (bn.rows, bn.cols), "elementwise shapes");
        let v = an.value.iter().zip(&bn.value).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = (an.rows, an.cols);
        self.push(r, c, v, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let an = self.node(a);
        let v = an.value.iter().map(|&x| f(x)).collect();
        let (r, c) = (an.rows, an.cols);
        self.push(r, c, v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi);
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(self.value(a));
        let (r, c) = self.shape(a);
        self.push(r, c, v, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let x = self.value(a)[i];
        self.push(1, 1, vec![x], Op::Pick(a, i))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum_of(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum_of needs at least one term");
        let (r, c) = self.shape(vars[0]);
        let mut acc = vec![0.0; r * c];
        for &v in vars {
            assert_eq!(self.shape(v), (r, c), "sum_of shapes");
            for (a, x) in acc.iter_mut().zip(self.value(v)) {
                *a += x;
            }
        }
        self.push(r, c, acc, Op::SumOf(vars.to_vec()))
    }

    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        let s = self.sum_of(vars);
        self.scale(s, 1.0 / vars.len() as f64)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let value = self.scalar(root);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        grads[root.0] = vec![1.0];

        fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let g = &mut grads[v.0];
            if g.is_empty() {
                *g = vec![0.0; len];
            }
            g
        }

        for idx in (0..=root.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const | Op::Detach => {}
                Op::Row(m, r) => {
                    let len = self.node(*m).value.len();
                    let dst = acc(&mut grads, *m, len);
                    let cols = node.cols;
                    for (d, x) in dst[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::VecMat(x, w) => {
                    let (xn, wn) = (self.node(*x), self.node(*w));
                    let m = wn.cols;
                    {
                        let dx = acc(&mut grads, *x, xn.value.len());
                        for (i, d) in dx.iter_mut().enumerate() {
                            let row = &wn.value[i * m..(i + 1) * m];
                            *d += row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    let dw = acc(&mut grads, *w, wn.value.len());
                    for (i, &xi) in xn.value.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        for (d, gj) in dw[i * m..(i + 1) * m].iter_mut().zip(&g) {
                            *d += xi * gj;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += sign * x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                    for ((d, x), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                        *d += x * y;
                    }
                    for ((d, x), y) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(av) {
                        *d += x * y;
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                    let to_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                    for ((d, x), &pick) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(&to_a) {
                        if pick {
                            *d += x;
                        }
                    }
                    for ((d, x), &pick) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(&to_a) {
                        if !pick {
                            *d += x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += c * x;
                    }
                }
                Op::Offset(a) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Tanh(a) => {
                    for ((d, x), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(&node.value) {
                        *d += x * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    for ((d, x), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(&node.value) {
                        *d += x * y;
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    for ((d, x), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(&node.value) {
                        *d += x - y.exp() * total;
                    }
                }
                Op::Sum(a) => {
                    let len = self.node(*a).value.len();
                    acc(&mut grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Pick(a, i) => {
                    let len = self.node(*a).value.len();
                    acc(&mut grads, *a, len)[*i] += g[0];
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.node(*a).value;
                    for ((d, x), v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        if v > lo && v < hi {
                            *d += x;
                        }
                    }
                }
                Op::SumOf(vars) => {
                    for v in vars {
                        for (d, x) in acc(&mut grads, *v, g.len()).iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = g;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of a leaf; all zeros when the leaf has no path to the root.
    pub fn of(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; tape.value(v).len()],
        }
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
