//! Reverse-mode differentiation over batched 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape by reference to a [`ParamStore`]; [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every stored parameter.

use crate::error::{Error, Result};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumCols(Var),
    MulCol(Var, Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    BroadcastRows(Var),
    Im2col {
        input: Var,
        batch: usize,
        time: usize,
        kernel: usize,
        stride: usize,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut c = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta, false, tb, false, &mut c, 1.0, 0.0);
        self.push(Op::MatMul(a, b), c)
    }

    /// `a` (r×c) plus the row vector `b` (1×c) on every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((tb.rows, tb.cols), (1, ta.cols), "bias shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        self.push(Op::AddBias(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        assert!(start + width <= t.cols, "slice out of range");
        let mut out = Tensor::zeros(t.rows, width);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + width]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an r×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::from_vec(t.rows, 1, data))
    }

    /// Scale every row of `a` (r×c) by the matching entry of `b` (r×1).
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((tb.rows, tb.cols), (ta.rows, 1), "column shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            let s = tb.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(Op::MulCol(a, b), out)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), f64::min);
        self.push(Op::Min(a, b), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Repeat the 1×c row `a` into an n×c matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(n, t.cols, data);
        self.push(Op::BroadcastRows(a), out)
    }

    /// Unfold `batch` sequences of `time` rows (stacked as `(batch·time)×ch`)
    /// into convolution patches `(batch·out_len)×(kernel·ch)`.
    pub fn im2col(&mut self, input: Var, batch: usize, time: usize, kernel: usize, stride: usize) -> Var {
        let t = self.value(input);
        assert_eq!(t.rows, batch * time, "im2col row count");
        assert!(kernel <= time && stride > 0, "im2col geometry");
        let ch = t.cols;
        let out_len = (time - kernel) / stride + 1;
        let mut out = Tensor::zeros(batch * out_len, kernel * ch);
        for b in 0..batch {
            for l in 0..out_len {
                let row = out.row_mut(b * out_len + l);
                for k in 0..kernel {
                    row[k * ch..(k + 1) * ch].copy_from_slice(t.row(b * time + l * stride + k));
                }
            }
        }
        self.push(
            Op::Im2col {
                input,
                batch,
                time,
                kernel,
                stride,
            },
            out,
        )
    }

    /// Reinterpret the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        self.push(Op::Reshape(a), out)
    }

    /// Gradient of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::DimensionMismatch {
                what: "loss".into(),
                expected: 1,
                found: self.value(loss).len(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm(&g, false, tb, true, &mut ga, 1.0, 0.0);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta, true, &g, false, &mut gb, 1.0, 0.0);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, map(&g, |x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut grads, *a, zip(&g, y, |gx, yx| gx * (1.0 - yx * yx)));
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut grads, *a, zip(&g, y, |gx, yx| gx * yx));
                }
                Op::Square(a) => {
                    let ga = zip(&g, self.value(*a), |gx, x| 2.0 * gx * x);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ta = self.value(*a);
                    let gv = g.item();
                    acc(&mut grads, *a, Tensor::from_vec(ta.rows, ta.cols, vec![gv; ta.len()]));
                }
                Op::SumCols(a) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        ga.row_mut(r).fill(g.data[r]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MulCol(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Tensor::zeros(tb.rows, 1);
                    for r in 0..ta.rows {
                        let s = tb.data[r];
                        gb.data[r] = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    for k in 0..g.len() {
                        if ta.data[k] <= tb.data[k] {
                            ga.data[k] = g.data[k];
                        } else {
                            gb.data[k] = g.data[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip(&g, self.value(*a), |gx, x| if x < *lo || x > *hi { 0.0 } else { gx });
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let mut ga = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in ga.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Im2col {
                    input,
                    batch,
                    time,
                    kernel,
                    stride,
                } => {
                    let ta = self.value(*input);
                    let ch = ta.cols;
                    let out_len = (time - kernel) / stride + 1;
                    let mut ga = Tensor::zeros(ta.rows, ch);
                    for b in 0..*batch {
                        for l in 0..out_len {
                            let row = g.row(b * out_len + l);
                            for k in 0..*kernel {
                                let dst = ga.row_mut(b * time + l * stride + k);
                                for (d, s) in dst.iter_mut().zip(&row[k * ch..(k + 1) * ch]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Reshape(a) => {
                    let ta = self.value(*a);
                    acc(&mut grads, *a, Tensor::from_vec(ta.rows, ta.cols, g.data));
                }
            }
        }
        Ok(out)
    }
}
