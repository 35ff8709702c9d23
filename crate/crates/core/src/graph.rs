//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Shapes are validated by the model-level entry points, so
//! shape violations inside the graph are programming errors and panic.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Var {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let (n, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, m) = if b_t { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            a_t,
            self.value(b).data(),
            b_t,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[n, m], out).unwrap(),
            Op::MatMul { a, b, a_t, b_t },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = va.zip_map(vb, f).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Var {
        let (n, m) = self.dims2(a);
        let r = self.value(row);
        assert_eq!(
            r.len(),
            m,
            "row broadcast: row has {} elements, need {m}",
            r.len()
        );
        let rd = r.data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            let dst = &mut out[i * m..(i + 1) * m];
            if mul {
                dst.iter_mut().zip(rd).for_each(|(x, y)| *x *= y);
            } else {
                dst.iter_mut().zip(rd).for_each(|(x, y)| *x += y);
            }
        }
        let rg = self.rg(a) || self.rg(row);
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        self.push(Tensor::new(&[n, m], out).unwrap(), op, rg)
    }

    /// `a (n, m) + row (m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, false)
    }

    /// `a (n, m) * row (m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Row-wise normalisation to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (n, m) = self.dims2(x);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * m];
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, m], out).unwrap(),
            Op::LayerNorm { x, rstd },
            rg,
        )
    }

    /// Row-wise softmax. Entries of `-inf` (or very negative) get weight 0.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, m) = self.dims2(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims2(x);
        assert!(start + len <= m, "slice_cols out of range");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, len], out).unwrap(),
            Op::SliceCols { x, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims2(p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&[n, total], out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let xd = self.value(x).data();
        let out: Vec<f64> = index.iter().map(|&j| xd[j]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Gather { x, index },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *a_t { va.shape()[0] } else { va.shape()[1] };
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    if *a_t {
                        gemm(k, m, n, vb.data(), *b_t, gd, true, &mut da, 0.0);
                    } else {
                        gemm(n, m, k, gd, false, vb.data(), !*b_t, &mut da, 0.0);
                    }
                    acc(grads, *a, Tensor::new(va.shape(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    if *b_t {
                        gemm(m, n, k, gd, true, va.data(), *a_t, &mut db, 0.0);
                    } else {
                        gemm(k, n, m, va.data(), !*a_t, gd, false, &mut db, 0.0);
                    }
                    acc(grads, *b, Tensor::new(vb.shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc_if(grads, *a, || g.mul(self.value(*b)).unwrap());
                self.acc_if(grads, *b, || g.mul(self.value(*a)).unwrap());
            }
            Op::AddRow(a, row) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *row, || {
                    let vr = self.value(*row);
                    let m = vr.len();
                    let mut d = vec![0.0; m];
                    for chunk in gd.chunks(m) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    Tensor::new(vr.shape(), d).unwrap()
                });
            }
            Op::MulRow(a, row) => {
                let va = self.value(*a);
                let vr = self.value(*row);
                let m = vr.len();
                self.acc_if(grads, *a, || {
                    let mut d = gd.to_vec();
                    for chunk in d.chunks_mut(m) {
                        chunk.iter_mut().zip(vr.data()).for_each(|(x, y)| *x *= y);
                    }
                    Tensor::new(va.shape(), d).unwrap()
                });
                self.acc_if(grads, *row, || {
                    let mut d = vec![0.0; m];
                    for (gc, ac) in gd.chunks(m).zip(va.data().chunks(m)) {
                        for j in 0..m {
                            d[j] += gc[j] * ac[j];
                        }
                    }
                    Tensor::new(vr.shape(), d).unwrap()
                });
            }
            Op::Scale(a, s) => self.acc_if(grads, *a, || g.scale(*s)),
            Op::AddScalar(a) => self.acc_if(grads, *a, || g.clone()),
            Op::Square(a) => self.acc_if(grads, *a, || {
                g.zip_map(self.value(*a), |gg, x| 2.0 * gg * x).unwrap()
            }),
            Op::Silu(a) => self.acc_if(grads, *a, || {
                g.zip_map(self.value(*a), |gg, x| {
                    let s = sigmoid(x);
                    gg * (s + x * s * (1.0 - s))
                })
                .unwrap()
            }),
            Op::Gelu(a) => self.acc_if(grads, *a, || {
                g.zip_map(self.value(*a), |gg, x| gg * gelu_grad(x))
                    .unwrap()
            }),
            Op::Softplus(a) => self.acc_if(grads, *a, || {
                g.zip_map(self.value(*a), |gg, x| gg * sigmoid(x)).unwrap()
            }),
            Op::LayerNorm { x, rstd } => self.acc_if(grads, *x, || {
                let y = node.value.data();
                let m = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for (i, r) in rstd.iter().enumerate() {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &gd[i * m..(i + 1) * m];
                    let mean_g = gr.iter().sum::<f64>() / m as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        d[i * m + j] = r * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                Tensor::new(node.value.shape(), d).unwrap()
            }),
            Op::Softmax(x) => self.acc_if(grads, *x, || {
                let y = node.value.data();
                let m = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(m).zip(y.chunks(m)).zip(gd.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Tensor::new(node.value.shape(), d).unwrap()
            }),
            Op::SliceCols { x, start } => self.acc_if(grads, *x, || {
                let (n, m) = self.dims2(*x);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                Tensor::new(&[n, m], d).unwrap()
            }),
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc_if(grads, p, || {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        Tensor::new(&[n, w], d).unwrap()
                    });
                    offset += w;
                }
            }
            Op::Gather { x, index } => self.acc_if(grads, *x, || {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&j, &gv) in index.iter().zip(gd) {
                    dd[j] += gv;
                }
                d
            }),
            Op::Reshape(x) => self.acc_if(grads, *x, || g.clone().reshape(self.shape(*x)).unwrap()),
            Op::Sum(x) => {
                let gv = gd[0];
                self.acc_if(grads, *x, || Tensor::full(self.shape(*x), gv))
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.rg(v) {
            acc(grads, v, f());
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t).unwrap(),
        slot @ None => *slot = Some(t),
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of the right shape when `v` did not
    /// influence the root.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn take(&mut self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
