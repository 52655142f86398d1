//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are pulled from a [`ParamStore`] by name and cached, so a
//! weight shared by several views becomes a single leaf whose gradient
//! accumulates all uses. Frozen parameters enter as constants and never
//! receive a gradient.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Broadcast(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Resize(Var),
    AvgPool(Var, usize),
    UpNearest(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which stored parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    /// Everything except parameters whose name starts with one of these prefixes.
    Except(Vec<String>),
    Nothing,
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Except(prefixes) => !prefixes.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Nothing => false,
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    trainable: Trainable,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout disabled, every parameter trainable.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: Trainable::All,
            dropout_rng: None,
        }
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    /// Enable training mode; dropout masks are drawn from `rng`.
    pub fn training(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, rg)
    }

    /// Look up a stored parameter. Repeated calls return the same leaf.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let rg = self.trainable.allows(name);
        let v = self.push(value, Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient even though it is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// Numpy-style broadcast (right-aligned, size-1 or missing axes expand).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let map = broadcast_map(self.shape(x), shape);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        self.unary(x, Tensor::new(shape, data), Op::Broadcast(x))
    }

    /// Elementwise sum with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast(b, &shape);
        self.add(a, b)
    }

    /// Elementwise product with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast(b, &shape);
        self.mul(a, b)
    }

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.binary(a, b, Tensor::new(&shape, out), Op::MatMul(a, b))
    }

    /// Batched product `a[B,m,k] x b[B,k,n]`, or `a x b^T` with `b[B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} x {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm inner dims {sa:?} x {sb:?}");
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let bstr = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                (k as isize, 1),
                &bd[i * k * n..],
                bstr,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.binary(a, b, Tensor::new(&[bs, m, n], out), Op::Bmm { a, b, trans_b })
    }

    /// 2-D convolution of `x[N,C,H,W]` with `w[O,C,k,k]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let mut out = vec![0.0; geo.n * geo.o * geo.ohw()];
        let mut cols = vec![0.0; geo.ckk() * geo.ohw()];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for s in 0..geo.n {
            geo.im2col(&xd[s * geo.chw()..(s + 1) * geo.chw()], &mut cols);
            let dst = &mut out[s * geo.o * geo.ohw()..(s + 1) * geo.o * geo.ohw()];
            gemm(
                geo.o,
                geo.ckk(),
                geo.ohw(),
                wd,
                (geo.ckk() as isize, 1),
                &cols,
                (geo.ohw() as isize, 1),
                dst,
                false,
            );
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(geo.ohw()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let value = Tensor::new(&[geo.n, geo.o, geo.oh, geo.ow], out);
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|b| self.requires_grad(b));
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x).resize_bilinear(h, w);
        self.unary(x, v, Op::Resize(x))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let v = self.value(x).avg_pool(factor);
        self.unary(x, v, Op::AvgPool(x, factor))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let v = self.value(x).upsample_nearest(factor);
        self.unary(x, v, Op::UpNearest(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.unary(x, v, Op::Ln(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        self.unary(x, v, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(t.shape(), out);
        self.unary(x, v, Op::LogSoftmax(x))
    }

    /// Normalization to zero mean and unit variance over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let v = Tensor::new(t.shape(), out);
        self.unary(x, v, Op::LayerNorm { x, inv_std })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.unary(x, v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = permute(self.value(x), axes);
        self.unary(x, v, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat(&tensors, axis);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(v, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = slice(self.value(x), axis, start, len);
        self.unary(x, v, Op::Slice { x, axis, start })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = sum_axis(self.value(x), axis);
        self.unary(x, v, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    /// Rows of `table[K, d]` selected by index, giving `[rows.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let v = Tensor::new(&[rows.len(), d], out);
        self.unary(table, v, Op::GatherRows { table, rows: rows.to_vec() })
    }

    /// One entry per row of `x[n, K]`: `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let t = self.value(x);
        let k = t.shape()[1];
        assert_eq!(t.shape()[0], cols.len());
        let out = cols.iter().enumerate().map(|(i, &c)| t.data()[i * k + c]).collect();
        let v = Tensor::new(&[cols.len()], out);
        self.unary(x, v, Op::Pick { x, cols: cols.to_vec() })
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = shape.iter().product();
        let rng = self.dropout_rng.as_mut().expect("training mode");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(&shape, mask));
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for (name, &v) in &self.params {
            if self.nodes[v.0].requires_grad {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                by_param.insert(name.clone(), g);
            }
        }
        Grads {
            by_var: grads,
            by_param,
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.requires_grad(*b) {
                    let out = &node.value;
                    let gb = Tensor::from_fn(bv.shape(), |k| {
                        -g.data()[k] * out.data()[k] / bv.data()[k]
                    });
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => self.accum(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.clone().reshape(&s));
            }
            Op::Broadcast(x) => {
                let xs = self.value(*x).shape().to_vec();
                let map = broadcast_map(&xs, g.shape());
                let mut acc = vec![0.0; self.value(*x).numel()];
                for (k, &src) in map.iter().enumerate() {
                    acc[src] += g.data()[k];
                }
                self.accum(grads, *x, Tensor::new(&xs, acc));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k.max(1);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), &mut ga, false);
                    self.accum(grads, *a, Tensor::new(av.shape(), ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, false);
                    self.accum(grads, *b, Tensor::new(bv.shape(), gb));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        // dA = dC * B^T, where B is k x n (or stored n x k when transposed)
                        let bstr = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        gemm(m, n, k, &gd[s * m * n..], (n as isize, 1), &bd[s * k * n..], bstr, &mut ga[s * m * k..(s + 1) * m * k], false);
                    }
                    self.accum(grads, *a, Tensor::new(av.shape(), ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // dB[n x k] = dC^T * A
                            gemm(n, m, k, &gd[s * m * n..], (1, n as isize), &ad[s * m * k..], (k as isize, 1), dst, false);
                        } else {
                            // dB[k x n] = A^T * dC
                            gemm(k, m, n, &ad[s * m * k..], (1, k as isize), &gd[s * m * n..], (n as isize, 1), dst, false);
                        }
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape(), gb));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::Resize(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                self.accum(grads, *x, g.resize_bilinear_adjoint(h, w));
            }
            Op::AvgPool(x, factor) => {
                let xv = self.value(*x);
                let (_, h, w) = xv.planes_hw();
                let (fy, fx) = ((*factor).min(h).max(1), (*factor).min(w).max(1));
                let (oh, ow) = (h / fy, w / fx);
                let norm = 1.0 / (fy * fx) as f64;
                let gd = g.data();
                let gx = Tensor::from_fn(xv.shape(), |k| {
                    let p = k / (h * w);
                    let (y, xx) = ((k % (h * w)) / w, k % w);
                    gd[p * oh * ow + (y / fy) * ow + xx / fx] * norm
                });
                self.accum(grads, *x, gx);
            }
            Op::UpNearest(x, factor) => {
                let xv = self.value(*x);
                let (planes, h, w) = xv.planes_hw();
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; xv.numel()];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[p * h * w + (y / factor) * w + xx / factor] +=
                                g.data()[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(xv.shape(), gx));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 });
                self.accum(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |d, s| d * s * (1.0 - s));
                self.accum(grads, *x, gx);
            }
            Op::Ln(x) => {
                let gx = g.zip_map(self.value(*x), |d, v| d / v);
                self.accum(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), gx));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), gx));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for (r, ((gr, yr), out)) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), gx));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accum(grads, *x, permute(g, &inv));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.requires_grad(p) {
                        self.accum(grads, p, slice(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (full, len) = (xs[*axis], g.shape()[*axis]);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accum(grads, *x, Tensor::new(&xs, gx));
            }
            Op::SumAll(x) => {
                let s = self.value(*x).shape();
                self.accum(grads, *x, Tensor::full(s, g.item()));
            }
            Op::SumAxis { x, axis } => {
                let xs = self.value(*x).shape().to_vec();
                let inner: usize = xs[axis + 1..].iter().product();
                let n = xs[*axis];
                let gx = Tensor::from_fn(&xs, |k| {
                    let o = k / (n * inner);
                    let i = k % inner;
                    g.data()[o * inner + i]
                });
                self.accum(grads, *x, gx);
            }
            Op::GatherRows { table, rows } => {
                let ts = self.value(*table).shape().to_vec();
                let d = ts[1];
                let mut gt = vec![0.0; ts[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] += g.data()[i * d + j];
                    }
                }
                self.accum(grads, *table, Tensor::new(&ts, gt));
            }
            Op::Pick { x, cols } => {
                let xs = self.value(*x).shape().to_vec();
                let k = xs[1];
                let mut gx = vec![0.0; xs[0] * k];
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * k + c] += g.data()[i];
                }
                self.accum(grads, *x, Tensor::new(&xs, gx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(xv.shape(), wv.shape(), stride, pad);
        let (ohw, ckk) = (geo.ohw(), geo.ckk());
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gw = vec![0.0; geo.o * ckk];
        let mut gx = vec![0.0; if need_x { xv.numel() } else { 0 }];
        let mut cols = vec![0.0; ckk * ohw];
        for s in 0..geo.n {
            let gs = &g.data()[s * geo.o * ohw..(s + 1) * geo.o * ohw];
            if need_w {
                geo.im2col(&xv.data()[s * geo.chw()..(s + 1) * geo.chw()], &mut cols);
                // dW[o x ckk] += dOut[o x ohw] * cols^T
                gemm(geo.o, ohw, ckk, gs, (ohw as isize, 1), &cols, (1, ohw as isize), &mut gw, true);
            }
            if need_x {
                // dcols[ckk x ohw] = W^T * dOut
                gemm(ckk, geo.o, ohw, wv.data(), (1, ckk as isize), gs, (ohw as isize, 1), &mut cols, false);
                geo.col2im(&cols, &mut gx[s * geo.chw()..(s + 1) * geo.chw()]);
            }
        }
        if need_x {
            self.accum(grads, x, Tensor::new(xv.shape(), gx));
        }
        if need_w {
            self.accum(grads, w, Tensor::new(wv.shape(), gw));
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = vec![0.0; geo.o];
                for s in 0..geo.n {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        let off = s * geo.o * ohw + oc * ohw;
                        *gbv += g.data()[off..off + ohw].iter().sum::<f64>();
                    }
                }
                self.accum(grads, b, Tensor::new(&[geo.o], gb));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_last(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(t.shape(), out)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3]);
        let k = ws[2];
        let oh = (xs[2] + 2 * pad - k) / stride + 1;
        let ow = (xs[3] + 2 * pad - k) / stride + 1;
        Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Iterate `(row of cols, output index, input index)` for valid taps.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let ohw = self.ohw();
        self.for_each_tap(|row, o, i| cols[row * ohw + o] = x[i]);
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let ohw = self.ohw();
        self.for_each_tap(|row, o, i| x[i] += cols[row * ohw + o]);
    }
}

/// For every element of a tensor of shape `to`, the flat index of the
/// element of shape `from` it is broadcast from.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    assert!(from.len() <= to.len(), "cannot broadcast {from:?} to {to:?}");
    let off = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for i in (0..from.len()).rev() {
        let (f, t) = (from[i], to[i + off]);
        assert!(f == t || f == 1, "cannot broadcast {from:?} to {to:?}");
        src_strides[i + off] = if f == 1 { 0 } else { stride };
        stride *= f;
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            src -= src_strides[d] * to[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn permute(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(axes.len(), shape.len());
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let new_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    let data = t.data();
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..new_shape.len()).rev() {
            idx[d] += 1;
            src += new_strides[d];
            if idx[d] < new_shape[d] {
                break;
            }
            src -= new_strides[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&new_shape, out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let s = t.shape();
    assert!(start + len <= s[axis], "slice out of range");
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * s[axis] * inner + start * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

pub fn sum_axis(t: &Tensor, axis: usize) -> Tensor {
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let n = s[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += t.data()[base + i];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}
