//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records every operation together with the value it produced.
//! `backward` walks the tape in reverse and accumulates gradients for every
//! node that (transitively) depends on a leaf marked `requires_grad`.
//! A tape built with [`Tape::inference`] records no backward information.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{inverse_perm, permute, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    ChannelBias(Var, Var),
    LastBias(Var, Var),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    Slice {
        x: Var,
        dim: usize,
        start: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Expand0(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    Softmax(Var),
    Warp {
        field: Var,
        flow: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    MeanAll(Var),
    MeanSpatial(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bound: HashMap<usize, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    /// Binds an externally owned parameter once per tape; repeated binds of
    /// the same `id` return the same variable.
    pub fn bind(&mut self, id: usize, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(value.clone(), trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add: shape mismatch");
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub: shape mismatch");
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul: shape mismatch");
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|x| x * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects a one-element tensor");
        let c = self.value(s).data()[0];
        let y = self.value(x).map(|v| c * v);
        self.push(y, Op::MulScalar(x, s), &[x, s])
    }

    /// `x[n, c, ...] + b[c]` or `x[n, c, ...] + b[n, c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b);
        let per_item = match bv.shape() {
            [k] if *k == c => false,
            [m, k] if *m == n && *k == c => true,
            s => panic!("channel_bias: bias {s:?} incompatible with {xs:?}"),
        };
        let mut y = self.value(x).clone();
        {
            let bd = self.value(b).data().to_vec();
            let yd = y.data_mut();
            for i in 0..n {
                for j in 0..c {
                    let bias = if per_item { bd[i * c + j] } else { bd[j] };
                    let base = (i * c + j) * inner;
                    for v in &mut yd[base..base + inner] {
                        *v += bias;
                    }
                }
            }
        }
        self.push(y, Op::ChannelBias(x, b), &[x, b])
    }

    /// `x[..., k] + b[k]`.
    pub fn last_bias(&mut self, x: Var, b: Var) -> Var {
        let k = *self.shape(x).last().expect("last_bias on rank-0");
        assert_eq!(self.shape(b), &[k], "last_bias: bias shape");
        let bd = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(k) {
            for (v, &bb) in row.iter_mut().zip(&bd) {
                *v += bb;
            }
        }
        self.push(y, Op::LastBias(x, b), &[x, b])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { x, lo, hi }, &[x])
    }

    // ---- reductions ----------------------------------------------------

    pub fn mean_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::MeanAll(x), &[x])
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[2..].iter().product();
        let inv = T::one() / T::of(inner as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&[xs[0], xs[1]], data).expect("mean_spatial shape");
        self.push(y, Op::MeanSpatial(x), &[x])
    }

    /// Normalizes `[n, C, ...]` to zero mean and unit variance over each of
    /// `groups` channel groups per item; no affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2 && groups > 0 && xs[1] % groups == 0, "group_norm: {groups} groups for {xs:?}");
        let size: usize = xs[1..].iter().product::<usize>() / groups;
        let eps = T::of(1e-5);
        let mut data = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(xs[0] * groups);
        for chunk in data.chunks_mut(size) {
            let n = T::of(size as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let y = Tensor::from_vec(&xs, data).expect("group_norm shape");
        self.push(y, Op::GroupNorm { x, groups, inv_std }, &[x])
    }

    /// Mean squared error between two equally shaped variables.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- shape -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Var {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let first = &shapes[0];
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[dim] = shapes.iter().map(|s| s[dim]).sum();
        for s in &shapes {
            assert!(
                s.len() == first.len() && s[..dim] == first[..dim] && s[dim + 1..] == first[dim + 1..],
                "concat: incompatible shapes {shapes:?} along {dim}"
            );
        }
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let chunk = s[dim] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let y = Tensor::from_vec(&out_shape, data).expect("concat shape");
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(start + len <= xs[dim], "slice out of range");
        let outer: usize = xs[..dim].iter().product();
        let inner: usize = xs[dim + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[dim] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[dim] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let y = Tensor::from_vec(&out_shape, data).expect("slice shape");
        self.push(y, Op::Slice { x, dim, start }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let y = permute(self.value(x), perm);
        self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading axis.
    pub fn expand0(&mut self, x: Var, n: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[0], 1, "expand0 expects a leading axis of 1");
        let mut shape = xs.clone();
        shape[0] = n;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let y = Tensor::from_vec(&shape, data).expect("expand shape");
        self.push(y, Op::Expand0(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + yy) * 2 * w + xx] = src[(p * h + yy / 2) * w + xx / 2];
                }
            }
        }
        let y = Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], data).expect("upsample shape");
        self.push(y, Op::Upsample2(x), &[x])
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[..., k] x w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let a_shape = self.shape(a).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *a_shape.last().unwrap();
        assert!(ws.len() == 2 && ws[0] == k, "matmul: {a_shape:?} x {ws:?}");
        let n = ws[1];
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = a_shape;
        *shape.last_mut().unwrap() = n;
        let y = Tensor::from_vec(&shape, out).expect("matmul shape");
        self.push(y, Op::MatMul(a, w), &[a, w])
    }

    /// Batched product `a[b, m, k] x b[b, k, n]`, or `a x b^T` with `b[b, n, k]` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let asz = self.shape(a).to_vec();
        let bsz = self.shape(b).to_vec();
        let (batch, m, k) = (asz[0], asz[1], asz[2]);
        let n = if tb { bsz[1] } else { bsz[2] };
        let bk = if tb { bsz[2] } else { bsz[1] };
        assert!(bsz[0] == batch && bk == k, "bmm: {asz:?} x {bsz:?} (tb={tb})");
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let y = Tensor::from_vec(&[batch, m, n], out).expect("bmm shape");
        self.push(y, Op::Bmm { a, b, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let k = *self.shape(x).last().unwrap();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(k) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(y, Op::Softmax(x), &[x])
    }

    /// 2-D convolution, `x[n, ci, h, w]`, `w[co, ci, k, k]`, optional bias `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Bilinear backward warp of `field[n, c, h, w]` by `flow[n, 2, h, w]`
    /// (channel 0 horizontal, channel 1 vertical), clamping sample
    /// coordinates to the grid.
    pub fn warp(&mut self, field: Var, flow: Var) -> Var {
        let y = warp_forward(self.value(field), self.value(flow));
        self.push(y, Op::Warp { field, flow }, &[field, flow])
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar (single element) output.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::MulScalar(x, s) => {
                if self.needs(*s) {
                    let gs: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.acc(grads, *s, Tensor::scalar(gs));
                }
                if self.needs(*x) {
                    let c = self.value(*s).data()[0];
                    self.acc(grads, *x, g.map(|v| v * c));
                }
            }
            Op::ChannelBias(x, b) => {
                if self.needs(*b) {
                    let xs = g.shape();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let bshape = self.shape(*b).to_vec();
                    let mut gb = Tensor::zeros(&bshape);
                    let per_item = bshape.len() == 2;
                    for i in 0..n {
                        for j in 0..c {
                            let base = (i * c + j) * inner;
                            let s: T = g.data()[base..base + inner].iter().copied().sum();
                            let idx = if per_item { i * c + j } else { j };
                            gb.data_mut()[idx] += s;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *x, g);
            }
            Op::LastBias(x, b) => {
                if self.needs(*b) {
                    let k = self.value(*b).len();
                    let mut gb = Tensor::zeros(&[k]);
                    for row in g.data().chunks(k) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *x, g);
            }
            Op::Silu(x) => {
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| if xv < lo || xv > hi { T::zero() } else { gv })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gv = g.data()[0] / T::of(n as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanSpatial(x) => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[2..].iter().product();
                let inv = T::one() / T::of(inner as f64);
                let mut gx = Vec::with_capacity(xs.iter().product());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv * inv).take(inner));
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, gx).unwrap());
            }
            Op::Concat { parts, dim } => {
                let dim = *dim;
                let gs = g.shape().to_vec();
                let outer: usize = gs[..dim].iter().product();
                let inner: usize = gs[dim + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[dim];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(ps.iter().product());
                        for o in 0..outer {
                            let base = (o * gs[dim] + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&ps, data).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, dim, start } => {
                let dim = *dim;
                let xs = self.shape(*x).to_vec();
                let len = g.shape()[dim];
                let outer: usize = xs[..dim].iter().product();
                let inner: usize = xs[dim + 1..].iter().product();
                let mut gx = Tensor::zeros(&xs);
                for o in 0..outer {
                    let dst = (o * xs[dim] + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Permute { x, perm } => {
                self.acc(grads, *x, permute(&g, &inverse_perm(perm)));
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x)).unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Expand0(x) => {
                let xs = self.shape(*x).to_vec();
                let inner = self.value(*x).len();
                let mut gx = Tensor::zeros(&xs);
                for chunk in g.data().chunks(inner) {
                    for (a, &b) in gx.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut gx = Tensor::zeros(&xs);
                let gd = g.data();
                let out = gx.data_mut();
                for p in 0..nc {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            out[(p * h + yy / 2) * w + xx / 2] += gd[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MatMul(a, w) => {
                let av = self.value(*a);
                let wv = self.value(*w);
                let (k, n) = (wv.dim(0), wv.dim(1));
                let m = av.len() / k;
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, wv.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), ga).unwrap());
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gw, n as isize, 1);
                    self.acc(grads, *w, Tensor::from_vec(&[k, n], gw).unwrap());
                }
            }
            Op::Bmm { a, b, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                let n = g.dim(2);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    // ga = g * B^T, with B the logical [k, n] right operand.
                    let (rsb, csb) = if *tb { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data()[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // stored [n, k] = g^T a
                            T::gemm(n, m, k, T::one(), gi, 1, n as isize, ai, k as isize, 1, T::zero(), out, k as isize, 1);
                        } else {
                            // [k, n] = a^T g
                            T::gemm(k, m, n, T::one(), ai, 1, k as isize, gi, n as isize, 1, T::zero(), out, n as isize, 1);
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), gb).unwrap());
                }
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let y = &node.value;
                let size = y.len() / inv_std.len();
                debug_assert_eq!(inv_std.len() % groups, 0);
                let mut gx = g.clone();
                let n = T::of(size as f64);
                for ((gc, yc), &is) in gx.data_mut().chunks_mut(size).zip(y.data().chunks(size)).zip(inv_std) {
                    let mg = gc.iter().copied().sum::<T>() / n;
                    let mgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (gv, &yv) in gc.iter_mut().zip(yc) {
                        *gv = is * (*gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, gb);
                    }
                }
            }
            Op::Warp { field, flow } => {
                let (gf, gflow) = warp_backward(self.value(*field), self.value(*flow), &g);
                if self.needs(*field) {
                    self.acc(grads, *field, gf);
                }
                if self.needs(*flow) {
                    self.acc(grads, *flow, gflow);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [T]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, x: &mut [T]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            x[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, wci, k) = (w.dim(0), w.dim(1), w.dim(2));
    assert_eq!(ci, wci, "conv2d: input channels {ci} vs weight {wci}");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let ck = ci * k * k;
    let hw = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ck * hw] };
    let mut out = vec![T::zero(); n * co * hw];
    for i in 0..n {
        let xi = &x.data()[i * ci * h * wd..(i + 1) * ci * h * wd];
        let colsref: &[T] = if direct {
            xi
        } else {
            im2col(xi, ci, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        let yi = &mut out[i * co * hw..(i + 1) * co * hw];
        if let Some(b) = b {
            for (c, chunk) in yi.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        T::gemm(
            co,
            ck,
            hw,
            T::one(),
            w.data(),
            ck as isize,
            1,
            colsref,
            hw as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            yi,
            hw as isize,
            1,
        );
    }
    Tensor::from_vec(&[n, co, ho, wo], out).expect("conv2d output shape")
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>);

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(0), w.dim(2));
    let (ho, wo) = (g.dim(2), g.dim(3));
    let ck = ci * k * k;
    let hw = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ck * hw] };
    let mut dcols = vec![T::zero(); ck * hw];
    let mut gx = if need_x { Some(Tensor::zeros(x.shape())) } else { None };
    let mut gw = if need_w { Some(Tensor::zeros(w.shape())) } else { None };
    let mut gb = Tensor::zeros(&[co]);
    for i in 0..n {
        let gi = &g.data()[i * co * hw..(i + 1) * co * hw];
        for (c, chunk) in gi.chunks(hw).enumerate() {
            gb.data_mut()[c] += chunk.iter().copied().sum::<T>();
        }
        if let Some(gw) = gw.as_mut() {
            let xi = &x.data()[i * ci * h * wd..(i + 1) * ci * h * wd];
            let colsref: &[T] = if direct {
                xi
            } else {
                im2col(xi, ci, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            T::gemm(
                co,
                hw,
                ck,
                T::one(),
                gi,
                hw as isize,
                1,
                colsref,
                1,
                hw as isize,
                T::one(),
                gw.data_mut(),
                ck as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxi = &mut gx.data_mut()[i * ci * h * wd..(i + 1) * ci * h * wd];
            if direct {
                T::gemm(ck, co, hw, T::one(), w.data(), 1, ck as isize, gi, hw as isize, 1, T::zero(), gxi, hw as isize, 1);
            } else {
                T::gemm(ck, co, hw, T::one(), w.data(), 1, ck as isize, gi, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                col2im(&dcols, ci, h, wd, k, stride, pad, gxi);
            }
        }
    }
    (gx, gw, gb)
}

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Scalar>(px: usize, py: usize, u: T, v: T, w: usize, h: usize) -> Tap<T> {
    let max_x = T::of((w - 1) as f64);
    let max_y = T::of((h - 1) as f64);
    let rx = T::of(px as f64) + u;
    let ry = T::of(py as f64) + v;
    let sx = rx.max(T::zero()).min(max_x);
    let sy = ry.max(T::zero()).min(max_y);
    let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: sx - T::of(x0 as f64),
        fy: sy - T::of(y0 as f64),
        free_x: rx >= T::zero() && rx <= max_x,
        free_y: ry >= T::zero() && ry <= max_y,
    }
}

pub(crate) fn warp_forward<T: Scalar>(field: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (field.dim(0), field.dim(1), field.dim(2), field.dim(3));
    assert_eq!(flow.shape(), &[n, 2, h, w], "warp: flow shape vs field {:?}", field.shape());
    let mut out = vec![T::zero(); field.len()];
    let plane = h * w;
    for i in 0..n {
        let fl = &flow.data()[i * 2 * plane..(i + 1) * 2 * plane];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let t = tap(px, py, fl[p], fl[plane + p], w, h);
                let one = T::one();
                for ch in 0..c {
                    let src = &field.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    let a = src[t.y0 * w + t.x0];
                    let b = src[t.y0 * w + t.x1];
                    let cc = src[t.y1 * w + t.x0];
                    let d = src[t.y1 * w + t.x1];
                    out[(i * c + ch) * plane + p] =
                        (one - t.fy) * ((one - t.fx) * a + t.fx * b) + t.fy * ((one - t.fx) * cc + t.fx * d);
                }
            }
        }
    }
    Tensor::from_vec(field.shape(), out).unwrap()
}

fn warp_backward<T: Scalar>(field: &Tensor<T>, flow: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (field.dim(0), field.dim(1), field.dim(2), field.dim(3));
    let plane = h * w;
    let mut gf = Tensor::zeros(field.shape());
    let mut gflow = Tensor::zeros(flow.shape());
    let one = T::one();
    for i in 0..n {
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let fbase = i * 2 * plane;
                let t = tap(px, py, flow.data()[fbase + p], flow.data()[fbase + plane + p], w, h);
                let mut du = T::zero();
                let mut dv = T::zero();
                for ch in 0..c {
                    let off = (i * c + ch) * plane;
                    let gv = g.data()[off + p];
                    let src = &field.data()[off..off + plane];
                    let a = src[t.y0 * w + t.x0];
                    let b = src[t.y0 * w + t.x1];
                    let cc = src[t.y1 * w + t.x0];
                    let d = src[t.y1 * w + t.x1];
                    let dst = &mut gf.data_mut()[off..off + plane];
                    dst[t.y0 * w + t.x0] += gv * (one - t.fy) * (one - t.fx);
                    dst[t.y0 * w + t.x1] += gv * (one - t.fy) * t.fx;
                    dst[t.y1 * w + t.x0] += gv * t.fy * (one - t.fx);
                    dst[t.y1 * w + t.x1] += gv * t.fy * t.fx;
                    du += gv * ((one - t.fy) * (b - a) + t.fy * (d - cc));
                    dv += gv * ((one - t.fx) * (cc - a) + t.fx * (d - b));
                }
                if t.free_x {
                    gflow.data_mut()[fbase + p] = du;
                }
                if t.free_y {
                    gflow.data_mut()[fbase + plane + p] = dv;
                }
            }
        }
    }
    (gf, gflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` around `x`, compared against the tape gradient.
    fn check_grad(x: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::inference();
                let v = t.leaf(xp, false);
                let o = build(&mut t, v);
                t.value(o).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let w = tape.constant(rand_t(tape.shape(y), seed));
        let p = tape.mul(y, w);
        tape.mean_all(p)
    }

    #[test]
    fn group_norm_gradients_and_moments() {
        check_grad(&rand_t(&[2, 4, 3, 3], 8), |t, x| {
            let y = t.group_norm(x, 2);
            weighted_sum(t, y, 9)
        });
        let mut t = Tape::<f64>::inference();
        let x = t.constant(rand_t(&[2, 4, 3, 3], 10).map(|v| 3.0 * v + 1.0));
        let y = t.group_norm(x, 2);
        for chunk in t.value(y).data().chunks(18) {
            let m = chunk.iter().sum::<f64>() / 18.0;
            let v = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv2d_gradients() {
        let w = rand_t(&[3, 2, 3, 3], 1);
        let b = rand_t(&[3], 2);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check_grad(&rand_t(&[2, 2, 5, 6], 3), |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, wv, Some(bv), stride, pad);
                weighted_sum(t, y, 4)
            });
            check_grad(&w, |t, wv| {
                let x = t.constant(rand_t(&[2, 2, 5, 6], 3));
                let y = t.conv2d(x, wv, None, stride, pad);
                weighted_sum(t, y, 4)
            });
        }
    }

    #[test]
    fn attention_chain_gradients() {
        check_grad(&rand_t(&[2, 3, 4], 5), |t, x| {
            let w = t.constant(rand_t(&[4, 4], 6));
            let q = t.matmul(x, w);
            let s = t.bmm(q, x, true);
            let a = t.softmax(s);
            let o = t.bmm(a, x, false);
            let sl = t.silu(o);
            weighted_sum(t, sl, 7)
        });
        check_grad(&rand_t(&[4, 3], 8), |t, w| {
            let x = t.constant(rand_t(&[2, 3, 4], 5));
            let q = t.matmul(x, w);
            let p = t.permute(q, &[2, 0, 1]);
            weighted_sum(t, p, 9)
        });
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(&rand_t(&[1, 2, 2, 3], 10), |t, x| {
            let e = t.expand0(x, 3);
            let u = t.upsample2(e);
            let s = t.slice(u, 1, 1, 1);
            let c = t.concat(&[s, u], 1);
            let m = t.mean_spatial(c);
            weighted_sum(t, m, 11)
        });
        check_grad(&rand_t(&[2, 3], 12), |t, b| {
            let x = t.constant(rand_t(&[2, 3, 2, 2], 13));
            let y = t.channel_bias(x, b);
            let z = t.clamp(y, -0.5, 0.5);
            weighted_sum(t, z, 14)
        });
    }

    #[test]
    fn warp_gradients_wrt_field_and_flow() {
        let mut flow = rand_t(&[1, 2, 5, 6], 20);
        // Keep sample points inside the grid and away from integer coordinates.
        for v in flow.data_mut() {
            *v = 0.3 * v.tanh() + 0.17;
        }
        check_grad(&rand_t(&[1, 2, 5, 6], 21), |t, f| {
            let fl = t.constant(flow.clone());
            let y = t.warp(f, fl);
            weighted_sum(t, y, 22)
        });
        let field = rand_t(&[1, 2, 5, 6], 21);
        let mut tape = Tape::new();
        let fv = tape.constant(field.clone());
        let flv = tape.leaf(flow.clone(), true);
        let y = tape.warp(fv, flv);
        let out = weighted_sum(&mut tape, y, 22);
        let g = tape.backward(out).get(flv).unwrap().clone();
        let h = 1e-6;
        // Interior pixels only, where no sample coordinate is clamped.
        for py in 1..4 {
            for px in 1..5 {
                for ch in 0..2 {
                    let idx = ch * 30 + py * 6 + px;
                    let eval = |d: f64| {
                        let mut fp = flow.clone();
                        fp.data_mut()[idx] += d;
                        let mut t = Tape::inference();
                        let a = t.constant(field.clone());
                        let b = t.constant(fp);
                        let y = t.warp(a, b);
                        let o = weighted_sum(&mut t, y, 22);
                        t.value(o).data()[0]
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = g.data()[idx];
                    assert!((a - num).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {num}");
                }
            }
        }
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.mean_all(x);
        assert!(tape.backward(y).get(x).is_none());
    }
}
