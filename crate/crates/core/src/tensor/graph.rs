use super::kernels::{
    bilinear_taps, broadcast_strides, col2im, for_each_broadcast, im2col, split_axis, ConvGeom,
};
use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::{self, ENGINE};

const GN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    MeanHw(Var),
    ChannelMean(Var),
    ChannelMax(Var, Vec<u32>),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var, usize),
    Upsample(Var, usize),
    AvgPool(Var, usize),
    Sum(Var),
    Dot(Var, Tensor<T>),
    /// Scalar loss whose gradient w.r.t. the input was computed in the
    /// forward pass.
    Custom(Var, Tensor<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar w.r.t. every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, msg: String) -> Error {
    Error::invalid(format!("{op}: {msg}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wci}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", format!("bias shape {:?} != [{co}]", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} too large for {h}x{wd}")))?;
        let (k, p) = (geom.k(), geom.p());
        let mut out = Tensor::zeros(&[n, co, geom.ho, geom.wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            exec::for_each_chunk(ENGINE, out.data_mut(), co * p, |i, y| {
                let xs = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                if geom.is_pointwise() {
                    gemm(false, false, co, p, k, T::one(), wv, xs, T::zero(), y);
                } else {
                    let mut cols = vec![T::zero(); k * p];
                    im2col(&geom, xs, &mut cols);
                    gemm(false, false, co, p, k, T::one(), wv, &cols, T::zero(), y);
                }
                if let Some(bv) = bv {
                    for (c, row) in y.chunks_mut(p).enumerate() {
                        for v in row {
                            *v += bv[c];
                        }
                    }
                }
            });
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", "affine parameters must have shape [C]".into()));
        }
        let per = c / groups * h * w;
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![T::zero(); n * groups];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xv.len()];
        let m = T::of(per as f64);
        for ng in 0..n * groups {
            let seg = &xv[ng * per..(ng + 1) * per];
            let mu = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / m;
            let rs = T::one() / (var + T::of(GN_EPS)).sqrt();
            mean[ng] = mu;
            rstd[ng] = rs;
            let g = ng % groups;
            for (j, (o, &v)) in out[ng * per..(ng + 1) * per].iter_mut().zip(seg).enumerate() {
                let ch = g * (c / groups) + j / hw;
                *o = (v - mu) * rs * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    fn broadcast_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err(op, format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}"))),
            })
            .collect()
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let out_shape = self.broadcast_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| if mul { x * y } else { x + y })
                .collect();
            Tensor::from_vec(&out_shape, data)?
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut out = Tensor::zeros(&out_shape);
            let (ad, bd) = (av.data(), bv.data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                od[o] = if mul { ad[i] * bd[j] } else { ad[i] + bd[j] };
            });
            out
        };
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(out, op, ng))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with broadcasting over size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range")));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", format!("shape {s:?} incompatible with {base:?}")));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Global average pool `[N,C,H,W] → [N,C,1,1]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanHw(x), ng))
    }

    /// Mean over channels `[N,C,H,W] → [N,1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let cf = T::of(c as f64);
        for i in 0..n {
            for ch in 0..c {
                let src = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (o, &v) in out[i * hw..(i + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / cf);
        let out = Tensor::from_vec(&[n, 1, h, w], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelMean(x), ng))
    }

    /// Max over channels `[N,C,H,W] → [N,1,H,W]`; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n * hw];
        let mut arg = vec![0u32; n * hw];
        for i in 0..n {
            for ch in 0..c {
                let src = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    if v > out[i * hw + p] {
                        out[i * hw + p] = v;
                        arg[i * hw + p] = ch as u32;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelMax(x, arg), ng))
    }

    /// Batched matrix product on `[N, r, c]` tensors: `op(a)·op(b)`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[na, ar, ac], &[nb, br, bc]) = (&sa[..], &sb[..]) else {
            return Err(shape_err("bmm", format!("expected rank-3 operands, got {sa:?}, {sb:?}")));
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if na != nb || k != k2 {
            return Err(shape_err("bmm", format!("incompatible {sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let mut out = Tensor::zeros(&[na, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            exec::for_each_chunk(ENGINE, out.data_mut(), m * n, |i, c| {
                gemm(
                    ta,
                    tb,
                    m,
                    n,
                    k,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    c,
                );
            });
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut mx = T::neg_infinity();
                for d in 0..dim {
                    mx = mx.max(xv[base + d * inner]);
                }
                let mut sum = T::zero();
                for d in 0..dim {
                    let e = (xv[base + d * inner] - mx).exp();
                    out[base + d * inner] = e;
                    sum += e;
                }
                for d in 0..dim {
                    out[base + d * inner] = out[base + d * inner] / sum;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(shape_err("upsample", "factor must be positive".into()));
        }
        let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, a) in ty.iter().enumerate() {
                let (r0, r1) = (&src[a.i0 * w..(a.i0 + 1) * w], &src[a.i1 * w..(a.i1 + 1) * w]);
                let (wy0, wy1) = (T::of(a.w0), T::of(a.w1));
                for (ox, b) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(b.w0), T::of(b.w1));
                    dst[oy * wo + ox] = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1])
                        + wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Upsample(x, factor), ng))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let area = T::of((k * k) as f64);
        let od = out.data_mut();
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    od[plane * ho * wo + (y / k) * wo + x / k] += xv[plane * h * w + y * w + x];
                }
            }
        }
        od.iter_mut().for_each(|v| *v = *v / area);
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool(x, k), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(shape_err("dot", format!("weights {:?} vs input {:?}", weights.shape(), self.shape(x))));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), ng))
    }

    /// Scalar node with a caller-supplied value and gradient w.r.t. `x`.
    pub fn custom_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(shape_err("custom_scalar", "gradient shape differs from input".into()));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Custom(x, grad), ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (n, co, _, _) = node.value.dims4()?;
                let (k, p) = (geom.k(), geom.p());
                let in_len = geom.cin * geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let parts = exec::map_range(ENGINE, n, |i| {
                    let dys = &dy[i * co * p..(i + 1) * co * p];
                    let xs = &xv[i * in_len..(i + 1) * in_len];
                    let cols_owned;
                    let cols: &[T] = if geom.is_pointwise() {
                        xs
                    } else if need_w {
                        let mut c = vec![T::zero(); k * p];
                        im2col(geom, xs, &mut c);
                        cols_owned = c;
                        &cols_owned
                    } else {
                        &[]
                    };
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); co * k];
                        gemm(false, true, co, k, p, T::one(), dys, cols, T::zero(), &mut dw);
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dx = vec![T::zero(); in_len];
                        if geom.is_pointwise() {
                            gemm(true, false, k, p, co, T::one(), wv, dys, T::zero(), &mut dx);
                        } else {
                            let mut dcols = vec![T::zero(); k * p];
                            gemm(true, false, k, p, co, T::one(), wv, dys, T::zero(), &mut dcols);
                            col2im(geom, &dcols, &mut dx);
                        }
                        dx
                    });
                    (dw, dx)
                });
                if need_w {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    for (part, _) in &parts {
                        for (a, &b) in dw.data_mut().iter_mut().zip(part.as_ref().unwrap()) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[co]);
                        for i in 0..n {
                            for c in 0..co {
                                let row = &dy[(i * co + c) * p..(i * co + c + 1) * p];
                                db.data_mut()[c] += row.iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                if need_x {
                    let mut data = Vec::with_capacity(n * in_len);
                    for (_, dx) in parts {
                        data.extend(dx.unwrap());
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), data)?);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let cpg = c / groups;
                let per = cpg * hw;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let m = T::of(per as f64);
                for ng in 0..n * groups {
                    let g = ng % groups;
                    let (mu, rs) = (mean[ng], rstd[ng]);
                    let seg = ng * per..(ng + 1) * per;
                    let mut sum1 = T::zero();
                    let mut sum2 = T::zero();
                    for (j, idx) in seg.clone().enumerate() {
                        let ch = g * cpg + j / hw;
                        let xhat = (xv[idx] - mu) * rs;
                        let dxhat = dy[idx] * gv[ch];
                        sum1 += dxhat;
                        sum2 += dxhat * xhat;
                        dgamma[ch] += dy[idx] * xhat;
                        dbeta[ch] += dy[idx];
                    }
                    for (j, idx) in seg.enumerate() {
                        let ch = g * cpg + j / hw;
                        let xhat = (xv[idx] - mu) * rs;
                        let dxhat = dy[idx] * gv[ch];
                        dx[idx] = rs / m * (m * dxhat - sum1 - xhat * sum2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Relu(x) => {
                let yv = node.value.data();
                let data = dy
                    .iter()
                    .zip(yv)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let data = dy
                    .iter()
                    .zip(yv)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), data)?);
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let mul = matches!(node.op, Op::Mul(..));
                let out_shape = node.value.shape();
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(av.shape(), out_shape);
                let sb = broadcast_strides(bv.shape(), out_shape);
                if self.ng(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    let (dd, bd) = (da.data_mut(), bv.data());
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        dd[i] += if mul { dy[o] * bd[j] } else { dy[o] };
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    let (dd, ad) = (db.data_mut(), av.data());
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        dd[j] += if mul { dy[o] * ad[i] } else { dy[o] };
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, gy.map(|g| g * *scale));
            }
            Op::Concat(inputs, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total_axis = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len_axis = self.shape(v)[*axis];
                    if self.ng(v) {
                        let mut data = Vec::with_capacity(outer * len_axis * inner);
                        for o in 0..outer {
                            let start = (o * total_axis + offset) * inner;
                            data.extend_from_slice(&dy[start..start + len_axis * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(self.shape(v), data)?);
                    }
                    offset += len_axis;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.clone().reshaped(self.shape(*x))?);
            }
            Op::MeanHw(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(n * c * hw);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::of(c as f64);
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(i * c + ch) * hw + p] = dy[i * hw + p] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::ChannelMax(x, arg) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for p in 0..hw {
                        let ch = arg[i * hw + p] as usize;
                        dx[(i * c + ch) * hw + p] = dy[i * hw + p];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, n) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let k = if *ta { sa[1] } else { sa[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut da = Tensor::zeros(sa);
                    exec::for_each_chunk(ENGINE, da.data_mut(), m * k, |i, d| {
                        let dc = &dy[i * m * n..(i + 1) * m * n];
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        if *ta {
                            // A stored k×m: dA = op(B)·dCᵀ
                            gemm(*tb, true, k, m, n, T::one(), bs, dc, T::zero(), d);
                        } else {
                            // dA = dC·op(B)ᵀ
                            gemm(false, !*tb, m, k, n, T::one(), dc, bs, T::zero(), d);
                        }
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(sb);
                    exec::for_each_chunk(ENGINE, db.data_mut(), k * n, |i, d| {
                        let dc = &dy[i * m * n..(i + 1) * m * n];
                        let as_ = &av[i * m * k..(i + 1) * m * k];
                        if *tb {
                            // B stored n×k: dB = dCᵀ·op(A)
                            gemm(true, *ta, n, k, m, T::one(), dc, as_, T::zero(), d);
                        } else {
                            // dB = op(A)ᵀ·dC
                            gemm(!*ta, false, k, n, m, T::one(), as_, dc, T::zero(), d);
                        }
                    });
                    self.accumulate(grads, *b, db);
                }
                let _ = batch;
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let yv = node.value.data();
                let mut dx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let mut dot = T::zero();
                        for d in 0..dim {
                            dot += dy[base + d * inner] * yv[base + d * inner];
                        }
                        for d in 0..dim {
                            let j = base + d * inner;
                            dx[j] = yv[j] * (dy[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx)?);
            }
            Op::Upsample(x, factor) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ty, tx) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, a) in ty.iter().enumerate() {
                        let (wy0, wy1) = (T::of(a.w0), T::of(a.w1));
                        for (ox, b) in tx.iter().enumerate() {
                            let g = src[oy * wo + ox];
                            let (wx0, wx1) = (T::of(b.w0), T::of(b.w1));
                            dst[a.i0 * w + b.i0] += g * wy0 * wx0;
                            dst[a.i0 * w + b.i1] += g * wy0 * wx1;
                            dst[a.i1 * w + b.i0] += g * wy1 * wx0;
                            dst[a.i1 * w + b.i1] += g * wy1 * wx1;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::AvgPool(x, k) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[plane * h * w + y * w + xx] = dy[plane * ho * wo + (y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), dy[0]));
            }
            Op::Dot(x, weights) => {
                self.accumulate(grads, *x, weights.map(|w| w * dy[0]));
            }
            Op::Custom(x, grad) => {
                self.accumulate(grads, *x, grad.map(|g| g * dy[0]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2, 5, 4], |i| (i as f64 * 0.31).sin()));
        let w = g.input(t(&[3, 2, 3, 3], |i| (i as f64 * 0.17).cos()));
        let b = g.input(t(&[3], |i| i as f64));
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        let (xv, wv, yv) = (g.value(x).data(), g.value(w).data(), g.value(y));
        assert_eq!(yv.shape(), &[2, 3, 3, 2]);
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut s = co as f64;
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        s += xv[((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                            * wv[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = yv.data()[((n * 3 + co) * 3 + oy) * 2 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3, 4], |i| i as f64 * 0.7 - 3.0));
        let y = g.softmax(x, 2).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 2.5));
        let y = g.upsample(x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 12, 12]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn broadcast_mul_gradient_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1, 2, 2, 2], |i| i as f64));
        let b = g.param(t(&[1, 2, 1, 1], |i| (i + 1) as f64));
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0 + 1.0 + 2.0 + 3.0, 4.0 + 5.0 + 6.0 + 7.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(a).is_err());
    }
}
