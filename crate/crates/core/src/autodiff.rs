//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits each node after all of its consumers.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted row read used by bilinear sampling: `out[row] += w * src[row']`,
/// where rows are vectors along the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub out: u32,
    pub src: u32,
    pub weight: T,
}

/// Geometry of a 2-D convolution over an `H x W x Cin` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Affine(Var, T),
    AddN(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    Column(Var, usize),
    Stack(Vec<Var>),
    Gather(Var, Vec<Tap<T>>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on tensor of shape {:?}", t.shape);
        t.data[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Var {
        self.constant(Tensor::from_f64(shape, data))
    }

    /// A differentiable input that is not a model parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Param(id), true)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| f(x)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), |x, y| if y < x { y } else { x })
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max(a, b), |x, y| if y > x { y } else { x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        self.unary(a, Op::Affine(a, s), |x| s * x + b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            assert_eq!(v.shape, out.shape, "add_n shape mismatch");
            for (o, &y) in out.data.iter_mut().zip(&v.data) {
                *o += y;
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(out, Op::AddN(xs.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data.iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Matrix product over the last axis of `a` and a 2-D `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).as_matrix();
        let bs = self.shape(b).to_vec();
        assert!(bs.len() == 2 && bs[0] == k, "matmul: {:?} x {:?}", self.shape(a), bs);
        let n = bs[1];
        let data = crate::tensor::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], data), Op::MatMul(a, b), ng)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = self.value(a).as_matrix();
        assert_eq!(self.value(bias).len(), n, "bias length mismatch");
        let mut out = self.value(a).clone();
        let b = &self.nodes[bias.0].value.data;
        for row in out.data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRowBias(a, bias), ng)
    }

    /// `x * w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let out = Tensor::new(shape.to_vec(), v.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Column `j` of an `m x n` matrix, as an `m`-vector.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let (m, n) = self.value(a).as_matrix();
        assert!(j < n);
        let data = self.value(a).data.iter().skip(j).step_by(n).copied().collect();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![m], data), Op::Column(a, j), ng)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let inner = self.shape(xs[0]).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(xs[0]).len());
        for &x in xs {
            assert_eq!(self.shape(x), inner.as_slice(), "stack shape mismatch");
            data.extend_from_slice(&self.value(x).data);
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(shape, data), Op::Stack(xs.to_vec()), ng)
    }

    /// Builds rows of the output from weighted rows of `src`.
    pub fn gather(&mut self, src: Var, taps: Vec<Tap<T>>, out_shape: &[usize]) -> Var {
        let row = *self.shape(src).last().expect("gather source needs an axis");
        assert_eq!(*out_shape.last().unwrap(), row, "gather row length mismatch");
        let mut out = Tensor::zeros(out_shape);
        let s = &self.nodes[src.0].value.data;
        for t in &taps {
            let (o, i) = (t.out as usize * row, t.src as usize * row);
            for (dst, &v) in out.data[o..o + row].iter_mut().zip(&s[i..i + row]) {
                *dst += t.weight * v;
            }
        }
        let ng = self.ng(src);
        self.push(out, Op::Gather(src, taps), ng)
    }

    /// Convolution of an `H x W x Cin` input with weights laid out as
    /// `(kernel * kernel * Cin) x Cout` and a `Cout` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.shape(input), &[geom.height, geom.width, geom.in_channels]);
        assert_eq!(self.shape(weight), &[geom.patch_len(), geom.out_channels]);
        assert_eq!(self.shape(bias), &[geom.out_channels]);
        let cols = im2col(&self.value(input).data, &geom);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = crate::tensor::matmul(
            &cols,
            &self.value(weight).data,
            ho * wo,
            geom.patch_len(),
            geom.out_channels,
        );
        let b = &self.value(bias).data;
        for row in out.chunks_mut(geom.out_channels) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        let keep = if self.ng(weight) { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![ho, wo, geom.out_channels], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep,
            },
            ng,
        )
    }

    /// Gradients of a scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value.data;
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| zip3(d, g, vb, |g, y| g * y));
                self.acc(grads, *b, |d| zip3(d, g, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| zip3(d, g, vb, |g, y| g / y));
                self.acc(grads, *b, |d| {
                    for ((d, &g), (&x, &y)) in d.iter_mut().zip(g).zip(va.iter().zip(vb)) {
                        *d -= g * x / (y * y);
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (va, vb) = (val(*a), val(*b));
                // Ties route the gradient to the first operand.
                let pick_a = |x: T, y: T| if is_min { x <= y } else { x >= y };
                self.acc(grads, *a, |d| {
                    for ((d, &g), (&x, &y)) in d.iter_mut().zip(g).zip(va.iter().zip(vb)) {
                        if pick_a(x, y) {
                            *d += g;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), (&x, &y)) in d.iter_mut().zip(g).zip(va.iter().zip(vb)) {
                        if !pick_a(x, y) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.value.data;
                self.acc(grads, *a, |d| zip3(d, g, out, |g, y| g * y));
            }
            Op::Abs(a) => {
                let va = val(*a);
                self.acc(grads, *a, |d| zip3(d, g, va, |g, x| g * x.signum()));
            }
            Op::Square(a) => {
                let va = val(*a);
                self.acc(grads, *a, |d| zip3(d, g, va, |g, x| g * (x + x)));
            }
            Op::Relu(a) => {
                let va = val(*a);
                self.acc(grads, *a, |d| zip3(d, g, va, |g, x| if x > zero { g } else { zero }));
            }
            Op::Sigmoid(a) => {
                let out = &node.value.data;
                self.acc(grads, *a, |d| zip3(d, g, out, |g, y| g * y * (one - y)));
            }
            Op::Softplus(a) => {
                let va = val(*a);
                self.acc(grads, *a, |d| zip3(d, g, va, |g, x| g * sigmoid(x)));
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                let (lo, hi) = (*lo, *hi);
                self.acc(grads, *a, |d| {
                    zip3(d, g, va, |g, x| if x >= lo && x <= hi { g } else { zero })
                });
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.acc(grads, x, |d| add_into(d, g));
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(a) => {
                let n = T::of(self.nodes[a.0].value.len() as f64);
                let g0 = g[0] / n;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix();
                let n = self.nodes[b.0].value.shape[1];
                let (va, vb) = (val(*a), val(*b));
                // dA = G * B^T ; dB = A^T * G
                self.acc(grads, *a, |d| {
                    T::gemm(m, n, k, one, g, n as isize, 1, vb, 1, n as isize, one, d, k as isize, 1)
                });
                self.acc(grads, *b, |d| {
                    T::gemm(k, m, n, one, va, 1, k as isize, g, n as isize, 1, one, d, n as isize, 1)
                });
            }
            Op::AddRowBias(a, bias) => {
                self.acc(grads, *a, |d| add_into(d, g));
                let n = self.nodes[bias.0].value.len();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Column(a, j) => {
                let (_, n) = self.nodes[a.0].value.as_matrix();
                let j = *j;
                self.acc(grads, *a, |d| {
                    for (r, &gv) in g.iter().enumerate() {
                        d[r * n + j] += gv;
                    }
                });
            }
            Op::Stack(xs) => {
                let chunk = g.len() / xs.len();
                for (x, gc) in xs.iter().zip(g.chunks(chunk)) {
                    self.acc(grads, *x, |d| add_into(d, gc));
                }
            }
            Op::Gather(src, taps) => {
                let row = *self.nodes[src.0].value.shape.last().unwrap();
                self.acc(grads, *src, |d| {
                    for t in taps {
                        let (o, i) = (t.out as usize * row, t.src as usize * row);
                        for (dst, &gv) in d[i..i + row].iter_mut().zip(&g[o..o + row]) {
                            *dst += t.weight * gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.out_height() * geom.out_width();
                let (p, co) = (geom.patch_len(), geom.out_channels);
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(co) {
                        add_into(d, row);
                    }
                });
                self.acc(grads, *weight, |d| {
                    T::gemm(p, rows, co, one, cols, 1, p as isize, g, co as isize, 1, one, d, co as isize, 1)
                });
                if self.ng(*input) {
                    let w = val(*weight);
                    let mut dcols = vec![zero; rows * p];
                    T::gemm(rows, co, p, one, g, co as isize, 1, w, 1, co as isize, zero, &mut dcols, p as isize, 1);
                    self.acc(grads, *input, |d| col2im_add(&dcols, geom, d));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let d = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(d);
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient with zeros substituted for nodes the root does not reach.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); graph.value(v).len()])
    }

    /// Gradients of every parameter node, keyed by parameter id.
    pub fn params<'a>(&'a self, graph: &'a Graph<T>) -> impl Iterator<Item = (usize, &'a [T])> + 'a {
        graph.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads[i].as_deref().map(|g| (id, g)),
            _ => None,
        })
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

fn zip3<T: Real>(d: &mut [T], g: &[T], x: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
        *d += f(g, x);
    }
}

fn im2col<T: Real>(input: &[T], geom: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, c) = (geom.kernel, geom.in_channels);
    let p = geom.patch_len();
    let mut cols = vec![T::zero(); ho * wo * p];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * p;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = (iy as usize * geom.width + ix as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], geom: &ConvGeom, d: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, c) = (geom.kernel, geom.in_channels);
    let p = geom.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * p;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * geom.width + ix as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    add_into(&mut d[dst..dst + c], &dcols[src..src + c]);
                }
            }
        }
    }
}
