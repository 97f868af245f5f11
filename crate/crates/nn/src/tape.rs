//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Feature maps are `[C, D, H, W]`; a 2D map is the `D = 1` case, so one
//! convolution kernel serves both the generator and the discriminator.
//! Nodes are appended in evaluation order, which is already topological.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// In-plane convolution with a `1 × k × k` kernel.
    pub fn planar(stride: usize, pad: usize) -> Self {
        Self { stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn cubic(stride: usize, pad: usize) -> Self {
        Self { stride: [stride; 3], pad: [pad; 3] }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Concat(Vec<Var>),
    Upsample2x(Var),
    Leaky(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Mse(Var, Var),
    Crop { x: Var, origin: Vec<usize> },
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Opaque(&'static str),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// `None` when `v` is not a trainable leaf or the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct ConvShape {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self, geom: &ConvGeom) -> bool {
        self.kernel == [1, 1, 1] && geom.stride == [1, 1, 1] && geom.pad == [0, 0, 0]
    }
}

fn conv_shape(x: &[usize], w: &[usize], geom: &ConvGeom) -> Result<ConvShape> {
    if x.len() != 4 || w.len() != 5 {
        return Err(Error::Shape(format!("conv expects [C,D,H,W] input and 5D kernel, got {x:?} and {w:?}")));
    }
    if w[1] != x[0] {
        return Err(Error::Shape(format!("kernel {w:?} expects {} input channels, got {}", w[1], x[0])));
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = x[a + 1] + 2 * geom.pad[a];
        if geom.stride[a] == 0 || padded < w[a + 2] {
            return Err(Error::Shape(format!("kernel {w:?} does not fit input {x:?} with {geom:?}")));
        }
        output[a] = (padded - w[a + 2]) / geom.stride[a] + 1;
    }
    Ok(ConvShape { cin: x[0], cout: w[0], input: [x[1], x[2], x[3]], kernel: [w[2], w[3], w[4]], output })
}

/// Offset of an output coordinate inside the input, or `None` in the padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
}

/// Output positions `lo..hi` whose tap `k` lands inside an input row of
/// length `extent`.
#[inline]
fn valid_span(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Visit every unrolled row segment: `(row, first column, input row,
/// tap offset along x)`, restricted to taps that land inside the input.
#[inline]
fn for_each_segment(s: &ConvShape, geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = s.input;
    let [kd, kh, kw] = s.kernel;
    let [od, oh, ow] = s.output;
    for c in 0..s.cin {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    for z in 0..od {
                        let Some(iz) = source(z, a, geom.stride[0], geom.pad[0], d) else { continue };
                        for y in 0..oh {
                            let Some(iy) = source(y, b, geom.stride[1], geom.pad[1], h) else { continue };
                            f(row, (z * oh + y) * ow, ((c * d + iz) * h + iy) * w, e);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], s: &ConvShape, geom: &ConvGeom) -> Vec<T> {
    let n = s.cols();
    let (w, ow, sw, pw) = (s.input[2], s.output[2], geom.stride[2], geom.pad[2]);
    let mut cols = vec![T::zero(); s.rows() * n];
    for_each_segment(s, geom, |row, col0, src0, e| {
        let (lo, hi) = valid_span(e, sw, pw, w, ow);
        let dst = &mut cols[row * n + col0..][..ow];
        let src = &x[src0..][..w];
        if sw == 1 {
            dst[lo..hi].copy_from_slice(&src[lo + e - pw..hi + e - pw]);
        } else {
            for (xo, v) in dst[lo..hi].iter_mut().enumerate() {
                *v = src[(lo + xo) * sw + e - pw];
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, geom: &ConvGeom, dx: &mut [T]) {
    let n = s.cols();
    let (w, ow, sw, pw) = (s.input[2], s.output[2], geom.stride[2], geom.pad[2]);
    for_each_segment(s, geom, |row, col0, src0, e| {
        let (lo, hi) = valid_span(e, sw, pw, w, ow);
        let g = &cols[row * n + col0..][..ow];
        let dst = &mut dx[src0..][..w];
        if sw == 1 {
            for (d, &v) in dst[lo + e - pw..hi + e - pw].iter_mut().zip(&g[lo..hi]) {
                *d += v;
            }
        } else {
            for (xo, &v) in g[lo..hi].iter().enumerate() {
                dst[(lo + xo) * sw + e - pw] += v;
            }
        }
    });
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        st[a] = st[a + 1] * shape[a + 1];
    }
    st
}

/// Flat source offsets of a crop, in output order.
fn crop_offsets(shape: &[usize], origin: &[usize], size: &[usize]) -> Vec<usize> {
    let st = strides_of(shape);
    let base: usize = origin.iter().zip(&st).map(|(o, s)| o * s).sum();
    let total: usize = size.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; size.len()];
    for _ in 0..total {
        out.push(base + idx.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>());
        for a in (0..size.len()).rev() {
            idx[a] += 1;
            if idx[a] < size[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

fn leaky<T: Scalar>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `(outer, extent, inner)` of a reduction over `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Fixed input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let s = conv_shape(self.shape(x), self.shape(w), &geom)?;
        if let Some(b) = b {
            if self.shape(b) != [s.cout] {
                return Err(Error::Shape(format!("bias {:?} for {} output channels", self.shape(b), s.cout)));
            }
        }
        let n = s.cols();
        let mut out = vec![T::zero(); s.cout * n];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(n).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if s.is_pointwise(&geom) {
            T::gemm(s.cout, s.rows(), n, wv, false, xv, false, beta, &mut out);
        } else {
            let cols = im2col(xv, &s, &geom);
            T::gemm(s.cout, s.rows(), n, wv, false, &cols, false, beta, &mut out);
        }
        let [od, oh, ow] = s.output;
        let value = Tensor::new(vec![s.cout, od, oh, ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != tail.len() + 1 || sh[1..] != tail[..] {
                return Err(Error::Shape(format!("cannot concat {:?} with trailing {tail:?}", sh)));
            }
            lead += sh[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Nearest-neighbor doubling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return Err(Error::Shape(format!("upsample needs rank >= 2, got {sh:?}")));
        }
        let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let planes = sh[..sh.len() - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                let row = &src[(p * h + y / 2) * w..][..w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let mut shape = sh.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2x(x), ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| leaky(v, s));
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Leaky(x, slope), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    /// Mean of every element, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() || sh.len() < 2 {
            return Err(Error::Shape(format!("axis {axis} of {sh:?}")));
        }
        let (outer, n, inner) = axis_split(&sh, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for k in 0..n {
                for (d, &v) in dst.iter_mut().zip(&src[(o * n + k) * inner..][..inner]) {
                    *d += v;
                }
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sh;
        shape.remove(axis);
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis(x, axis), ng))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mse of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let se: T = av.iter().zip(bv).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(se / T::lit(av.len() as f64));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), ng))
    }

    pub fn crop(&mut self, x: Var, origin: &[usize], size: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if origin.len() != sh.len() || size.len() != sh.len() {
            return Err(Error::Shape(format!("crop rank mismatch for {sh:?}")));
        }
        if (0..sh.len()).any(|a| size[a] == 0 || origin[a] + size[a] > sh[a]) {
            return Err(Error::Shape(format!("crop {origin:?}+{size:?} outside {sh:?}")));
        }
        let src = self.value(x).data();
        let data = crop_offsets(&sh, origin, size).into_iter().map(|i| src[i]).collect();
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(size.to_vec(), data)?, Op::Crop { x, origin: origin.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::lit(c);
        let value = self.value(x).map(|v| v * k);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// Forward-only elementwise map; differentiating through it is an error.
    pub fn opaque(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Opaque(name), ng)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let s = conv_shape(self.shape(*x), self.shape(*w), geom)?;
                let n = s.cols();
                let k = s.rows();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<T> = gd.chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(vec![s.cout], db)?);
                    }
                }
                let xv = self.value(*x).data();
                let pointwise = s.is_pointwise(geom);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); s.cout * k];
                    if pointwise {
                        T::gemm(s.cout, n, k, gd, false, xv, true, T::zero(), &mut dw);
                    } else {
                        let cols = im2col(xv, &s, geom);
                        T::gemm(s.cout, n, k, gd, false, &cols, true, T::zero(), &mut dw);
                    }
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); k * n];
                    T::gemm(k, s.cout, n, wv, true, gd, false, T::zero(), &mut dcols);
                    let dx = if pointwise {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); xv.len()];
                        col2im(&dcols, &s, geom, &mut dx);
                        dx
                    };
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let part = Tensor::new(self.shape(p).to_vec(), gd[off..off + len].to_vec())?;
                        self.accumulate(grads, p, part);
                    }
                    off += len;
                }
            }
            Op::Upsample2x(x) => {
                let sh = self.shape(*x);
                let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (p, plane) in gd.chunks_exact(4 * h * w).enumerate() {
                    for (y, row) in plane.chunks_exact(2 * w).enumerate() {
                        let dst = &mut dx[(p * h + y / 2) * w..][..w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            *d += row[2 * xx] + row[2 * xx + 1];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sh.to_vec(), dx)?);
            }
            Op::Leaky(x, slope) => {
                let s = T::lit(*slope);
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, &d)| if v > T::zero() { d } else { d * s }).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&t, &d)| d * (T::one() - t * t)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), v));
            }
            Op::MeanAxis(x, axis) => {
                let sh = self.shape(*x);
                let (outer, n, inner) = axis_split(sh, *axis);
                let inv = T::one() / T::lit(n as f64);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &gd[o * inner..][..inner];
                    for _ in 0..n {
                        dx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sh.to_vec(), dx)?);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] * T::lit(2.0 / av.len() as f64);
                let diff: Vec<T> = av.iter().zip(bv).map(|(&p, &q)| (p - q) * k).collect();
                if self.wants(*b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), neg)?);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), diff)?);
            }
            Op::Crop { x, origin } => {
                let sh = self.shape(*x);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (i, &d) in crop_offsets(sh, origin, node.value.shape()).iter().zip(gd) {
                    dx[*i] += d;
                }
                self.accumulate(grads, *x, Tensor::new(sh.to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gd.to_vec())?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, c) => {
                let k = T::lit(*c);
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::Opaque(name) => return Err(Error::UnsupportedOp(name)),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct-summation convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], geom: ConvGeom) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let out: Vec<usize> =
            (0..3).map(|a| (xs[a + 1] + 2 * geom.pad[a] - ws[a + 2]) / geom.stride[a] + 1).collect();
        let mut y = vec![0.0; ws[0] * out.iter().product::<usize>()];
        let mut idx = 0;
        for o in 0..ws[0] {
            for z in 0..out[0] {
                for yy in 0..out[1] {
                    for xx in 0..out[2] {
                        let mut acc = b[o];
                        for c in 0..ws[1] {
                            for a in 0..ws[2] {
                                for bb in 0..ws[3] {
                                    for e in 0..ws[4] {
                                        let iz = (z * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                                        let iy = (yy * geom.stride[1] + bb) as isize - geom.pad[1] as isize;
                                        let ix = (xx * geom.stride[2] + e) as isize - geom.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= xs[1] || iy >= xs[2] || ix >= xs[3] {
                                            continue;
                                        }
                                        let xv = x.data()[((c * xs[1] + iz) * xs[2] + iy) * xs[3] + ix];
                                        let wv = w.data()[(((o * ws[1] + c) * ws[2] + a) * ws[3] + bb) * ws[4] + e];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        let mut shape = vec![ws[0]];
        shape.extend(out);
        Tensor::new(shape, y).unwrap()
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for (xs, ws, geom) in [
            ([2, 3, 5, 4], [3, 2, 2, 3, 3], ConvGeom::new([1, 2, 1], [0, 1, 1])),
            ([1, 1, 6, 7], [2, 1, 1, 3, 3], ConvGeom::planar(2, 1)),
            ([2, 4, 4, 4], [2, 2, 4, 4, 4], ConvGeom::cubic(2, 1)),
            ([3, 1, 4, 5], [2, 3, 1, 1, 1], ConvGeom::planar(1, 0)),
        ] {
            let x = ramp(&xs, 0.37);
            let w = ramp(&ws, 0.11);
            let b = [0.25, -0.5, 0.125][..ws[0]].to_vec();
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(t(&[ws[0]], &b)));
            let y = tape.conv(xv, wv, Some(bv), geom).unwrap();
            let want = naive_conv(&x, &w, &b, geom);
            assert_eq!(tape.shape(y), want.shape());
            for (p, q) in tape.value(y).data().iter().zip(want.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 1, 3, 3]));
        assert!(matches!(tape.conv(x, w, None, ConvGeom::planar(1, 1)), Err(Error::Shape(_))));
        let y = tape.constant(Tensor::zeros(&[3, 1, 4, 4]));
        assert!(tape.mse(x, y).is_err());
        assert!(tape.add(x, y).is_err());
        assert!(tape.crop(x, &[0, 0, 2, 2], &[2, 1, 3, 2]).is_err());
        let z = tape.constant(Tensor::zeros(&[2, 1, 4, 5]));
        assert!(tape.concat(&[x, z]).is_err());
        assert!(tape.concat(&[x, y]).is_ok());
    }

    #[test]
    fn small_ops_by_hand() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 1, 2], &[1.0, -2.0]));
        let up = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(up), &[1, 1, 2, 4]);
        assert_eq!(tape.value(up).data(), &[1.0, 1.0, -2.0, -2.0, 1.0, 1.0, -2.0, -2.0]);
        let l = tape.leaky_relu(up, 0.2);
        assert_eq!(tape.value(l).data()[2], -0.4);
        let m = tape.mean(l);
        // mean = (4·1 + 4·(−0.4)) / 8 = 0.3
        assert!((tape.value(m).item() - 0.3).abs() < 1e-15);
        let g = tape.backward(m).unwrap();
        // each input feeds four outputs with weight 1/8, times the leaky slope
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.1]);
    }

    #[test]
    fn mean_axis_and_crop_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a0 = tape.mean_axis(x, 0).unwrap();
        let a1 = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(a0).data(), &[2.5, 3.5, 4.5]);
        assert_eq!(tape.value(a1).data(), &[2.0, 5.0]);
        let c = tape.crop(x, &[1, 1], &[1, 2]).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient_and_constant_none() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2], &[3.0, 4.0]));
        let c = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.mse(a, c).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn opaque_op_is_rejected_only_when_differentiated() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, -1.0]));
        let o = tape.opaque(p, "abs", f64::abs);
        let m = tape.mean(o);
        assert!(matches!(tape.backward(m), Err(Error::UnsupportedOp("abs"))));

        let c = tape.constant(t(&[2], &[1.0, -1.0]));
        let o = tape.opaque(c, "abs", f64::abs);
        let l = tape.mse(p, o).unwrap();
        assert!(tape.backward(l).is_ok());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-800.0, 0.0, 800.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data(), &[0.0, 0.5, 1.0]);
    }
}
