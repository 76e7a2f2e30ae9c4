use super::kernels::{self, ConvGeom, ConvShape};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, s: ConvShape, g: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, s: ConvShape, g: ConvGeom },
    Pool { x: Var, arg: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Map { x: Var, df: fn(T) -> T },
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, din: usize, dout: usize },
    Broadcast { v: Var, hw: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce { pred: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in creation order, which is a topological order, so
/// the backward pass is a single reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled with `shape` when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    let one = T::one();
    let s = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    // keep the result inside the open interval even when it rounds to 0 or 1
    s.max(T::min_positive_value()).min(one - T::epsilon() / T::of(2.0))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn check_bias(&self, b: Option<Var>, c: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [c] => {
                Err(Error::shape(format!("bias shape {:?}, expected [{c}]", self.shape(b))))
            }
            _ => Ok(()),
        }
    }

    /// Cross-correlation with zero padding. `x`: `N Cin h w`, `w`: `Cout Cin k k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "conv2d weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        self.check_bias(b, cout)?;
        let (oh, ow) = match (g.conv_out(h, k), g.conv_out(wd, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("conv2d output of {h}x{wd} with k={k} {g:?} is empty"))),
        };
        let s = ConvShape { n, cin, h, w: wd, cout, k, oh, ow };
        let bias = b.map(|b| self.value(b).data());
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &s, g);
        let out = Tensor::new(&[n, cout, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, s, g }, &inputs))
    }

    /// Transposed convolution. `x`: `N Cin h w`, `w`: `Cin Cout k k`;
    /// output extent `(h - 1) stride - 2 pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(stride, pad, 1);
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "transposed conv weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        self.check_bias(b, cout)?;
        let (oh, ow) = match (g.transposed_out(h, k), g.transposed_out(wd, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("transposed conv output is empty")),
        };
        // the scatter must exactly invert the implied strided conv
        if g.conv_out(oh, k) != Some(h) || g.conv_out(ow, k) != Some(wd) {
            return Err(Error::shape(format!("transposed conv k={k} {g:?} is not invertible for {h}x{wd}")));
        }
        let s = ConvShape { n, cin, h, w: wd, cout, k, oh, ow };
        let bias = b.map(|b| self.value(b).data());
        let y = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), bias, &s, g);
        let out = Tensor::new(&[n, cout, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvT { x, w, b, s, g }, &inputs))
    }

    /// 2x2 max pooling with stride 2; ties go to the first window element.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2d needs even extents, got {h}x{w}")));
        }
        let (y, arg) = kernels::maxpool2(self.value(x).data(), n * c, h, w);
        let out = Tensor::new(&[n, c, h / 2, w / 2], y)?;
        Ok(self.push(out, Op::Pool { x, arg }, &[x]))
    }

    /// Max over a `gy x gx` partition of each plane.
    pub fn region_maxpool(&mut self, x: Var, gy: usize, gx: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if gy == 0 || gx == 0 || gy > h || gx > w {
            return Err(Error::InvalidGrid { gy, gx, h, w });
        }
        let (y, arg) = kernels::region_max(self.value(x).data(), n * c, h, w, gy, gx);
        let out = Tensor::new(&[n, c, gy, gx], y)?;
        Ok(self.push(out, Op::Pool { x, arg }, &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| f(a)).collect() };
        self.push(out, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Logistic function; outputs stay strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    /// Pointwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        self.unary(x, f, Op::Map { x, df })
    }

    /// Concatenates along dimension 1 (channels for feature maps).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput)?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat needs rank >= 2"));
        }
        let n = s0[0];
        let tail = &s0[2..];
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != n || &s[2..] != tail {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", s, s0)));
            }
            channels += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &x in xs {
                let v = self.value(x);
                let blk = v.shape[1] * inner;
                data.extend_from_slice(&v.data[i * blk..(i + 1) * blk]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// `y = x W^T + b`, `x`: `N x din`, `W`: `dout x din`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match self.shape(x) {
            &[n, d] => (n, d),
            s => return Err(Error::shape(format!("linear input must be rank 2, got {s:?}"))),
        };
        let dout = match self.shape(w) {
            &[o, d] if d == din => o,
            s => return Err(Error::shape(format!("linear weight {s:?} does not fit input width {din}"))),
        };
        self.check_bias(b, dout)?;
        let bias = b.map(|b| self.value(b).data());
        let y = kernels::linear_forward(self.value(x).data(), self.value(w).data(), bias, n, din, dout);
        let out = Tensor::new(&[n, dout], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b, n, din, dout }, &inputs))
    }

    /// Repeats an `N x C` tensor over an `h x w` plane.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = match self.shape(v) {
            &[n, c] => (n, c),
            s => return Err(Error::shape(format!("broadcast_spatial needs rank 2, got {s:?}"))),
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("broadcast to an empty plane"));
        }
        let hw = h * w;
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(n * c * hw);
        for &x in src {
            data.extend(std::iter::repeat_n(x, hw));
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::Broadcast { v, hw }, &[v]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data.iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!("bce: {:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let eps = T::BCE_EPS;
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.as_f64().clamp(eps, 1.0 - eps);
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = T::of(total / p.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.data().to_vec() }, &[pred]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar(numel));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor { shape: node.value.shape.clone(), data: g });
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, s, g: geom } => {
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    s,
                    *geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                self.conv_accumulate(grads, *x, *w, *b, r);
            }
            Op::ConvT { x, w, b, s, g: geom } => {
                let r = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    s,
                    *geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                self.conv_accumulate(grads, *x, *w, *b, r);
            }
            Op::Pool { x, arg } => {
                let dx = kernels::scatter_argmax(g, arg, self.value(*x).numel());
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&d| d * *s).collect()),
            Op::Offset(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Map { x, df } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&d, &v)| d * df(v)).collect());
            }
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let inner: usize = shape[2..].iter().product();
                let n = shape[0];
                let total = shape[1] * inner;
                let mut offset = 0;
                for &x in xs {
                    let blk = self.shape(x)[1] * inner;
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(n * blk);
                        for s in 0..n {
                            dx.extend_from_slice(&g[s * total + offset..s * total + offset + blk]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += blk;
                }
            }
            Op::Linear { x, w, b, n, din, dout } => {
                let (dx, dw, db) =
                    kernels::linear_backward(self.value(*x).data(), self.value(*w).data(), g, *n, *din, *dout);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Broadcast { v, hw } => {
                let dv = g.chunks(*hw).map(|c| c.iter().fold(T::zero(), |a, &x| a + x)).collect();
                self.accumulate(grads, *v, dv);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Bce { pred, target } => {
                let eps = T::of(T::BCE_EPS);
                let one = T::one();
                let scale = g[0] / T::of(target.len() as f64);
                let p = self.value(*pred).data();
                let dp = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let p = p.max(eps).min(one - eps);
                        scale * ((one - t) / (one - p) - t / p)
                    })
                    .collect();
                self.accumulate(grads, *pred, dp);
            }
        }
    }

    fn conv_accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        r: kernels::ConvGrads<T>,
    ) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b {
            self.accumulate(grads, b, r.db);
        }
    }
}
