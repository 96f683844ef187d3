use super::kernels::{self, ConvGeom, MatmulPlan};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BiasAdd { x: Var, b: Var, axis: usize },
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    Softmax { x: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    ChannelNorm { x: Var, inv_std: Vec<T>, xhat: Vec<T>, batch_stats: bool },
    RowNorm { x: Var, inv_std: Vec<T>, xhat: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, axis: usize },
    MaskMul { x: Var, mask: Vec<T> },
    GlobalAvgPool(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of forward operations for one reverse-mode pass.
///
/// Values live inside the tape and are addressed through [`Var`] handles.
/// Nodes are appended in execution order, so the node list is a topological
/// order by construction. Leaves registered with `requires_grad` keep their
/// gradients across backward passes until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name.to_string() });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x) => vec![*x],
            Op::BiasAdd { x, b, .. } => vec![*x, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::Softmax { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::ChannelNorm { x, .. }
            | Op::RowNorm { x, .. }
            | Op::MaskMul { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::ChannelAffine { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.is_requires_grad();
        let mut value = t;
        value.set_requires_grad(false);
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value(x).map(f)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.unary(x, |a| a * c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.unary(x, |a| a + c);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    /// Adds a vector `b` of length `shape[axis]` broadcast along every other axis.
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.value(b).numel() != xs[axis] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match axis {axis} of {xs:?}",
                self.shape(b)
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&xs, axis);
        let bd = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for (j, &bj) in bd.iter().enumerate().take(len) {
                let base = (o * len + j) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bj;
                }
            }
        }
        self.push(Tensor::new(&xs, data)?, Op::BiasAdd { x, b, axis }, "bias_add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.max(T::zero()));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, kernels::gelu_scalar);
        self.push(v, Op::Gelu(x), "gelu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.exp());
        self.push(v, Op::Exp(x), "exp")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.abs());
        self.push(v, Op::Abs(x), "abs")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), "mean")
    }

    // ---- linear algebra / convolution ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = kernels::matmul_plan(self.shape(a), self.shape(b))?;
        let data = kernels::matmul_forward(&plan, self.data(a), self.data(b));
        let v = Tensor::new(&plan.out_shape, data)?;
        self.push(v, Op::MatMul { a, b, plan }, "matmul")
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, false)?;
        let data = kernels::conv2d_forward(&geom, self.data(x), self.data(w));
        let v = Tensor::new(&[geom.batch, geom.cout, geom.ho, geom.wo], data)?;
        self.push(v, Op::Conv2d { x, w, geom }, "conv2d")
    }

    /// One `[kh,kw]` filter per channel, weights shaped `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, true)?;
        let data = kernels::depthwise_forward(&geom, self.data(x), self.data(w));
        let v = Tensor::new(&[geom.batch, geom.cout, geom.ho, geom.wo], data)?;
        self.push(v, Op::Depthwise { x, w, geom }, "depthwise_conv2d")
    }

    // ---- normalization / probability --------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let data = kernels::softmax_forward(&shape, axis, self.data(x));
        self.push(Tensor::new(&shape, data)?, Op::Softmax { x, axis }, "softmax")
    }

    /// Channel standardization of `[B,C,..]` with the given statistics.
    ///
    /// With `batch_stats` the mean and variance are treated as functions of `x`
    /// (training-mode batch normalization); otherwise they are constants
    /// (stored running moments).
    pub fn channel_normalize(
        &mut self,
        x: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || mean.len() != shape[1] || var.len() != shape[1] {
            return Err(Error::dim(format!(
                "channel statistics of length {} for input {shape:?}",
                mean.len()
            )));
        }
        let stats = kernels::channel_normalize(&shape, self.data(x), mean, var, eps);
        let v = Tensor::new(&shape, stats.xhat.clone())?;
        let op = Op::ChannelNorm {
            x,
            inv_std: stats.inv_std,
            xhat: stats.xhat,
            batch_stats,
        };
        self.push(v, op, "channel_normalize")
    }

    /// Standardizes each row over the last axis.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let stats = kernels::row_normalize(&shape, self.data(x), eps);
        let v = Tensor::new(&shape, stats.xhat.clone())?;
        let op = Op::RowNorm {
            x,
            inv_std: stats.inv_std,
            xhat: stats.xhat,
        };
        self.push(v, op, "row_normalize")
    }

    /// `gamma[c] * x + beta[c]` with `c` indexing `axis`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape.get(axis).copied().unwrap_or(0);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!(
                "affine parameters of length {}/{} for axis {axis} of {shape:?}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut data = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in base..base + inner {
                    data[i] = g[j] * xd[i] + b[j];
                }
            }
        }
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::ChannelAffine { x, gamma, beta, axis }, "channel_affine")
    }

    /// Elementwise product with a fixed mask (dropout with pre-scaled keep mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("mask length does not match input"));
        }
        let data = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::MaskMul { x, mask }, "dropout")
    }

    /// Mean over the spatial axes of `[B,C,H,W]`, giving `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects [B,C,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let n = T::lit(hw as f64);
        let data = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        self.push(Tensor::new(&[s[0], s[1]], data)?, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Layer normalization over the last axis followed by a learnable affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.row_normalize(x, eps)?;
        let last = self.shape(n).len() - 1;
        self.channel_affine(n, gamma, beta, last)
    }

    /// Per-channel mean and biased variance of a `[B,C,..]` value.
    pub fn channel_moments(&self, x: Var) -> (Vec<T>, Vec<T>) {
        kernels::channel_moments(self.shape(x), self.data(x))
    }

    /// Inverted dropout: active only when `training`, survivors scaled by `1/(1-p)`.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        p: T,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || p <= T::zero() {
            return Ok(x);
        }
        if p >= T::one() {
            return Err(Error::Contract("dropout probability must be below 1".into()));
        }
        let keep = T::one() / (T::one() - p);
        let pf = p.as_f64();
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < pf { T::zero() } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                data.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let v = Tensor::new(&shape, data)?;
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let data = kernels::narrow(&shape, self.data(x), axis, start, len);
        let mut out = shape.clone();
        out[axis] = len;
        let v = Tensor::new(&out, data)?;
        self.push(v, Op::Narrow { x, axis, start, len }, "narrow")
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim(format!(
                "split sizes {sizes:?} do not tile axis {axis} of {shape:?}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and accumulates the
    /// result into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(&gv, &y)| gv * y).collect()),
                    (*b, g.iter().zip(ad).map(|(&gv, &x)| gv * x).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::BiasAdd { x, b, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        let base = (o * len + j) * inner;
                        *gbj += g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::MatMul { a, b, plan } => {
                let (ga, gb) = kernels::matmul_backward(
                    plan,
                    self.data(*a),
                    self.data(*b),
                    g,
                    self.rg(*a),
                    self.rg(*b),
                );
                let mut v = Vec::new();
                if let Some(ga) = ga {
                    v.push((*a, ga));
                }
                if let Some(gb) = gb {
                    v.push((*b, gb));
                }
                v
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                );
                let mut v = Vec::new();
                if let Some(gx) = gx {
                    v.push((*x, gx));
                }
                if let Some(gw) = gw {
                    v.push((*w, gw));
                }
                v
            }
            Op::Depthwise { x, w, geom } => {
                let (gx, gw) = kernels::depthwise_backward(geom, self.data(*x), self.data(*w), g);
                vec![(*x, gx), (*w, gw)]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, kernels::softmax_backward(node.value.shape(), *axis, out, g))]
            }
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            )],
            Op::Gelu(x) => vec![(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            )],
            Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(&gv, &y)| gv * y).collect())],
            Op::Abs(x) => vec![(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (_, gx) = kernels::permute(node.value.shape(), g, &inv).expect("valid inverse");
                vec![(*x, gx)]
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let mut start = 0;
                xs.iter()
                    .map(|&v| {
                        let len = self.shape(v)[*axis];
                        let gi = kernels::narrow(shape, g, *axis, start, len);
                        start += len;
                        (v, gi)
                    })
                    .collect()
            }
            Op::Narrow { x, axis, start, len } => {
                vec![(*x, kernels::narrow_backward(self.shape(*x), g, *axis, *start, *len))]
            }
            Op::ChannelNorm {
                x,
                inv_std,
                xhat,
                batch_stats,
            } => {
                let (b, c, inner) = kernels::axis_split(node.value.shape(), 1);
                let mut gx = vec![T::zero(); g.len()];
                if *batch_stats {
                    for ch in 0..c {
                        let idx = (0..b).flat_map(move |bi| {
                            let base = (bi * c + ch) * inner;
                            base..base + inner
                        });
                        kernels::norm_group_backward(idx, b * inner, xhat, g, inv_std[ch], &mut gx);
                    }
                } else {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * inner;
                            for i in base..base + inner {
                                gx[i] = g[i] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::RowNorm { x, inv_std, xhat } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    kernels::norm_group_backward(r * d..(r + 1) * d, d, xhat, g, is, &mut gx);
                }
                vec![(*x, gx)]
            }
            Op::ChannelAffine { x, gamma, beta, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let (gm, xd) = (self.data(*gamma), self.data(*x));
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); len];
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in base..base + inner {
                            gx[i] = g[i] * gm[j];
                            gg[j] += g[i] * xd[i];
                            gb[j] += g[i];
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaskMul { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect())]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let n = T::lit(hw as f64);
                let gx = g.iter().flat_map(|&gv| std::iter::repeat(gv / n).take(hw)).collect();
                vec![(*x, gx)]
            }
        }
    }
}
