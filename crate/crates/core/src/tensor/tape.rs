use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::fft::{self, Lanes};
use super::kernels::{self, broadcast_shape, broadcast_strides, zip_strided, MatmulPlan};
use super::{contiguous_strides, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Softplus,
    Tanh,
    /// Square root whose gradient is zero where the output is zero.
    Sqrt,
    Square,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => kernels::sigmoid(x),
            UnaryKind::Gelu => kernels::gelu(x),
            UnaryKind::Softplus => kernels::softplus(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Gelu => kernels::gelu_grad(x),
            UnaryKind::Softplus => kernels::sigmoid(x),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryKind::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// A differentiable operation defined outside the engine.
///
/// `backward` receives the input values, the forward output and the output
/// gradient, and returns one gradient buffer per input (or `None` when an
/// input receives no gradient).
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    Affine { a: usize, mul: f64 },
    MatMul(usize, usize),
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    SumAxis { a: usize, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { a: usize, rstd: Vec<f64> },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Rfft { a: usize, axis: usize },
    Irfft { re: usize, im: usize, axis: usize },
    ComplexAbs(usize, usize),
    Entropy(usize),
    DepthwiseConv(usize, usize),
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Rfft { .. } => "rfft",
            Op::Irfft { .. } => "irfft",
            Op::ComplexAbs(..) => "complex_abs",
            Op::Entropy(..) => "entropy",
            Op::DepthwiseConv(..) => "depthwise_conv",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass and differentiates
/// them in reverse. A tape is single-use: build it, run the forward pass,
/// call [`Tape::backward`] once.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter from the attached store. Repeated calls return the
    /// same node so gradients accumulate in one place.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&n) = self.bound.borrow().get(&id) {
            return Var(n);
        }
        let store = self
            .params
            .expect("tape has no parameter store attached");
        let v = self.variable(store.get(id).clone());
        self.bound.borrow_mut().insert(id, v.0);
        v
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&self, kind: UnaryKind, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Unary(kind, a.0), self.needs(&[a.0]))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    /// `mul * a + add`.
    pub fn affine(&self, a: Var, mul: f64, add: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| mul * v + add).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Affine { a: a.0, mul }, self.needs(&[a.0]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.affine(a, 1.0, c)
    }

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = |p: f64, q: f64| match kind {
            BinaryKind::Add => p + q,
            BinaryKind::Sub => p - q,
            BinaryKind::Mul => p * q,
            BinaryKind::Div => p / q,
        };
        let out = if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::raw(x.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(x.shape(), y.shape())?;
            let sa = broadcast_strides(x.shape(), &shape);
            let sb = broadcast_strides(y.shape(), &shape);
            let n = shape.iter().product();
            let mut data = vec![0.0; n];
            let (xd, yd) = (x.data(), y.data());
            zip_strided(&shape, &sa, &sb, |i, ia, ib| data[i] = f(xd[ia], yd[ib]));
            Tensor::raw(shape, data)
        };
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ---- contractions and layout -------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, N]` with broadcast batch axes.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(x.shape(), y.shape())?;
        let data = plan.forward(x.data(), y.data());
        let out = Tensor::raw(plan.out_shape(), data);
        Ok(self.push(out, Op::MatMul(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let own = contiguous_strides(x.shape());
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let mut data = vec![0.0; x.numel()];
        let xd = x.data();
        kernels::visit_strided(&shape, &strides, |i, o| data[i] = xd[o]);
        let out = Tensor::raw(shape, data);
        Ok(self.push(out, Op::Permute { a: a.0, perm: perm.to_vec() }, self.needs(&[a.0])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec())
            .map_err(|_| Error::shape(format!("cannot reshape {:?} to {shape:?}", x.shape())))?;
        Ok(self.push(out, Op::Reshape(a.0), self.needs(&[a.0])))
    }

    /// Sums over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let lanes = Lanes::new(x.shape(), axis);
        let mut data = vec![0.0; lanes.outer * lanes.inner];
        let xd = x.data();
        for o in 0..lanes.outer {
            for s in 0..lanes.len {
                let src = &xd[(o * lanes.len + s) * lanes.inner..][..lanes.inner];
                let dst = &mut data[o * lanes.inner..][..lanes.inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::raw(shape, data);
        Ok(self.push(out, Op::SumAxis { a: a.0, axis }, self.needs(&[a.0])))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn softmax(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let out = Tensor::raw(x.shape().to_vec(), kernels::softmax_rows(x.data(), n));
        self.push(out, Op::Softmax(a.0), self.needs(&[a.0]))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let out = Tensor::raw(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), n));
        self.push(out, Op::LogSoftmax(a.0), self.needs(&[a.0]))
    }

    /// Normalizes the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let (y, rstd) = kernels::layer_norm_rows(x.data(), n, eps);
        let out = Tensor::raw(x.shape().to_vec(), y);
        self.push(out, Op::LayerNorm { a: a.0, rstd }, self.needs(&[a.0]))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                x.shape()
            )));
        }
        let lanes = Lanes::new(x.shape(), axis);
        let mut data = Vec::with_capacity(lanes.outer * len * lanes.inner);
        let xd = x.data();
        for o in 0..lanes.outer {
            let from = (o * lanes.len + start) * lanes.inner;
            data.extend_from_slice(&xd[from..from + len * lanes.inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::raw(shape, data);
        Ok(self.push(out, Op::Narrow { a: a.0, axis, start }, self.needs(&[a.0])))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat axis out of range"));
        }
        for v in &values {
            let ok = v.rank() == rank
                && v.shape().iter().zip(first.shape()).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !ok {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with {:?} on axis {axis}",
                    first.shape(),
                    v.shape()
                )));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.numel() / outer;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::raw(shape, data), Op::Concat { parts: ids, axis }, rg))
    }

    // ---- spectral ----------------------------------------------------------

    /// One-sided FFT along `axis`. Returns `(re, im)`, each shaped like the
    /// input with `axis` shortened to `T/2 + 1`.
    pub fn rfft(&self, a: Var, axis: usize) -> Result<(Var, Var)> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("rfft axis out of range"));
        }
        let lanes = Lanes::new(x.shape(), axis);
        let (re, im) = fft::rfft_lanes(x.data(), lanes);
        let mut shape = vec![2];
        shape.extend_from_slice(x.shape());
        shape[axis + 1] = fft::bins(lanes.len);
        let mut data = re;
        data.extend(im);
        let both = self.push(Tensor::raw(shape.clone(), data), Op::Rfft { a: a.0, axis }, self.needs(&[a.0]));
        let inner = shape[1..].to_vec();
        let re = self.reshape(self.narrow(both, 0, 0, 1)?, &inner)?;
        let im = self.reshape(self.narrow(both, 0, 1, 1)?, &inner)?;
        Ok((re, im))
    }

    /// Inverse of [`Tape::rfft`] producing `t` samples along `axis`.
    pub fn irfft(&self, re: Var, im: Var, axis: usize, t: usize) -> Result<Var> {
        let (xr, xi) = (self.value(re), self.value(im));
        if xr.shape() != xi.shape() || axis >= xr.rank() || xr.shape()[axis] != fft::bins(t) {
            return Err(Error::shape(format!(
                "irfft to {t} samples got planes {:?} / {:?}",
                xr.shape(),
                xi.shape()
            )));
        }
        let mut shape = xr.shape().to_vec();
        shape[axis] = t;
        let lanes = Lanes::new(&shape, axis);
        let data = fft::irfft_lanes(xr.data(), xi.data(), lanes);
        let rg = self.needs(&[re.0, im.0]);
        Ok(self.push(Tensor::raw(shape, data), Op::Irfft { re: re.0, im: im.0, axis }, rg))
    }

    /// Elementwise `sqrt(re^2 + im^2)`; gradient is zero where the magnitude is zero.
    pub fn complex_abs(&self, re: Var, im: Var) -> Result<Var> {
        let (xr, xi) = (self.value(re), self.value(im));
        if xr.shape() != xi.shape() {
            return Err(Error::shape("complex_abs planes differ in shape"));
        }
        let data = xr.data().iter().zip(xi.data()).map(|(r, i)| r.hypot(*i)).collect();
        let rg = self.needs(&[re.0, im.0]);
        Ok(self.push(Tensor::raw(xr.shape().to_vec(), data), Op::ComplexAbs(re.0, im.0), rg))
    }

    /// Shannon entropy (natural log) of each non-negative row of the last
    /// axis after normalizing it to sum one. All-zero rows map to 0.
    pub fn entropy(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("entropy needs non-negative inputs"));
        }
        let data = x.data().chunks_exact(n).map(row_entropy).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Ok(self.push(Tensor::raw(shape, data), Op::Entropy(a.0), self.needs(&[a.0])))
    }

    /// Causal depthwise convolution of `x: [..., T, D]` with taps `w: [K, D]`.
    pub fn depthwise_conv(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, d, k) = conv_dims(xv.shape(), wv.shape())?;
        let outer = xv.numel() / (t * d);
        let data = kernels::depthwise_causal(xv.data(), wv.data(), outer, t, d, k);
        let rg = self.needs(&[x.0, w.0]);
        Ok(self.push(Tensor::raw(xv.shape().to_vec(), data), Op::DepthwiseConv(x.0, w.0), rg))
    }

    /// Records an externally defined op whose forward value is already computed.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backward_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let bound = self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, bound })
    }
}

fn row_entropy(row: &[f64]) -> f64 {
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -row
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            p * p.ln()
        })
        .sum::<f64>()
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() < 2 || w.len() != 2 || x[x.len() - 1] != w[1] {
        return Err(Error::shape(format!(
            "depthwise conv expects x [..., T, D] and w [K, D], got {x:?} and {w:?}"
        )));
    }
    Ok((x[x.len() - 2], x[x.len() - 1], w[0]))
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, src: &[f64]) {
    if let Some(dst) = accumulate(grads, nodes, id) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for (((d, gi), xi), yi) in dst.iter_mut().zip(g).zip(x.data()).zip(out.data()) {
                    *d += gi * kind.derivative(*xi, *yi);
                }
            }
        }
        Op::Affine { a, mul } => {
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for (d, gi) in dst.iter_mut().zip(g) {
                    *d += mul * gi;
                }
            }
        }
        Op::Binary(kind, a, b) => binary_backward(nodes, *kind, *a, *b, out.shape(), g, grads),
        Op::MatMul(a, b) => {
            let (x, y) = (&nodes[*a].value, &nodes[*b].value);
            let plan = MatmulPlan::new(x.shape(), y.shape()).expect("validated in forward");
            let mut da = nodes[*a].requires_grad.then(|| vec![0.0; x.numel()]);
            let mut db = nodes[*b].requires_grad.then(|| vec![0.0; y.numel()]);
            plan.backward(x.data(), y.data(), g, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                add_into(grads, nodes, *a, &da);
            }
            if let Some(db) = db {
                add_into(grads, nodes, *b, &db);
            }
        }
        Op::Permute { a, perm } => {
            let x = &nodes[*a].value;
            let own = contiguous_strides(x.shape());
            let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
            if let Some(dst) = accumulate(grads, nodes, *a) {
                kernels::visit_strided(out.shape(), &strides, |i, o| dst[o] += g[i]);
            }
        }
        Op::Reshape(a) => add_into(grads, nodes, *a, g),
        Op::SumAxis { a, axis } => {
            let x = &nodes[*a].value;
            let lanes = Lanes::new(x.shape(), *axis);
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for o in 0..lanes.outer {
                    let src = &g[o * lanes.inner..][..lanes.inner];
                    for s in 0..lanes.len {
                        let row = &mut dst[(o * lanes.len + s) * lanes.inner..][..lanes.inner];
                        for (d, v) in row.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for ((y, gr), d) in out.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(dst.chunks_exact_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((di, yi), gi) in d.iter_mut().zip(y).zip(gr) {
                        *di += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap();
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for ((y, gr), d) in out.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(dst.chunks_exact_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((di, yi), gi) in d.iter_mut().zip(y).zip(gr) {
                        *di += gi - yi.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let n = *out.shape().last().unwrap();
            if let Some(dst) = accumulate(grads, nodes, *a) {
                for (r, ((y, gr), d)) in out
                    .data()
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dst.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for ((di, yi), gi) in d.iter_mut().zip(y).zip(gr) {
                        *di += rstd[r] * (gi - mg - yi * mgy);
                    }
                }
            }
        }
        Op::Narrow { a, axis, start } => {
            let x = &nodes[*a].value;
            let lanes = Lanes::new(x.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(dst) = accumulate(grads, nodes, *a) {
                let chunk = len * lanes.inner;
                for o in 0..lanes.outer {
                    let from = (o * lanes.len + start) * lanes.inner;
                    for (d, v) in dst[from..from + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                        *d += v;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let row = out.numel() / outer;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p].value.numel() / outer;
                if let Some(dst) = accumulate(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..][..chunk];
                        for (d, v) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Rfft { a, axis } => {
            let x = &nodes[*a].value;
            let lanes = Lanes::new(x.shape(), *axis);
            let half = g.len() / 2;
            let dx = fft::rfft_lanes_adjoint(&g[..half], &g[half..], lanes);
            add_into(grads, nodes, *a, &dx);
        }
        Op::Irfft { re, im, axis } => {
            let lanes = Lanes::new(out.shape(), *axis);
            let (dr, di) = fft::irfft_lanes_adjoint(g, lanes);
            add_into(grads, nodes, *re, &dr);
            add_into(grads, nodes, *im, &di);
        }
        Op::ComplexAbs(re, im) => {
            let (xr, xi) = (nodes[*re].value.data(), nodes[*im].value.data());
            let y = out.data();
            let ratio = |x: &[f64]| -> Vec<f64> {
                x.iter()
                    .zip(y)
                    .zip(g)
                    .map(|((xv, yv), gv)| if *yv > 0.0 { gv * xv / yv } else { 0.0 })
                    .collect()
            };
            if nodes[*re].requires_grad {
                add_into(grads, nodes, *re, &ratio(xr));
            }
            if nodes[*im].requires_grad {
                add_into(grads, nodes, *im, &ratio(xi));
            }
        }
        Op::Entropy(a) => {
            let x = &nodes[*a].value;
            let n = *x.shape().last().unwrap();
            if let Some(dst) = accumulate(grads, nodes, *a) {
                // dH/dm_f = -(ln p_f + H) / S
                for (r, (row, d)) in x.data().chunks_exact(n).zip(dst.chunks_exact_mut(n)).enumerate() {
                    let total: f64 = row.iter().sum();
                    if total <= 0.0 {
                        continue;
                    }
                    let h = out.data()[r];
                    for (di, &v) in d.iter_mut().zip(row) {
                        if v > 0.0 {
                            *di += -g[r] * ((v / total).ln() + h) / total;
                        }
                    }
                }
            }
        }
        Op::DepthwiseConv(x, w) => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (t, d, k) = conv_dims(xv.shape(), wv.shape()).expect("validated in forward");
            let outer = xv.numel() / (t * d);
            let mut gx = nodes[*x].requires_grad.then(|| vec![0.0; xv.numel()]);
            let mut gw = nodes[*w].requires_grad.then(|| vec![0.0; wv.numel()]);
            kernels::depthwise_causal_backward(
                xv.data(),
                wv.data(),
                g,
                outer,
                t,
                d,
                k,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
            );
            if let Some(gx) = gx {
                add_into(grads, nodes, *x, &gx);
            }
            if let Some(gw) = gw {
                add_into(grads, nodes, *w, &gw);
            }
        }
        Op::Custom { inputs, op } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let parts = op.backward(&values, out, g);
            for (&i, part) in inputs.iter().zip(parts) {
                if let Some(part) = part {
                    add_into(grads, nodes, i, &part);
                }
            }
        }
    }
}

fn binary_backward(
    nodes: &[Node],
    kind: BinaryKind,
    a: usize,
    b: usize,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (x, y) = (&nodes[a].value, &nodes[b].value);
    let (xd, yd) = (x.data(), y.data());
    let (need_a, need_b) = (nodes[a].requires_grad, nodes[b].requires_grad);
    let mut ga = need_a.then(|| vec![0.0; x.numel()]);
    let mut gb = need_b.then(|| vec![0.0; y.numel()]);
    let mut step = |i: usize, ia: usize, ib: usize| {
        let gi = g[i];
        let (da, db) = match kind {
            BinaryKind::Add => (gi, gi),
            BinaryKind::Sub => (gi, -gi),
            BinaryKind::Mul => (gi * yd[ib], gi * xd[ia]),
            BinaryKind::Div => (gi / yd[ib], -gi * xd[ia] / (yd[ib] * yd[ib])),
        };
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db;
        }
    };
    if x.shape() == y.shape() {
        for i in 0..g.len() {
            step(i, i, i);
        }
    } else {
        let sa = broadcast_strides(x.shape(), out_shape);
        let sb = broadcast_strides(y.shape(), out_shape);
        zip_strided(out_shape, &sa, &sb, step);
    }
    if let Some(ga) = ga {
        add_into(grads, nodes, a, &ga);
    }
    if let Some(gb) = gb {
        add_into(grads, nodes, b, &gb);
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; `None` if it did not
    /// influence the loss or does not require a gradient.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a bound parameter (zeros if bound but unused).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_deref())
    }

    /// Gradients of every bound parameter, keyed by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.bound.iter().map(|&(p, n)| (p, self.grads[n].as_deref()))
    }
}
