//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, which is a topological order, so the
//! backward pass is a single reverse sweep. Parameters are borrowed from a
//! [`ParameterSet`] rather than copied onto the tape; a parameter used several
//! times (shared weights) maps to one node and accumulates its gradient.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, T: Scalar> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T: Scalar> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    AddScalar {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    MulChannel {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar = f32> {
    params: Option<&'p ParameterSet<T>>,
    track_params: bool,
    nodes: Vec<Node<'p, T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape with no parameter set attached.
    pub fn new() -> Self {
        Self {
            params: None,
            track_params: false,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    /// A tape reading weights from `params`. When `track` is false no
    /// gradients are kept for them (inference).
    pub fn with_params(params: &'p ParameterSet<T>, track: bool) -> Self {
        Self {
            params: Some(params),
            track_params: track,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. It receives a gradient iff `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Records (once per tape) the parameter called `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let id = params.require(name)?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Borrowed(params.value(id)),
            op: Op::Param,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn param_opt(&mut self, name: &str) -> Result<Option<Var>> {
        match self.params.and_then(|p| p.id(name)) {
            Some(_) => self.param(name).map(Some),
            None => Ok(None),
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let ws = self.value(w).shape().to_vec();
        let [o, cg, k, k2] = ws[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be OIkk, got {ws:?}"),
            ));
        };
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be 1x1 or 3x3, got {k}x{k2}"),
            ));
        }
        if stride == 0 || groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={c} out={o} not divisible into {groups} groups"),
            ));
        }
        if cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis: x has {c} channels ({groups} groups), weight expects {cg} per group"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias axis: expected [{o}], got {:?}", self.value(b).shape()),
                ));
            }
        }
        let pad = k / 2;
        let geo = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geo,
            self.needs(w),
        );
        let t = Tensor::new(&[n, o, geo.ho, geo.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geo, cols }, needs))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::Config(format!(
                "leaky ReLU slope {slope} outside (0,1)"
            )));
        }
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(x);
        Ok(self.push(t, Op::LeakyRelu { x, slope }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid { x }, needs)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let needs = self.needs(x);
        self.push(t, Op::Softplus { x }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(t, Op::AddScalar { x }, needs)
    }

    /// NCHW -> NC spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let data = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| data[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GlobalAvgPool { x, plane }, needs))
    }

    /// `x W^T + b` for `x: N x D`, `W: D' x D`, `b: D'`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, d], &[dout, din]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape(
                "fully_connected",
                format!("x {xs:?}, w {ws:?} must be rank 2"),
            ));
        };
        if d != din {
            return Err(Error::shape(
                "fully_connected",
                format!("inner axis: x has {d} features, w expects {din}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(
                    "fully_connected",
                    format!(
                        "bias axis: expected [{dout}], got {:?}",
                        self.value(b).shape()
                    ),
                ));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            d,
            dout,
            T::one(),
            self.value(x).data(),
            d as isize,
            1,
            self.value(w).data(),
            1,
            d as isize,
            beta,
            &mut out,
            dout as isize,
            1,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[n, dout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    /// Concatenation along axis 1; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat_channels", "tensors need rank >= 2"));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("non-channel axes differ: {s0:?} vs {s:?}"),
                ));
            }
            widths.push(s[1]);
        }
        let inner: usize = s0[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(s0[0] * total * inner);
        for n in 0..s0[0] {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let needs = xs.iter().any(|&v| self.needs(v));
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// Scales channel `c` of sample `n` of `x: NCHW` by `s[n, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::shape(
                "mul_broadcast",
                format!(
                    "scale {:?} does not match [{n}, {c}]",
                    self.value(s).shape()
                ),
            ));
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let xv = self.value(x).data();
        let out: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / plane])
            .collect();
        let needs = self.needs(x) || self.needs(s);
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(t, Op::MulChannel { x, s }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op(a, b), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Reverse sweep seeded with `d(objective)/d(var)` for each seed.
    ///
    /// Seeding with tensor `R` on output `y` yields the gradient of `sum(R * y)`.
    pub fn backward(&self, seeds: &[(Var, &Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for &(v, seed) in seeds {
            if seed.shape() != self.value(v).shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed {:?} for output {:?}",
                        seed.shape(),
                        self.value(v).shape()
                    ),
                ));
            }
            accumulate(&mut grads[v.0], seed.data());
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.apply_rule(i, &g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].take()))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.value(v).data();
        let mut send = |v: Var, d: Vec<T>| {
            if self.needs(v) {
                accumulate_owned(&mut grads[v.0], d);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geo, cols } => {
                let need = (
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                let cg = kernels::conv_backward(val(*x), val(*w), g, geo, cols, need);
                if let Some(dx) = cg.dx {
                    send(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    send(*b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&gi, &a) in g.iter().zip(argmax) {
                    dx[a as usize] = dx[a as usize] + gi;
                }
                send(*x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope })
                    .collect();
                send(*x, dx);
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.get().data();
                let dx = y
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect();
                send(*x, dx);
            }
            Op::Softplus { x } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * sigmoid(v))
                    .collect();
                send(*x, dx);
            }
            Op::AddScalar { x } | Op::Reshape { x } => send(*x, g.to_vec()),
            Op::GlobalAvgPool { x, plane } => {
                let inv = T::one() / T::of(*plane as f64);
                let dx = (0..g.len() * plane).map(|j| g[j / plane] * inv).collect();
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, d) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        dout,
                        d,
                        T::one(),
                        g,
                        dout as isize,
                        1,
                        val(*w),
                        d as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        d as isize,
                        1,
                    );
                    send(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * d];
                    T::gemm(
                        dout,
                        n,
                        d,
                        T::one(),
                        g,
                        1,
                        dout as isize,
                        val(*x),
                        d as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        d as isize,
                        1,
                    );
                    send(*w, dw);
                }
                if let Some(b) = b {
                    let db = (0..dout)
                        .map(|j| (0..n).map(|r| g[r * dout + j]).sum())
                        .collect();
                    send(*b, db);
                }
            }
            Op::Concat { xs, widths } => {
                let shape = self.nodes[i].value.get().shape();
                let inner: usize = shape[2..].iter().product();
                let total = shape[1];
                let mut offset = 0;
                for (&v, &c) in xs.iter().zip(widths) {
                    let mut dx = Vec::with_capacity(shape[0] * c * inner);
                    for n in 0..shape[0] {
                        let start = (n * total + offset) * inner;
                        dx.extend_from_slice(&g[start..start + c * inner]);
                    }
                    send(v, dx);
                    offset += c;
                }
            }
            Op::MulChannel { x, s } => {
                let sv = val(*s);
                let xv = val(*x);
                let plane = xv.len() / sv.len();
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gi)| gi * sv[j / plane])
                        .collect();
                    send(*x, dx);
                }
                if self.needs(*s) {
                    let ds = (0..sv.len())
                        .map(|c| {
                            let r = c * plane..(c + 1) * plane;
                            g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    send(*s, ds);
                }
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a recorded input; `None` if it does not require a gradient
    /// or was never reached.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients with zeros for parameters the output does not depend on.
    pub fn param_or_zero(&self, id: ParamId, len: usize) -> Vec<T> {
        self.param(id)
            .map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }

    /// Adds every parameter gradient into `acc` (one slot per parameter).
    pub fn add_params_into(&self, acc: &mut [Vec<T>]) {
        for (slot, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                slot.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
