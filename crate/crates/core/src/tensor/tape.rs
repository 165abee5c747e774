//! Wengert tape for reverse-mode differentiation.
//!
//! Operations execute eagerly and record enough to replay gradients in
//! reverse topological order. A tape is single-owner: one training step
//! builds and consumes one tape, and a second backward pass is rejected
//! unless the tape is explicitly reset.

use std::collections::HashMap;

use super::kernels::{self, PadKind};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

/// Spatial padding mode for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

impl PadMode {
    fn kind(self) -> PadKind {
        match self {
            PadMode::Zero => PadKind::Zero,
            PadMode::Reflect => PadKind::Reflect,
        }
    }
}

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

enum Op<E: Element> {
    Leaf,
    Pad {
        x: Var,
        pads: [usize; 4],
        mode: PadMode,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<E>,
    },
    Act {
        x: Var,
        kind: ActKind,
    },
    ConcatC {
        xs: Vec<Var>,
    },
    SliceC {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        mul: E,
    },
    Clamp {
        x: Var,
        lo: E,
        hi: E,
    },
    Ln {
        x: Var,
    },
    Mean {
        x: Var,
    },
    L1To {
        x: Var,
        t: Var,
    },
    SqErrTo {
        x: Var,
        c: E,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Gradients produced by one backward pass, queryable by leaf [`Var`] or
/// by the leaf tensor's buffer identity.
pub struct Gradients<E: Element> {
    by_var: HashMap<u32, Tensor<E>>,
    var_of_buffer: HashMap<usize, u32>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. a leaf var, if any flowed to it.
    pub fn by_var(&self, v: Var) -> Option<&Tensor<E>> {
        self.by_var.get(&v.0)
    }

    /// Gradient w.r.t. the leaf registered with this tensor's buffer.
    pub fn wrt(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        self.var_of_buffer
            .get(&t.buffer_id())
            .and_then(|v| self.by_var.get(v))
    }

    pub fn all_finite(&self) -> bool {
        self.by_var.values().all(|g| g.all_finite())
    }
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    leaf_of_buffer: HashMap<usize, u32>,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_of_buffer: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0 as usize].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(id)
    }

    /// Registers a tensor as a leaf. Leaves sharing one buffer map to one
    /// node, so a parameter used twice accumulates a single gradient.
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let key = t.buffer_id();
        if let Some(&id) = self.leaf_of_buffer.get(&key) {
            if self.nodes[id as usize].requires_grad == requires_grad {
                return Var(id);
            }
        }
        let v = self.push(t, requires_grad, Op::Leaf);
        self.leaf_of_buffer.insert(key, v.0);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    // ---- shape helpers -------------------------------------------------

    fn dims4(&self, v: Var, role: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4().map_err(|_| {
            Error::Shape(format!(
                "{role} must be [B,C,H,W], got shape {:?}",
                self.value(v).shape()
            ))
        })
    }

    // ---- operations ----------------------------------------------------

    /// Spatial padding; `pads = [top, bottom, left, right]`.
    pub(crate) fn pad(&mut self, x: Var, pads: [usize; 4], mode: PadMode) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x, "pad input")?;
        if mode == PadMode::Reflect {
            let max_h = pads[0].max(pads[1]);
            let max_w = pads[2].max(pads[3]);
            if max_h >= h || max_w >= w {
                return Err(Error::Shape(format!(
                    "reflect padding {pads:?} needs extents above the overhang, got {h}x{w}"
                )));
            }
        }
        let out = kernels::pad_fwd(self.value(x).data(), (b, c, h, w), pads, mode.kind());
        let value = Tensor::new(
            vec![b, c, h + pads[0] + pads[1], w + pads[2] + pads[3]],
            out,
        )?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Pad { x, pads, mode }))
    }

    /// Convolution without padding; building block for [`Tape::conv2d`].
    pub(crate) fn conv2d_nopad(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (bn, cin, h, wd) = self.dims4(x, "conv2d input")?;
        let ws = self.value(w).shape().to_vec();
        let (cout, wcin, kh, kw) = match ws.as_slice() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(Error::Shape(format!(
                    "conv2d weight must be [Cout,Cin,kH,kW], got {other:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has Cin={cin} but weight expects Cin={wcin}"
            )));
        }
        if kh < 1 || kw < 1 || stride < 1 {
            return Err(Error::InvalidArg(format!(
                "conv2d needs kernel >= 1x1 and stride >= 1, got {kh}x{kw} stride {stride}"
            )));
        }
        if h < kh || wd < kw {
            return Err(Error::Shape(format!(
                "conv2d padded input {h}x{wd} is smaller than the {kh}x{kw} kernel"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [Cout={cout}], got {:?}",
                self.value(b).shape()
            )));
        }
        let (out, oh, ow) = kernels::conv2d_fwd(
            self.value(x).data(),
            (bn, cin, h, wd),
            self.value(w).data(),
            (cout, kh, kw),
            self.value(b).data(),
            stride,
        );
        let value = Tensor::new(vec![bn, cout, oh, ow], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, stride }))
    }

    /// 2-D convolution with symmetric padding in the given mode.
    /// Output extent: `(H + 2*padding - kH)/stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let xp = if padding > 0 {
            self.pad(x, [padding; 4], mode)?
        } else {
            x
        };
        self.conv2d_nopad(xp, w, b, stride)
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]'s linear map).
    /// Weight layout `[Cin,Cout,kH,kW]`; output extent
    /// `(H-1)*stride - 2*padding + kH`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (bn, cin, h, wd) = self.dims4(x, "conv2d_transpose input")?;
        let ws = self.value(w).shape().to_vec();
        let (wcin, cout, kh, kw) = match ws.as_slice() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(Error::Shape(format!(
                    "conv2d_transpose weight must be [Cin,Cout,kH,kW], got {other:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d_transpose channel mismatch: input has Cin={cin} but weight expects Cin={wcin}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArg("conv2d_transpose stride must be >= 1".into()));
        }
        if (h - 1) * stride + kh <= 2 * padding || (wd - 1) * stride + kw <= 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d_transpose output extent would be empty for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d_transpose bias must be [Cout={cout}], got {:?}",
                self.value(b).shape()
            )));
        }
        let (out, oh, ow) = kernels::convt2d_fwd(
            self.value(x).data(),
            (bn, cin, h, wd),
            self.value(w).data(),
            (cout, kh, kw),
            self.value(b).data(),
            stride,
            padding,
        );
        let value = Tensor::new(vec![bn, cout, oh, ow], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(
            value,
            rg,
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Per (sample, channel) normalization to zero mean / unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x, "instance_norm input")?;
        if h * w < 2 {
            return Err(Error::Shape(format!(
                "instance_norm needs at least 2 spatial elements per channel, got {h}x{w}"
            )));
        }
        let (y, inv_std) = kernels::instance_norm_fwd(
            self.value(x).data(),
            (b, c, h * w),
            E::from_f64(eps),
        );
        let value = Tensor::new(vec![b, c, h, w], y)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::InstanceNorm { x, inv_std }))
    }

    /// Elementwise nonlinearity. The relu subgradient at 0 is 0.
    pub fn activation(&mut self, x: Var, kind: ActKind) -> Result<Var> {
        if let ActKind::LeakyRelu(slope) = kind {
            if !(0.0 < slope && slope < 1.0) {
                return Err(Error::InvalidArg(format!(
                    "leaky_relu slope must be in (0,1), got {slope}"
                )));
            }
        }
        let value = self.value(x).map(|v| apply_act(v, kind));
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Act { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActKind::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActKind::Sigmoid)
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArg("concat_channels of zero tensors".into()))?;
        let (b, _, h, w) = self.dims4(first, "concat_channels input")?;
        let mut c_total = 0usize;
        for &v in xs {
            let (vb, vc, vh, vw) = self.dims4(v, "concat_channels input")?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels needs co-shaped feature maps: got {:?} vs {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                )));
            }
            c_total += vc;
        }
        let hw = h * w;
        let mut data = vec![E::zero(); b * c_total * hw];
        for bi in 0..b {
            let mut at = 0usize;
            for &v in xs {
                let t = self.value(v);
                let (_, vc, _, _) = t.dims4()?;
                let src = &t.data()[bi * vc * hw..(bi + 1) * vc * hw];
                data[bi * c_total * hw + at..bi * c_total * hw + at + vc * hw]
                    .copy_from_slice(src);
                at += vc * hw;
            }
        }
        let value = Tensor::new(vec![b, c_total, h, w], data)?;
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, rg, Op::ConcatC { xs: xs.to_vec() }))
    }

    /// Channel slice `[start, start+len)`; adjoint of concatenation.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SliceC { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add needs co-shaped tensors: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul needs co-shaped tensors: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    /// `y = mul * x + add`, elementwise.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, a) = (E::from_f64(mul), E::from_f64(add));
        let value = self.value(x).map(|v| m * v + a);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Affine { x, mul: m }))
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArg(format!("clamp needs lo <= hi, got [{lo}, {hi}]")));
        }
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let value = self.value(x).map(|v| if v < l { l } else if v > h { h } else { v });
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Clamp { x, lo: l, hi: h }))
    }

    /// Natural logarithm, elementwise. Inputs must be positive; compose
    /// with [`Tape::clamp`] for the squashed adversarial losses.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Ln { x }))
    }

    /// Mean over all elements; scalar output.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = E::from_f64(t.numel() as f64);
        let mut acc = E::zero();
        for &v in t.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / n);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Mean { x }))
    }

    /// Mean absolute difference `mean |x - t|`; scalar output.
    pub fn l1_to(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.value(x).shape() != self.value(t).shape() {
            return Err(Error::Shape(format!(
                "l1_to needs co-shaped tensors: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(t).shape()
            )));
        }
        let n = E::from_f64(self.value(x).numel() as f64);
        let mut acc = E::zero();
        for (&a, &b) in self.value(x).data().iter().zip(self.value(t).data()) {
            acc += (a - b).abs();
        }
        let value = Tensor::scalar(acc / n);
        let rg = self.requires_grad(x) || self.requires_grad(t);
        Ok(self.push(value, rg, Op::L1To { x, t }))
    }

    /// Mean squared deviation from a scalar: `mean (x - c)^2`.
    pub fn sq_err_to(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = E::from_f64(c);
        let n = E::from_f64(self.value(x).numel() as f64);
        let mut acc = E::zero();
        for &a in self.value(x).data() {
            let d = a - cv;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / n);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SqErrTo { x, c: cv }))
    }

    /// Allows another backward pass on this tape.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::InvalidArg(
                "backward already ran on this tape; call reset() to run it again".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0 as usize] = Some(vec![E::one()]);

        for idx in (0..=loss.0 as usize).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }

        let mut by_var = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&node.op, grads[idx].take()) {
                if node.requires_grad {
                    by_var.insert(idx as u32, Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(Gradients {
            by_var,
            var_of_buffer: self.leaf_of_buffer.clone(),
        })
    }

    fn accumulate(grads: &mut [Option<Vec<E>>], v: Var, add: Vec<E>) {
        match &mut grads[v.0 as usize] {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += ai;
                }
            }
            slot => *slot = Some(add),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0 as usize].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Pad { x, pads, mode } => {
                if needs(*x) {
                    let dims = self.value(*x).dims4()?;
                    let dx = kernels::pad_bwd(g, dims, *pads, mode.kind());
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let xd = self.value(*x).dims4()?;
                let ws = self.value(*w).shape();
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let od = self.nodes[idx].value.dims4()?;
                let (dx, dw, db) = kernels::conv2d_bwd(
                    self.value(*x).data(),
                    xd,
                    self.value(*w).data(),
                    (cout, kh, kw),
                    *stride,
                    g,
                    (od.2, od.3),
                    needs(*x),
                    needs(*w),
                    needs(*b),
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(db) = db {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xd = self.value(*x).dims4()?;
                let ws = self.value(*w).shape();
                let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
                let od = self.nodes[idx].value.dims4()?;
                let (dx, dw, db) = kernels::convt2d_bwd(
                    self.value(*x).data(),
                    xd,
                    self.value(*w).data(),
                    (cout, kh, kw),
                    *stride,
                    *padding,
                    g,
                    (od.2, od.3),
                    needs(*x),
                    needs(*w),
                    needs(*b),
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(db) = db {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if needs(*x) {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let dx = kernels::instance_norm_bwd(
                        self.nodes[idx].value.data(),
                        inv_std,
                        (b, c, h * w),
                        g,
                    );
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Act { x, kind } => {
                if needs(*x) {
                    let dx: Vec<E> = match kind {
                        ActKind::Relu => self
                            .value(*x)
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gi)| if v > E::zero() { gi } else { E::zero() })
                            .collect(),
                        ActKind::LeakyRelu(s) => {
                            let s = E::from_f64(*s);
                            self.value(*x)
                                .data()
                                .iter()
                                .zip(g)
                                .map(|(&v, &gi)| if v > E::zero() { gi } else { gi * s })
                                .collect()
                        }
                        ActKind::Tanh => self.nodes[idx]
                            .value
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&y, &gi)| gi * (E::one() - y * y))
                            .collect(),
                        ActKind::Sigmoid => self.nodes[idx]
                            .value
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&y, &gi)| gi * y * (E::one() - y))
                            .collect(),
                    };
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatC { xs } => {
                let (b, c_total, h, w) = self.nodes[idx].value.dims4()?;
                let hw = h * w;
                let mut at = 0usize;
                for &v in xs {
                    let (_, vc, _, _) = self.value(v).dims4()?;
                    if needs(v) {
                        let mut dv = vec![E::zero(); b * vc * hw];
                        for bi in 0..b {
                            let src = &g[bi * c_total * hw + at..bi * c_total * hw + at + vc * hw];
                            dv[bi * vc * hw..(bi + 1) * vc * hw].copy_from_slice(src);
                        }
                        Self::accumulate(grads, v, dv);
                    }
                    at += vc * hw;
                }
            }
            Op::SliceC { x, start } => {
                if needs(*x) {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let (_, len, _, _) = self.nodes[idx].value.dims4()?;
                    let hw = h * w;
                    let mut dx = vec![E::zero(); b * c * hw];
                    for bi in 0..b {
                        let dst = &mut dx[bi * c * hw + start * hw..][..len * hw];
                        dst.copy_from_slice(&g[bi * len * hw..(bi + 1) * len * hw]);
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let da: Vec<E> = g.iter().zip(self.value(*b).data()).map(|(&gi, &bv)| gi * bv).collect();
                    Self::accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db: Vec<E> = g.iter().zip(self.value(*a).data()).map(|(&gi, &av)| gi * av).collect();
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Affine { x, mul } => {
                if needs(*x) {
                    let m = *mul;
                    Self::accumulate(grads, *x, g.iter().map(|&gi| gi * m).collect());
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let dx: Vec<E> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v >= lo && v <= hi { gi } else { E::zero() })
                        .collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Ln { x } => {
                if needs(*x) {
                    let dx: Vec<E> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| gi / v)
                        .collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Mean { x } => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    let gi = g[0] / E::from_f64(n as f64);
                    Self::accumulate(grads, *x, vec![gi; n]);
                }
            }
            Op::L1To { x, t } => {
                let n = E::from_f64(self.value(*x).numel() as f64);
                let gi = g[0] / n;
                let signs: Vec<E> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(self.value(*t).data())
                    .map(|(&a, &b)| {
                        if a > b {
                            gi
                        } else if a < b {
                            -gi
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                if needs(*x) {
                    Self::accumulate(grads, *x, signs.clone());
                }
                if needs(*t) {
                    Self::accumulate(grads, *t, signs.iter().map(|&s| -s).collect());
                }
            }
            Op::SqErrTo { x, c } => {
                if needs(*x) {
                    let n = E::from_f64(self.value(*x).numel() as f64);
                    let two = E::from_f64(2.0);
                    let cv = *c;
                    let gi = g[0] / n;
                    let dx: Vec<E> = self
                        .value(*x)
                        .data()
                        .iter()
                        .map(|&a| two * (a - cv) * gi)
                        .collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn apply_act<E: Element>(v: E, kind: ActKind) -> E {
    match kind {
        ActKind::Relu => {
            if v > E::zero() {
                v
            } else {
                E::zero()
            }
        }
        ActKind::LeakyRelu(s) => {
            if v > E::zero() {
                v
            } else {
                v * E::from_f64(s)
            }
        }
        ActKind::Tanh => v.tanh(),
        ActKind::Sigmoid => E::one() / (E::one() + (-v).exp()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<E: Element>(shape: Vec<usize>, data: Vec<f64>) -> Tensor<E> {
        Tensor::new(shape, data.into_iter().map(E::from_f64).collect()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_kernel_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let w = tape.constant(t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let b = tape.constant(t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, w, b, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let xv = t::<f32>(vec![1, 1, 4, 5], (0..20).map(|i| i as f64 * 0.3 - 2.0).collect());
        let x = tape.constant(xv.clone());
        let w = tape.constant(t(vec![1, 1, 1, 1], vec![1.0]));
        let b = tape.constant(t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, w, b, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let err = tape.conv2d(x, w, b, 1, 1, PadMode::Zero).unwrap_err();
        assert!(err.to_string().contains("Cin"), "diagnostic was: {err}");
    }

    #[test]
    fn conv_transpose_stamps_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(vec![1, 1, 1, 1], vec![1.0]));
        let w = tape.constant(t(vec![1, 1, 2, 2], vec![1.0; 4]));
        let b = tape.constant(t(vec![1], vec![0.0]));
        let y = tape.conv2d_transpose(x, w, b, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(vec![1, 1, 2, 2], vec![3.5; 4]));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_two_values_eps_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(vec![1, 1, 1, 2], vec![1.0, 3.0]));
        let y = tape.instance_norm(x, 0.0).unwrap();
        let out = tape.value(y).data().to_vec();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activations_match_expected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x2 = tape.constant(t(vec![2], vec![-1.0, 2.0]));
        let l = tape.activation(x2, ActKind::LeakyRelu(0.2)).unwrap();
        assert_eq!(tape.value(l).data(), &[-0.2, 2.0]);

        let x3 = tape.leaf(t(vec![1], vec![0.0]), true);
        let th = tape.tanh(x3).unwrap();
        assert_eq!(tape.value(th).item().unwrap(), 0.0);
        let grads = tape.backward(th).unwrap();
        assert_eq!(grads.by_var(x3).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn concat_and_gradient_routing() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(vec![1, 2, 4, 4], 1.0).unwrap(), true);
        let b = tape.leaf(Tensor::full(vec![1, 2, 4, 4], 2.0).unwrap(), true);
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 4, 4, 4]);
        let m = tape.mean(cat).unwrap();
        let grads = tape.backward(m).unwrap();
        // each element's grad is 1/64
        let ga = grads.by_var(a).unwrap();
        assert!(ga.data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::<f32>::from_fn(vec![1, 3, 2, 2], |i| i as f32).unwrap();
        let x = tape.constant(xv.clone());
        let y = tape.concat_channels(&[x]).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1, 2, 4, 5]).unwrap());
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn reduces_match_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.mean(x).map(|v| tape.value(v).item().unwrap()).unwrap(), 2.5);

        let same = tape.constant(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let l1 = tape.l1_to(x, same).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), 0.0);

        let half = tape.constant(t(vec![2, 2], vec![0.5; 4]));
        let se = tape.sq_err_to(half, 1.0).unwrap();
        assert_eq!(tape.value(se).item().unwrap(), 0.25);
    }

    #[test]
    fn backward_of_mean_product() {
        // loss = mean(w * x), x fixed -> grad(w) = x / numel
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(vec![4], vec![0.5, -1.0, 2.0, 0.0]), true);
        let x = tape.constant(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.mean(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.by_var(w).unwrap();
        assert_eq!(gw.data(), &[0.25, 0.5, 0.75, 1.0]);
        // detached x receives no gradient
        assert!(grads.by_var(x).is_none());
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let loss = tape.mean(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.reset();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::<f64>::new();
        let av = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| i as f64 * 0.1).unwrap();
        let bv = Tensor::<f64>::from_fn(vec![2, 2, 2, 2], |i| -(i as f64)).unwrap();
        let a = tape.constant(av.clone());
        let b = tape.constant(bv.clone());
        let cat = tape.concat_channels(&[a, b]).unwrap();
        let sa = tape.slice_channels(cat, 0, 3).unwrap();
        let sb = tape.slice_channels(cat, 3, 2).unwrap();
        assert_eq!(tape.value(sa).data(), av.data());
        assert_eq!(tape.value(sb).data(), bv.data());
    }
}
