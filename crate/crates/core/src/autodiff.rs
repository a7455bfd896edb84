//! Reverse-mode differentiation over rank-4 tensors.
//!
//! Network code is written once against [`Graph`]. A [`Tape`] records every
//! primitive with its operands so [`Tape::backward`] can replay them in
//! reverse; [`Eager`] evaluates the same code without recording, letting
//! intermediate activations drop as soon as they go out of scope.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, Window};
use crate::ssim_kernel::{ssim_plane, SsimConstants};
use crate::tensor::{Shape, Tensor};

/// The primitive set the network is built from.
pub trait Graph {
    type Node: Clone;

    /// A constant input; no gradient is tracked for it.
    fn input(&mut self, value: Tensor) -> Self::Node;
    /// A trainable leaf.
    fn param(&mut self, value: &Tensor) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::Node,
        weight: &Self::Node,
        bias: &Self::Node,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Node>;
    fn conv_transpose2d(
        &mut self,
        x: &Self::Node,
        weight: &Self::Node,
        bias: &Self::Node,
        stride: usize,
    ) -> Result<Self::Node>;
    fn relu(&mut self, x: &Self::Node) -> Self::Node;
    fn sigmoid(&mut self, x: &Self::Node) -> Self::Node;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn mul_channelwise(&mut self, u: &Self::Node, s: &Self::Node) -> Result<Self::Node>;
    fn concat_channels(&mut self, parts: &[Self::Node]) -> Result<Self::Node>;
    fn global_avg_pool(&mut self, x: &Self::Node) -> Self::Node;
}

// ---------------------------------------------------------------------------
// Forward primitives shared by both executors.

fn check_bias(op: &'static str, bias: &Tensor, cout: usize) -> Result<()> {
    if bias.len() != cout {
        return Err(Error::dim(op, format!("bias has {} entries, expected {cout}", bias.len())));
    }
    Ok(())
}

fn conv2d_window(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<Window> {
    if x.c != w.c {
        return Err(Error::dim(
            "conv2d",
            format!("input has {} channels but weight {w} expects {}", x.c, w.c),
        ));
    }
    if w.h != w.w || w.h == 0 {
        return Err(Error::dim("conv2d", format!("kernel {w} is not square")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be at least 1"));
    }
    if x.h + 2 * padding < w.h || x.w + 2 * padding < w.w {
        return Err(Error::dim(
            "conv2d",
            format!("padded input {x} (pad {padding}) smaller than kernel {w}"),
        ));
    }
    Ok(Window::new(x.c, x.h, x.w, w.h, stride, padding))
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let win = conv2d_window(xs, ws, stride, padding)?;
    check_bias("conv2d", b, ws.n)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, win.out_h, win.out_w));
    kernels::conv2d_forward(x.data(), xs.n, &win, w.data(), b.data(), out.data_mut());
    Ok(out)
}

fn conv_t_window(x: Shape, w: Shape, stride: usize) -> Result<Window> {
    if x.c != w.n {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("input has {} channels but weight {w} expects {}", x.c, w.n),
        ));
    }
    if w.h != w.w || w.h == 0 || stride == 0 {
        return Err(Error::dim("conv_transpose2d", format!("bad kernel {w} / stride {stride}")));
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::dim("conv_transpose2d", format!("empty input {x}")));
    }
    Ok(kernels::transposed_window(w.c, x.h, x.w, w.h, stride))
}

fn conv_t_fwd(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let win = conv_t_window(xs, ws, stride)?;
    check_bias("conv_transpose2d", b, ws.c)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, win.in_h, win.in_w));
    kernels::conv_transpose2d_forward(x.data(), xs.n, xs.c, &win, w.data(), b.data(), out.data_mut());
    Ok(out)
}

fn relu_fwd(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Logistic function, split by sign so neither branch overflows.
pub fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add", format!("{} vs {}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

fn mul_ch_fwd(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (us, ss) = (u.shape(), s.shape());
    if ss != Shape::new(us.n, us.c, 1, 1) {
        return Err(Error::dim("mul_channelwise", format!("scale {ss} does not fit {us}")));
    }
    let plane = us.plane();
    let mut out = u.clone();
    for (chunk, &k) in out.data_mut().chunks_mut(plane).zip(s.data()) {
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

fn concat_fwd(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "empty list"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::dim("concat_channels", format!("{s} does not match {first}")));
        }
        c += s.c;
    }
    let shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for b in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec(shape, data)
}

fn gap_fwd(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|c| c.iter().sum::<f64>() / plane).collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

// ---------------------------------------------------------------------------
// Eager executor.

/// Evaluates a graph without recording it.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Node = Rc<Tensor>;

    fn input(&mut self, value: Tensor) -> Rc<Tensor> {
        Rc::new(value)
    }

    fn param(&mut self, value: &Tensor) -> Rc<Tensor> {
        Rc::new(value.clone())
    }

    fn value<'a>(&'a self, node: &'a Rc<Tensor>) -> &'a Tensor {
        node
    }

    fn conv2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: &Rc<Tensor>, stride: usize, padding: usize) -> Result<Rc<Tensor>> {
        conv2d_fwd(x, w, b, stride, padding).map(Rc::new)
    }

    fn conv_transpose2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: &Rc<Tensor>, stride: usize) -> Result<Rc<Tensor>> {
        conv_t_fwd(x, w, b, stride).map(Rc::new)
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(relu_fwd(x))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(x.map(stable_sigmoid))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        add_fwd(a, b).map(Rc::new)
    }

    fn mul_channelwise(&mut self, u: &Rc<Tensor>, s: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        mul_ch_fwd(u, s).map(Rc::new)
    }

    fn concat_channels(&mut self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        concat_fwd(&refs).map(Rc::new)
    }

    fn global_avg_pool(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(gap_fwd(x))
    }
}

// ---------------------------------------------------------------------------
// Recording tape.

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, stride: usize, padding: usize },
    ConvT { x: usize, w: usize, b: usize, stride: usize },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    MulChannel(usize, usize),
    Concat(Vec<usize>),
    GlobalAvgPool(usize),
    Sum(usize),
    Scale(usize, f64),
    Log10 { x: usize, eps: f64 },
    SmoothL1 { pred: usize, target: usize },
    SsimLoss { pred: usize, target: usize, window: usize, consts: SsimConstants },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvT { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x) | Op::Sigmoid(x) | Op::GlobalAvgPool(x) | Op::Sum(x) | Op::Scale(x, _) => {
                vec![*x]
            }
            Op::Log10 { x, .. } => vec![*x],
            Op::Add(a, b) | Op::MulChannel(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::SmoothL1 { pred, target } | Op::SsimLoss { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications. Each node's operands precede it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf they belong to.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked leaf, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.index
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(&v)].needs_grad
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Var) -> Var {
        let i = self.idx(x);
        let s = self.val(i).sum();
        self.push(Tensor::scalar(s), Op::Sum(i))
    }

    pub fn scale(&mut self, x: &Var, k: f64) -> Var {
        let i = self.idx(x);
        let v = self.val(i).map(|a| a * k);
        self.push(v, Op::Scale(i, k))
    }

    /// `log10(x + eps)` elementwise.
    pub fn log10(&mut self, x: &Var, eps: f64) -> Var {
        let i = self.idx(x);
        let v = self.val(i).map(|a| (a + eps).log10());
        self.push(v, Op::Log10 { x: i, eps })
    }

    /// Mean Smooth-L1 penalty of `target - pred`.
    pub fn smooth_l1(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let (p, t) = (self.idx(pred), self.idx(target));
        let (ps, ts) = (self.val(p).shape(), self.val(t).shape());
        if ps != ts {
            return Err(Error::dim("smooth_l1", format!("{ps} vs {ts}")));
        }
        let total: f64 = self
            .val(p)
            .data()
            .iter()
            .zip(self.val(t).data())
            .map(|(a, b)| smooth_l1_term(b - a))
            .sum();
        let v = total / ps.numel() as f64;
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1 { pred: p, target: t }))
    }

    /// `1 - SSIM`, averaged over every `(n, c)` plane with a uniform window.
    pub fn ssim_loss(&mut self, pred: &Var, target: &Var, window: usize, data_range: f64) -> Result<Var> {
        let (p, t) = (self.idx(pred), self.idx(target));
        let (ps, ts) = (self.val(p).shape(), self.val(t).shape());
        if ps != ts {
            return Err(Error::dim("ssim_loss", format!("{ps} vs {ts}")));
        }
        if ps.h < window || ps.w < window {
            return Err(Error::dim("ssim_loss", format!("{ps} smaller than {window}x{window} window")));
        }
        let consts = SsimConstants::for_range(data_range);
        let planes = ps.n * ps.c;
        let mut acc = 0.0;
        for (a, b) in self.val(p).data().chunks(ps.plane()).zip(self.val(t).data().chunks(ps.plane())) {
            acc += ssim_plane(a, b, ps.h, ps.w, window, consts, false).0;
        }
        let v = 1.0 - acc / planes as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::SsimLoss {
                pred: p,
                target: t,
                window,
                consts,
            },
        ))
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively where
    /// a value fans out to several consumers.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape != self.id || root.index >= self.nodes.len() {
            return Err(Error::Usage("backward root is not recorded on this tape".into()));
        }
        if self.nodes[root.index].value.shape() != Shape::scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}",
                self.nodes[root.index].value.shape()
            )));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: reverse pass seeded with an arbitrary
    /// cotangent of the same shape as `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if root.tape != self.id || root.index >= self.nodes.len() {
            return Err(Error::Usage("backward root is not recorded on this tape".into()));
        }
        if seed.shape() != self.nodes[root.index].value.shape() {
            return Err(Error::dim("backward", format!("seed {} does not match root", seed.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(seed);
        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
                let win = Window::new(xs.c, xs.h, xs.w, ws.h, stride, padding);
                let mut dw = Tensor::zeros(ws);
                let mut db = Tensor::zeros(self.val(b).shape());
                let mut dx = self.wants(x).then(|| Tensor::zeros(xs));
                kernels::conv2d_backward(
                    self.val(x).data(),
                    xs.n,
                    &win,
                    self.val(w).data(),
                    g.data(),
                    ws.n,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.data_mut(),
                    db.data_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x], dx);
                }
                if self.wants(w) {
                    accumulate(&mut grads[w], dw);
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], db);
                }
            }
            Op::ConvT { x, w, b, stride } => {
                let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
                let win = kernels::transposed_window(ws.c, xs.h, xs.w, ws.h, stride);
                let mut dw = Tensor::zeros(ws);
                let mut db = Tensor::zeros(self.val(b).shape());
                let mut dx = self.wants(x).then(|| Tensor::zeros(xs));
                kernels::conv_transpose2d_backward(
                    self.val(x).data(),
                    xs.n,
                    xs.c,
                    &win,
                    self.val(w).data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.data_mut(),
                    db.data_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x], dx);
                }
                if self.wants(w) {
                    accumulate(&mut grads[w], dw);
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], db);
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(self.val(x).data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(&mut grads[x], d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                accumulate(&mut grads[x], d);
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], g.clone());
                }
            }
            Op::MulChannel(u, s) => {
                let (uv, sv) = (self.val(u), self.val(s));
                let plane = uv.shape().plane();
                if self.wants(u) {
                    let mut d = g.clone();
                    for (chunk, &k) in d.data_mut().chunks_mut(plane).zip(sv.data()) {
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(&mut grads[u], d);
                }
                if self.wants(s) {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(uv.data().chunks(plane))
                        .map(|(gc, uc)| gc.iter().zip(uc).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[s], Tensor::from_vec(sv.shape(), data).expect("scale grad"));
                }
            }
            Op::Concat(ref parts) => {
                let gs = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.val(p).shape();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for b in 0..gs.n {
                            let start = b * gs.item() + offset * gs.plane();
                            data.extend_from_slice(&g.data()[start..start + ps.item()]);
                        }
                        accumulate(&mut grads[p], Tensor::from_vec(ps, data).expect("concat grad"));
                    }
                    offset += ps.c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.val(x).shape();
                let inv = 1.0 / xs.plane() as f64;
                let mut data = Vec::with_capacity(xs.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv * inv).take(xs.plane()));
                }
                accumulate(&mut grads[x], Tensor::from_vec(xs, data).expect("pool grad"));
            }
            Op::Sum(x) => {
                let xs = self.val(x).shape();
                accumulate(&mut grads[x], Tensor::full(xs, g.data()[0]));
            }
            Op::Scale(x, k) => {
                accumulate(&mut grads[x], g.map(|v| v * k));
            }
            Op::Log10 { x, eps } => {
                let ln10 = std::f64::consts::LN_10;
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(self.val(x).data()) {
                    *dv /= (xv + eps) * ln10;
                }
                accumulate(&mut grads[x], d);
            }
            Op::SmoothL1 { pred, target } => {
                let (pv, tv) = (self.val(pred), self.val(target));
                let k = g.data()[0] / pv.len() as f64;
                // d/dpred of the penalty of (target - pred)
                let dp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(p, t)| -smooth_l1_slope(t - p) * k)
                    .collect();
                if self.wants(target) {
                    let dt = dp.iter().map(|v| -v).collect();
                    accumulate(&mut grads[target], Tensor::from_vec(tv.shape(), dt).expect("l1 grad"));
                }
                if self.wants(pred) {
                    accumulate(&mut grads[pred], Tensor::from_vec(pv.shape(), dp).expect("l1 grad"));
                }
            }
            Op::SsimLoss { pred, target, window, consts } => {
                let (pv, tv) = (self.val(pred), self.val(target));
                let s = pv.shape();
                let k = -g.data()[0] / (s.n * s.c) as f64;
                let mut dp = Vec::with_capacity(s.numel());
                let mut dt = Vec::with_capacity(s.numel());
                for (a, b) in pv.data().chunks(s.plane()).zip(tv.data().chunks(s.plane())) {
                    let (_, grad) = ssim_plane(a, b, s.h, s.w, window, consts, true);
                    let grad = grad.expect("requested gradient");
                    dp.extend(grad.d_x.iter().map(|v| v * k));
                    dt.extend(grad.d_y.iter().map(|v| v * k));
                }
                if self.wants(pred) {
                    accumulate(&mut grads[pred], Tensor::from_vec(s, dp).expect("ssim grad"));
                }
                if self.wants(target) {
                    accumulate(&mut grads[target], Tensor::from_vec(s, dt).expect("ssim grad"));
                }
            }
        }
    }
}

/// Smooth-L1 penalty of a residual: quadratic inside the unit band.
pub fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

impl Graph for Tape {
    type Node = Var;

    fn input(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    fn param(&mut self, value: &Tensor) -> Var {
        self.push_with(value.clone(), Op::Leaf, true)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        self.val(self.idx(node))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let out = conv2d_fwd(self.val(xi), self.val(wi), self.val(bi), stride, padding)?;
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi, stride, padding }))
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let out = conv_t_fwd(self.val(xi), self.val(wi), self.val(bi), stride)?;
        Ok(self.push(out, Op::ConvT { x: xi, w: wi, b: bi, stride }))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let i = self.idx(x);
        let out = relu_fwd(self.val(i));
        self.push(out, Op::Relu(i))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let i = self.idx(x);
        let out = self.val(i).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(i))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = add_fwd(self.val(ai), self.val(bi))?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    fn mul_channelwise(&mut self, u: &Var, s: &Var) -> Result<Var> {
        let (ui, si) = (self.idx(u), self.idx(s));
        let out = mul_ch_fwd(self.val(ui), self.val(si))?;
        Ok(self.push(out, Op::MulChannel(ui, si)))
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.idx(p)).collect();
        let out = {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
            concat_fwd(&refs)?
        };
        Ok(self.push(out, Op::Concat(idx)))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let i = self.idx(x);
        let out = gap_fwd(self.val(i));
        self.push(out, Op::GlobalAvgPool(i))
    }
}
