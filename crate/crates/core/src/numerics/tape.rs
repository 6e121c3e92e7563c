use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{CmtError, Result};

/// Norms at or below this value are rejected by [`Var::l2_normalize`].
pub const EPSILON_NORM: f64 = 1e-12;

/// Default RoIAlign sampling grid per bin edge (2×2 samples per bin).
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// A tape created with [`Tape::no_grad`] evaluates the same operations but
/// keeps no backward state; every value on it behaves like a constant.
/// Tapes are deliberately `!Sync`: one tape serves one forward/backward pass
/// on one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    RoiAlign {
        x: usize,
        channels: usize,
        in_hw: usize,
        taps: Vec<(usize, f64)>,
        taps_per_bin: usize,
    },
    L2Normalize {
        x: usize,
        norm: f64,
    },
    LogSoftmaxRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Stack(Vec<usize>),
    SmoothL1 {
        x: usize,
        beta: f64,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates values without recording anything for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes that carry backward state.
    pub fn num_differentiable(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.needs_grad).count()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf (gradient requested).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let needs = self.recording;
        self.push(value, Op::Leaf, needs)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        if !self.recording {
            return false;
        }
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(CmtError::NotRecording);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(CmtError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn buf<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(ga) = buf(grads, nodes, p) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = buf(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = buf(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = buf(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let bv = nodes[*b].value.data();
            let av = nodes[*a].value.data();
            if let Some(ga) = buf(grads, nodes, *a) {
                // dA[m,k] += G[m,n] · B^T
                kernels::gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, 1.0, ga);
            }
            if let Some(gb) = buf(grads, nodes, *b) {
                // dB[k,n] += A^T · G
                kernels::gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, 1.0, gb);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(ga) = buf(grads, nodes, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            let (d_out, d_in) = (g.len(), xv.len());
            if let Some(gx) = buf(grads, nodes, *x) {
                for o in 0..d_out {
                    for i in 0..d_in {
                        gx[i] += wv[o * d_in + i] * g[o];
                    }
                }
            }
            if let Some(gw) = buf(grads, nodes, *w) {
                for o in 0..d_out {
                    for i in 0..d_in {
                        gw[o * d_in + i] += g[o] * xv[i];
                    }
                }
            }
            if let Some(gb) = buf(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let ol = geom.out_len();
            let pl = geom.patch_len();
            if let Some(gw) = buf(grads, nodes, *w) {
                // dW[O,PL] += G[O,OL] · cols^T
                kernels::gemm(
                    geom.c_out,
                    ol,
                    pl,
                    g,
                    ol as isize,
                    1,
                    cols,
                    1,
                    ol as isize,
                    1.0,
                    gw,
                );
            }
            if let Some(gb) = buf(grads, nodes, *b) {
                for (o, row) in g.chunks(ol).enumerate() {
                    gb[o] += row.iter().sum::<f64>();
                }
            }
            if nodes[*x].needs_grad {
                let wv = nodes[*w].value.data();
                let mut dcols = vec![0.0; pl * ol];
                // dcols[PL,OL] = W^T · G
                kernels::gemm(
                    pl,
                    geom.c_out,
                    ol,
                    wv,
                    1,
                    pl as isize,
                    g,
                    ol as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let gx = buf(grads, nodes, *x).expect("needs_grad checked");
                kernels::col2im(&dcols, geom, gx);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = buf(grads, nodes, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::RoiAlign {
            x,
            channels,
            in_hw,
            taps,
            taps_per_bin,
        } => {
            if let Some(gx) = buf(grads, nodes, *x) {
                let bins = taps.len() / taps_per_bin;
                for c in 0..*channels {
                    for bin in 0..bins {
                        let gv = g[c * bins + bin];
                        for &(idx, wt) in &taps[bin * taps_per_bin..(bin + 1) * taps_per_bin] {
                            gx[c * in_hw + idx] += wt * gv;
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, norm } => {
            if let Some(gx) = buf(grads, nodes, *x) {
                let proj: f64 = out.iter().zip(g).map(|(y, d)| y * d).sum();
                for i in 0..g.len() {
                    gx[i] += (g[i] - out[i] * proj) / norm;
                }
            }
        }
        Op::LogSoftmaxRows { x, rows, cols } => {
            if let Some(gx) = buf(grads, nodes, *x) {
                for r in 0..*rows {
                    let row = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[row.clone()].iter().sum();
                    for i in row {
                        gx[i] += g[i] - out[i].exp() * gsum;
                    }
                }
            }
        }
        Op::Stack(parts) => {
            let d = g.len() / parts.len().max(1);
            for (r, &p) in parts.iter().enumerate() {
                if let Some(gp) = buf(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, s)| *a += s);
                }
            }
        }
        Op::SmoothL1 { x, beta } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = buf(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * (xv[i] / beta).clamp(-1.0, 1.0);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients of the loss for every node that
/// required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient reshaped like `var`; zeros when the loss does not reach it.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<Vec<usize>> {
        let a = self.shape();
        let b = other.shape();
        if a != b {
            return Err(CmtError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(a)
    }

    fn zip_with(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = self.same_shape(other, what)?;
        let a = self.value();
        let b = other.value();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Add(self.id, other.id), needs))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), needs))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), needs))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = {
            let val = self.value();
            Tensor::scalar(val.data().iter().sum::<f64>() / val.numel() as f64)
        };
        self.unary(v, Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.to_tensor().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn flatten(&self) -> Var<'t> {
        let n = self.value().numel();
        self.reshape(vec![n])
            .expect("flatten preserves element count")
    }

    /// `[m,k] × [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CmtError::ShapeMismatch(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let a = self.value();
            let b = other.value();
            kernels::gemm(
                m,
                k,
                n,
                a.data(),
                k as isize,
                1,
                b.data(),
                n as isize,
                1,
                0.0,
                &mut out,
            );
        }
        let needs = self.tape.needs(&[self.id, other.id]);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CmtError::ShapeMismatch(format!("transpose of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        {
            let a = self.value();
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = a.data()[r * cols + c];
                }
            }
        }
        let v = Tensor::new(vec![cols, rows], out)?;
        Ok(self.unary(
            v,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
        ))
    }

    /// Dense layer `w·x + b` with `x[d_in]`, `w[d_out, d_in]`, `b[d_out]`.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(CmtError::ShapeMismatch(format!(
                "linear x{sx:?} w{sw:?} b{sb:?}"
            )));
        }
        let (d_out, d_in) = (sw[0], sw[1]);
        let out = {
            let (xv, wv, bv) = (self.value(), w.value(), b.value());
            (0..d_out)
                .map(|o| {
                    bv.data()[o]
                        + (0..d_in)
                            .map(|i| wv.data()[o * d_in + i] * xv.data()[i])
                            .sum::<f64>()
                })
                .collect()
        };
        let needs = self.tape.needs(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            needs,
        ))
    }

    /// 2-D cross-correlation of `self[C_in,H,W]` with `w[C_out,C_in,kh,kw]`.
    pub fn conv2d(&self, w: &Var<'t>, b: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let geom = ConvGeom::new(&self.shape(), &w.shape(), stride, pad)?;
        if b.shape() != [geom.c_out] {
            return Err(CmtError::ShapeMismatch(format!(
                "conv2d bias {:?} for {} output channels",
                b.shape(),
                geom.c_out
            )));
        }
        let (out, cols) = {
            let (xv, wv, bv) = (self.value(), w.value(), b.value());
            kernels::conv2d_forward(xv.data(), wv.data(), bv.data(), &geom)
        };
        let needs = self.tape.needs(&[self.id, w.id, b.id]);
        let v = Tensor::new(vec![geom.c_out, geom.ho, geom.wo], out)?;
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// 2×2 stride-2 max pooling of a `[C,H,W]` map (ceil mode).
    pub fn max_pool2d(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(CmtError::ShapeMismatch(format!(
                "max_pool2d expects [C,H,W], got {s:?}"
            )));
        }
        let (out, argmax, ho, wo) = kernels::max_pool2x2(self.value().data(), s[0], s[1], s[2]);
        let v = Tensor::new(vec![s[0], ho, wo], out)?;
        Ok(self.unary(v, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// RoIAlign over a `[C,H,W]` map; `bbox` is `(x1, y1, x2, y2)` in map
    /// coordinates. Output is `[C, out_h, out_w]`.
    pub fn roi_align(
        &self,
        bbox: [f64; 4],
        out_h: usize,
        out_w: usize,
        samples: usize,
    ) -> Result<Var<'t>> {
        let [x1, y1, x2, y2] = bbox;
        if !(x2 - x1 > 0.0) || !(y2 - y1 > 0.0) {
            return Err(CmtError::DegenerateBox { x1, y1, x2, y2 });
        }
        let s = self.shape();
        if s.len() != 3 {
            return Err(CmtError::ShapeMismatch(format!(
                "roi_align expects [C,H,W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let taps = kernels::roi_align_taps(bbox, h, w, out_h, out_w, samples);
        let taps_per_bin = 4 * samples * samples;
        let bins = out_h * out_w;
        let mut out = vec![0.0; c * bins];
        {
            let xv = self.value();
            let x = xv.data();
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for bin in 0..bins {
                    out[ch * bins + bin] = taps[bin * taps_per_bin..(bin + 1) * taps_per_bin]
                        .iter()
                        .map(|&(idx, wt)| wt * plane[idx])
                        .sum();
                }
            }
        }
        let v = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.unary(
            v,
            Op::RoiAlign {
                x: self.id,
                channels: c,
                in_hw: h * w,
                taps,
                taps_per_bin,
            },
        ))
    }

    /// Scales a vector to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let norm = self.value().norm();
        if !(norm > EPSILON_NORM) {
            return Err(CmtError::NearZeroNorm { norm });
        }
        let v = self.value().map(|x| x / norm);
        Ok(self.unary(v, Op::L2Normalize { x: self.id, norm }))
    }

    /// Row-wise log-softmax of a `[rows, cols]` matrix, max-shifted.
    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CmtError::ShapeMismatch(format!(
                "log_softmax_rows expects 2-D, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.unary(
            v,
            Op::LogSoftmaxRows {
                x: self.id,
                rows,
                cols,
            },
        ))
    }

    /// Elementwise smooth-L1 (Huber with slope 1 beyond `beta`).
    pub fn smooth_l1(&self, beta: f64) -> Var<'t> {
        let v = self.value().map(|x| {
            if x.abs() < beta {
                0.5 * x * x / beta
            } else {
                x.abs() - 0.5 * beta
            }
        });
        self.unary(v, Op::SmoothL1 { x: self.id, beta })
    }
}

/// Stacks equally shaped 1-D vars into a `[n, d]` matrix.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(CmtError::EmptyBatch)?;
    let tape = first.tape;
    let d = first.value().numel();
    let mut data = Vec::with_capacity(parts.len() * d);
    for p in parts {
        let v = p.value();
        if v.ndim() != 1 || v.numel() != d {
            return Err(CmtError::ShapeMismatch(format!(
                "stack of {:?} with d={d}",
                v.shape()
            )));
        }
        data.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(
        Tensor::new(vec![parts.len(), d], data)?,
        Op::Stack(ids),
        needs,
    ))
}
