//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]; the node owns
//! its output value and whatever intermediates its backward rule needs.
//! [`Tape::backward`] walks the nodes in exact reverse order and accumulates
//! gradients additively, so a value consumed by several operations receives
//! the sum of their contributions.
//!
//! Backward does not consume the tape: several scalars recorded on the same
//! tape (e.g. one score per class) can each be differentiated in turn.
//! Values registered with [`Tape::constant`] and everything computed purely
//! from constants are skipped during backward.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, MatRef};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool {
        input: Var,
        factor: usize,
    },
    Sigmoid(Var),
    SigmoidCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
    },
    Scale(Var, f64),
    Add(Var, Var),
    ChannelMask {
        input: Var,
        plane: Arc<Vec<f64>>,
    },
    Expand {
        input: Var,
        kernel: usize,
    },
    Window {
        input: Var,
        row: usize,
        col: usize,
        kernel: usize,
    },
    Assemble {
        parts: Vec<Var>,
    },
    Select {
        input: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every value on the tape that
/// (transitively) depends on a non-constant leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.get(var)
            .ok_or_else(|| Error::MissingGradient(format!("value #{}", var.0)))
    }

    pub fn size_bytes(&self) -> usize {
        self.grads.iter().flatten().map(Tensor::size_bytes).sum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Bytes held by recorded values and saved intermediates.
    pub fn size_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::Conv2d { cols, .. } => cols.len() * std::mem::size_of::<f64>(),
                    _ => 0,
                };
                n.value.size_bytes() + saved
            })
            .sum()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of a `[c_in, h, w]` input with a
    /// `[c_out, c_in, s, s]` kernel, zero padding on all sides.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [c_in, h, w] = self.value(input).dims3("conv2d input")?;
        let wshape = self.value(weight).shape().to_vec();
        let &[c_out, wc_in, kh, kw] = wshape.as_slice() else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {wshape:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {c_in}, weight expects {wc_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {:?}", self.value(bias).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        for (name, size) in [("height", h), ("width", w)] {
            let padded = size + 2 * padding;
            if padded < kh {
                return Err(Error::shape(
                    "conv2d",
                    format!("{name}: padded size {padded} is smaller than kernel {kh}"),
                ));
            }
            if (padded - kh) % stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("{name}: padded size {padded} minus kernel {kh} not divisible by stride {stride}"),
                ));
            }
        }
        let geometry = ConvGeometry {
            channels: c_in,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
        };
        let (oh, ow) = (geometry.out_height(), geometry.out_width());
        let npos = oh * ow;
        let cols = kernels::im2col(self.value(input).data(), &geometry);
        let k = geometry.col_rows();
        let mut out = Vec::with_capacity(c_out * npos);
        for &b in self.value(bias).data() {
            out.extend(std::iter::repeat_n(b, npos));
        }
        kernels::gemm(
            c_out,
            k,
            npos,
            MatRef::row_major(self.value(weight).data(), k),
            MatRef::row_major(&cols, npos),
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[c_out, oh, ow], out)?;
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.requires(&[input]);
        self.push(Op::Relu(input), value, rg)
    }

    /// `[c, h, w] -> [c]`, the mean over each channel plane.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let [c, h, w] = self.value(input).dims3("global_average_pool")?;
        let area = (h * w) as f64;
        let data = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::new(&[c], data)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::GlobalAvgPool(input), value, rg))
    }

    /// Mean over non-overlapping `factor x factor` blocks; `h` and `w` must
    /// be multiples of `factor`.
    pub fn avg_pool2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [c, h, w] = self.value(input).dims3("avg_pool2d")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("{h}x{w} input does not tile into {factor}x{factor} blocks"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let x = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut out[(ch * oh + y / factor) * ow..(ch * oh + y / factor + 1) * ow];
                for (xi, &v) in src.iter().enumerate() {
                    dst[xi / factor] += v * norm;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::AvgPool { input, factor }, value, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let rg = self.requires(&[input]);
        self.push(Op::Sigmoid(input), value, rg)
    }

    /// Mean over classes of the binary cross-entropy between `sigmoid(logits)`
    /// and 0/1 `targets`, evaluated in the overflow-free form
    /// `max(z, 0) - z t + ln(1 + e^{-|z|})`.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(
                "sigmoid_cross_entropy",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        if let Some((index, &value)) = targets
            .data()
            .iter()
            .enumerate()
            .find(|(_, &t)| t != 0.0 && t != 1.0)
        {
            return Err(Error::NonBinaryTarget { index, value });
        }
        let n = z.numel() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.requires(&[logits]);
        Ok(self.push(
            Op::SigmoidCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.requires(&[input]);
        self.push(Op::Scale(input, factor), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Multiply every `[h, w]` channel plane of a `[c, h, w]` input by the
    /// same `plane` of factors.
    pub fn channel_mask(&mut self, input: Var, plane: Arc<Vec<f64>>) -> Result<Var> {
        let [_, h, w] = self.value(input).dims3("channel_mask")?;
        if plane.len() != h * w {
            return Err(Error::shape(
                "channel_mask",
                format!("mask plane has {} entries, input plane is {h}x{w}", plane.len()),
            ));
        }
        let mut value = self.value(input).clone();
        for chunk in value.data_mut().chunks_mut(h * w) {
            for (v, m) in chunk.iter_mut().zip(plane.iter()) {
                *v *= m;
            }
        }
        let rg = self.requires(&[input]);
        Ok(self.push(Op::ChannelMask { input, plane }, value, rg))
    }

    /// Copy every zero-padded `s x s` window of a `[k, h, w]` input into its
    /// own non-overlapping block of a `[k, s*h, s*w]` output. Window `(i, j)`
    /// is centred on input pixel `(i, j)` and lands in block `(i, j)`.
    pub fn expand(&mut self, input: Var, kernel: usize) -> Result<Var> {
        check_odd_kernel("expand", kernel)?;
        let [k, h, w] = self.value(input).dims3("expand")?;
        let (eh, ew) = (kernel * h, kernel * w);
        let r = (kernel / 2) as isize;
        let src = self.value(input).data();
        let mut out = vec![0.0; k * eh * ew];
        for ch in 0..k {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * eh * ew..(ch + 1) * eh * ew];
            for i in 0..h {
                for a in 0..kernel {
                    let y = i as isize + a as isize - r;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let srow = &plane[y as usize * w..(y as usize + 1) * w];
                    let orow = &mut oplane[(i * kernel + a) * ew..(i * kernel + a + 1) * ew];
                    for j in 0..w {
                        let block = &mut orow[j * kernel..(j + 1) * kernel];
                        for (b, o) in block.iter_mut().enumerate() {
                            let x = j as isize + b as isize - r;
                            if x >= 0 && x < w as isize {
                                *o = srow[x as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[k, eh, ew], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::Expand { input, kernel }, value, rg))
    }

    /// The zero-padded `[k, s, s]` window centred on pixel `(row, col)`.
    pub fn window(&mut self, input: Var, row: usize, col: usize, kernel: usize) -> Result<Var> {
        check_odd_kernel("window", kernel)?;
        let [k, h, w] = self.value(input).dims3("window")?;
        if row >= h || col >= w {
            return Err(Error::shape(
                "window",
                format!("centre ({row}, {col}) outside a {h}x{w} map"),
            ));
        }
        let r = (kernel / 2) as isize;
        let src = self.value(input).data();
        let mut out = vec![0.0; k * kernel * kernel];
        for ch in 0..k {
            for a in 0..kernel {
                let y = row as isize + a as isize - r;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for b in 0..kernel {
                    let x = col as isize + b as isize - r;
                    if x >= 0 && x < w as isize {
                        out[(ch * kernel + a) * kernel + b] = src[(ch * h + y as usize) * w + x as usize];
                    }
                }
            }
        }
        let value = Tensor::new(&[k, kernel, kernel], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(
            Op::Window {
                input,
                row,
                col,
                kernel,
            },
            value,
            rg,
        ))
    }

    /// Stitch `h*w` per-position `[c, 1, 1]` outputs (row-major positions)
    /// into one `[c, h, w]` map.
    pub fn assemble(&mut self, parts: Vec<Var>, height: usize, width: usize) -> Result<Var> {
        if parts.len() != height * width {
            return Err(Error::shape(
                "assemble",
                format!("{} parts for a {height}x{width} map", parts.len()),
            ));
        }
        let c = self.value(parts[0]).numel();
        let npos = parts.len();
        let mut out = vec![0.0; c * npos];
        for (p, part) in parts.iter().enumerate() {
            let v = self.value(*part);
            if v.shape() != [c, 1, 1] {
                return Err(Error::shape(
                    "assemble",
                    format!("part {p} has shape {:?}, expected [{c}, 1, 1]", v.shape()),
                ));
            }
            for (co, &x) in v.data().iter().enumerate() {
                out[co * npos + p] = x;
            }
        }
        let value = Tensor::new(&[c, height, width], out)?;
        let rg = self.requires(&parts);
        Ok(self.push(Op::Assemble { parts }, value, rg))
    }

    /// One entry of a tensor, as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let v = self.value(input);
        if index >= v.numel() {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for {} elements", v.numel()),
            ));
        }
        let value = Tensor::scalar(v.data()[index]);
        let rg = self.requires(&[input]);
        Ok(self.push(Op::Select { input, index }, value, rg))
    }

    /// Gradients of the scalar `loss` with respect to every tracked value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    fn tracked(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let npos = geometry.col_cols();
                let k = geometry.col_rows();
                let gd = g.data();
                if self.tracked(*bias) {
                    let db: Vec<f64> = gd.chunks(npos).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(&[c_out], db)?)?;
                }
                if self.tracked(*weight) {
                    let mut dw = vec![0.0; c_out * k];
                    kernels::gemm(
                        c_out,
                        npos,
                        k,
                        MatRef::row_major(gd, npos),
                        MatRef::transposed(cols, npos),
                        0.0,
                        &mut dw,
                    );
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(&shape, dw)?)?;
                }
                if self.tracked(*input) {
                    let mut dcols = vec![0.0; k * npos];
                    kernels::gemm(
                        k,
                        c_out,
                        npos,
                        MatRef::transposed(self.value(*weight).data(), k),
                        MatRef::row_major(gd, npos),
                        0.0,
                        &mut dcols,
                    );
                    let shape = self.value(*input).shape().to_vec();
                    let mut dx = vec![0.0; shape.iter().product()];
                    kernels::col2im(&dcols, geometry, &mut dx);
                    self.accumulate(grads, *input, Tensor::new(&shape, dx)?)?;
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(x.shape(), data)?)?;
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape().to_vec();
                let area = shape[1] * shape[2];
                let mut data = Vec::with_capacity(shape[0] * area);
                for &gc in g.data() {
                    data.extend(std::iter::repeat_n(gc / area as f64, area));
                }
                self.accumulate(grads, *input, Tensor::new(&shape, data)?)?;
            }
            Op::AvgPool { input, factor } => {
                let shape = self.value(*input).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as f64;
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let grow = &gd[(ch * oh + y / factor) * ow..(ch * oh + y / factor + 1) * ow];
                        let drow = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
                        for (xi, d) in drow.iter_mut().enumerate() {
                            *d = grow[xi / factor] * norm;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, dx)?)?;
            }
            Op::Sigmoid(input) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(node.value.shape(), data)?)?;
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let upstream = g.data()[0];
                let n = z.numel() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| upstream * (sigmoid(z) - t) / n)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape(), data)?)?;
            }
            Op::Scale(input, factor) => {
                self.accumulate(grads, *input, g.map(|v| v * factor))?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::ChannelMask { input, plane } => {
                let mut dx = g.clone();
                for chunk in dx.data_mut().chunks_mut(plane.len()) {
                    for (v, m) in chunk.iter_mut().zip(plane.iter()) {
                        *v *= m;
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::Expand { input, kernel } => {
                let kernel = *kernel;
                let shape = self.value(*input).shape().to_vec();
                let (k, h, w) = (shape[0], shape[1], shape[2]);
                let ew = kernel * w;
                let r = (kernel / 2) as isize;
                let mut dx = vec![0.0; k * h * w];
                let gd = g.data();
                for ch in 0..k {
                    let gplane = &gd[ch * kernel * h * ew..(ch + 1) * kernel * h * ew];
                    let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for i in 0..h {
                        for a in 0..kernel {
                            let y = i as isize + a as isize - r;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let grow = &gplane[(i * kernel + a) * ew..(i * kernel + a + 1) * ew];
                            let drow = &mut dplane[y as usize * w..(y as usize + 1) * w];
                            for j in 0..w {
                                for b in 0..kernel {
                                    let x = j as isize + b as isize - r;
                                    if x >= 0 && x < w as isize {
                                        drow[x as usize] += grow[j * kernel + b];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, dx)?)?;
            }
            Op::Window {
                input,
                row,
                col,
                kernel,
            } => {
                let kernel = *kernel;
                let shape = self.value(*input).shape().to_vec();
                let (k, h, w) = (shape[0], shape[1], shape[2]);
                let r = (kernel / 2) as isize;
                let mut dx = vec![0.0; k * h * w];
                let gd = g.data();
                for ch in 0..k {
                    for a in 0..kernel {
                        let y = *row as isize + a as isize - r;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for b in 0..kernel {
                            let x = *col as isize + b as isize - r;
                            if x >= 0 && x < w as isize {
                                dx[(ch * h + y as usize) * w + x as usize] += gd[(ch * kernel + a) * kernel + b];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, dx)?)?;
            }
            Op::Assemble { parts } => {
                let npos = parts.len();
                let c = node.value.shape()[0];
                let gd = g.data();
                for (p, part) in parts.iter().enumerate() {
                    if !self.tracked(*part) {
                        continue;
                    }
                    let data = (0..c).map(|co| gd[co * npos + p]).collect();
                    self.accumulate(grads, *part, Tensor::new(&[c, 1, 1], data)?)?;
                }
            }
            Op::Select { input, index } => {
                let shape = self.value(*input).shape().to_vec();
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[*index] = g.data()[0];
                self.accumulate(grads, *input, d)?;
            }
        }
        Ok(())
    }
}

/// Logistic function, split by sign so neither branch overflows.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_odd_kernel(op: &'static str, kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!("{op}: kernel size must be odd, got {kernel}")));
    }
    Ok(())
}
