//! Reverse-mode differentiation tape. Operations append nodes that record
//! their inputs; `backward` walks the tape in reverse and accumulates exact
//! gradients for every recorded value, including parameter leaves.

use super::tensor::Tensor;
use crate::scene_graph::PixelRect;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("backward requires a value with a recorded trace")]
    NoTrace,
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NaNEncountered(&'static str),
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Add(Var, Var),
    /// mul * x + shift, elementwise; only `mul` matters in reverse.
    Affine {
        x: Var,
        mul: f64,
    },
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        ranges: Vec<(usize, usize)>,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Upsample2x(Var),
    Mean(Var),
    MseLoss(Var, Var),
    L1Loss(Var, Var),
    /// Broadcast a length-C embedding into `rect` on a zero [C, h, w] canvas.
    PlaceRoi {
        emb: Var,
        h: usize,
        w: usize,
        rect: PixelRect,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input leaf with no gradient consumer of its own.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a named parameter leaf; the name keys gradient extraction.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Input);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Var bound to a previously recorded parameter name.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    // ---- forward primitives ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                a: sa.to_vec(),
                b: sb.to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn affine(&mut self, x: Var, mul: f64, shift: f64) -> Var {
        let t = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| mul * v + shift).collect(),
        );
        self.push(t, Op::Affine { x, mul })
    }

    /// Multiply by a scalar.
    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                a: sa,
                b: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..m {
                let arow = &da[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let brow = &db[kk * n..(kk + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // 0.0 * v (not max) so NaN propagates instead of being masked.
        let t = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 * v })
                .collect(),
        );
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
        );
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.tanh()).collect(),
        );
        self.push(t, Op::Tanh(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "concat axis {axis} out of rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, d)| i != axis && *d != first[i])
            {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    a: first.clone(),
                    b: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let s = self.value(v).shape().to_vec();
            let block = s[axis] * inner;
            let src = self.value(v).data();
            for o in 0..outer {
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += s[axis];
        }
        Ok(self.push(
            Tensor::new(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if ranges.len() != shape.len()
            || ranges
                .iter()
                .zip(&shape)
                .any(|((s, e), d)| s >= e || *e > *d)
        {
            return Err(AutodiffError::DimensionMismatch(format!(
                "slice ranges {ranges:?} invalid for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = ranges.iter().map(|(s, e)| e - s).collect();
        let data = copy_slice(self.value(x).data(), &shape, ranges);
        Ok(self.push(
            Tensor::new(out_shape, data),
            Op::Slice {
                x,
                ranges: ranges.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                a: self.value(x).shape().to_vec(),
                b: shape,
            });
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec());
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// 3x3 convolution, stride 1, zero padding 1; input [C_in, H, W],
    /// kernel [C_out, C_in, 3, 3], optional bias [C_out].
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                a: si,
                b: sk,
            });
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let c_out = sk[0];
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [c_out] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d bias",
                    a: vec![c_out],
                    b: sb.to_vec(),
                });
            }
        }
        let mut out = vec![0.0; c_out * h * w];
        {
            let din = self.value(input).data();
            let dk = self.value(kernel).data();
            for co in 0..c_out {
                let out_plane = &mut out[co * h * w..(co + 1) * h * w];
                for ci in 0..c_in {
                    let in_plane = &din[ci * h * w..(ci + 1) * h * w];
                    let kbase = (co * c_in + ci) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = dk[kbase + ky * 3 + kx];
                            if wv != 0.0 {
                                shifted_axpy(
                                    out_plane,
                                    in_plane,
                                    wv,
                                    ky as isize - 1,
                                    kx as isize - 1,
                                    h,
                                    w,
                                );
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let bv = self.value(b).data()[co];
                    if bv != 0.0 {
                        for o in out_plane.iter_mut() {
                            *o += bv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c_out, h, w], out),
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::DimensionMismatch(format!(
                "upsample2x expects [C, H, W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let src = self.value(x).data();
        for cc in 0..c {
            for y in 0..2 * h {
                for x_ in 0..2 * w {
                    out[cc * 4 * h * w + y * 2 * w + x_] = src[cc * h * w + (y / 2) * w + x_ / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let m = self.value(x).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse_loss",
                a: sa.to_vec(),
                b: sb.to_vec(),
            });
        }
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss(a, b)))
    }

    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "l1_loss",
                a: sa.to_vec(),
                b: sb.to_vec(),
            });
        }
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1Loss(a, b)))
    }

    /// Broadcast `emb` (len C, shape [C] or [C, 1]) into `rect` of a zero
    /// [C, h, w] canvas. Gradient sums the rect per channel.
    pub fn place_roi(
        &mut self,
        emb: Var,
        h: usize,
        w: usize,
        rect: PixelRect,
    ) -> Result<Var, AutodiffError> {
        let s = self.value(emb).shape().to_vec();
        let c = s[0];
        let column_like = s.len() == 1 || (s.len() == 2 && s[1] == 1);
        if !column_like {
            return Err(AutodiffError::DimensionMismatch(format!(
                "place_roi embedding must be [C] or [C,1], got {s:?}"
            )));
        }
        if rect.x1 > w || rect.y1 > h {
            return Err(AutodiffError::DimensionMismatch(format!(
                "place_roi rect {rect:?} outside {h}x{w} canvas"
            )));
        }
        let mut out = vec![0.0; c * h * w];
        let src = self.value(emb).data();
        for (cc, &v) in src.iter().enumerate() {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    out[cc * h * w + y * w + x] = v;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, h, w], out),
            Op::PlaceRoi { emb, h, w, rect },
        ))
    }

    // ---- reverse pass ----

    /// Reverse-mode gradients of a scalar `loss` for every traced value.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        if matches!(self.nodes[loss.0].op, Op::Input) {
            return Err(AutodiffError::NoTrace);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.distribute(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta_shape: &[usize]) -> Var {
        if grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros(delta_shape.to_vec()));
        }
        v
    }

    fn distribute(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    self.accumulate(grads, v, g.shape());
                    let dst = grads[v.0].as_mut().unwrap().data_mut();
                    for (d, s) in dst.iter_mut().zip(gd) {
                        *d += s;
                    }
                }
            }
            Op::Affine { x, mul } => {
                self.accumulate(grads, *x, g.shape());
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for (d, s) in dst.iter_mut().zip(gd) {
                    *d += mul * s;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                self.accumulate(grads, *a, &[m, k]);
                self.accumulate(grads, *b, &[k, n]);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                {
                    let ga = grads[a.0].as_mut().unwrap().data_mut();
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &gd[i * n..(i + 1) * n];
                            let brow = &db[kk * n..(kk + 1) * n];
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                }
                {
                    let gb = grads[b.0].as_mut().unwrap().data_mut();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = da[i * k + kk];
                            if av != 0.0 {
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for (bg, gv) in brow.iter_mut().zip(grow) {
                                    *bg += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, g.shape());
                let xin = self.value(*x).data();
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for ((d, s), xv) in dst.iter_mut().zip(gd).zip(xin) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                self.accumulate(grads, *x, g.shape());
                let xin = self.value(*x).data();
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for ((d, s), xv) in dst.iter_mut().zip(gd).zip(xin) {
                    *d += if *xv > 0.0 { *s } else { slope * s };
                }
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.shape());
                let out = self.nodes[idx].value.data();
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for ((d, s), t) in dst.iter_mut().zip(gd).zip(out) {
                    *d += s * (1.0 - t * t);
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for &v in &inputs.clone() {
                    let s = self.value(v).shape().to_vec();
                    let block = s[axis] * inner;
                    self.accumulate(grads, v, &s);
                    let dst = grads[v.0].as_mut().unwrap().data_mut();
                    for o in 0..outer {
                        let src_start = o * axis_total * inner + offset * inner;
                        for (d, s) in dst[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(&gd[src_start..src_start + block])
                        {
                            *d += s;
                        }
                    }
                    offset += s[axis];
                }
            }
            Op::Slice { x, ranges } => {
                let ranges = ranges.clone();
                let src_shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, &src_shape);
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                scatter_add_slice(dst, &src_shape, &ranges, gd);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let si = self.value(input).shape().to_vec();
                let sk = self.value(kernel).shape().to_vec();
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let c_out = sk[0];
                self.accumulate(grads, input, &si);
                self.accumulate(grads, kernel, &sk);
                let din = self.value(input).data();
                let dk = self.value(kernel).data();

                {
                    let gi = grads[input.0].as_mut().unwrap().data_mut();
                    for co in 0..c_out {
                        let gout = &gd[co * h * w..(co + 1) * h * w];
                        for ci in 0..c_in {
                            let gplane = &mut gi[ci * h * w..(ci + 1) * h * w];
                            let kbase = (co * c_in + ci) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = dk[kbase + ky * 3 + kx];
                                    if wv != 0.0 {
                                        shifted_axpy(
                                            gplane,
                                            gout,
                                            wv,
                                            1 - ky as isize,
                                            1 - kx as isize,
                                            h,
                                            w,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gk = grads[kernel.0].as_mut().unwrap().data_mut();
                    for co in 0..c_out {
                        let gout = &gd[co * h * w..(co + 1) * h * w];
                        for ci in 0..c_in {
                            let in_plane = &din[ci * h * w..(ci + 1) * h * w];
                            let kbase = (co * c_in + ci) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    gk[kbase + ky * 3 + kx] += shifted_dot(
                                        gout,
                                        in_plane,
                                        ky as isize - 1,
                                        kx as isize - 1,
                                        h,
                                        w,
                                    );
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    self.accumulate(grads, b, &[c_out]);
                    let gb = grads[b.0].as_mut().unwrap().data_mut();
                    for co in 0..c_out {
                        gb[co] += gd[co * h * w..(co + 1) * h * w].iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, &s);
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for cc in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[cc * h * w + (y / 2) * w + xx / 2] +=
                                gd[cc * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gs = gd[0] / n as f64;
                self.accumulate(grads, *x, self.value(*x).shape());
                for d in grads[x.0].as_mut().unwrap().data_mut() {
                    *d += gs;
                }
            }
            Op::MseLoss(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.value(a).len() as f64;
                let gs = gd[0];
                self.accumulate(grads, a, self.value(a).shape());
                self.accumulate(grads, b, self.value(b).shape());
                {
                    let va = self.value(a).data();
                    let vb = self.value(b).data();
                    let da = grads[a.0].as_mut().unwrap().data_mut();
                    for ((d, x), y) in da.iter_mut().zip(va).zip(vb) {
                        *d += gs * 2.0 * (x - y) / n;
                    }
                }
                {
                    let va = self.value(a).data();
                    let vb = self.value(b).data();
                    let db = grads[b.0].as_mut().unwrap().data_mut();
                    for ((d, x), y) in db.iter_mut().zip(va).zip(vb) {
                        *d -= gs * 2.0 * (x - y) / n;
                    }
                }
            }
            Op::L1Loss(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.value(a).len() as f64;
                let gs = gd[0];
                self.accumulate(grads, a, self.value(a).shape());
                self.accumulate(grads, b, self.value(b).shape());
                {
                    let va = self.value(a).data();
                    let vb = self.value(b).data();
                    let da = grads[a.0].as_mut().unwrap().data_mut();
                    for ((d, x), y) in da.iter_mut().zip(va).zip(vb) {
                        *d += gs * (x - y).signum_or_zero() / n;
                    }
                }
                {
                    let va = self.value(a).data();
                    let vb = self.value(b).data();
                    let db = grads[b.0].as_mut().unwrap().data_mut();
                    for ((d, x), y) in db.iter_mut().zip(va).zip(vb) {
                        *d -= gs * (x - y).signum_or_zero() / n;
                    }
                }
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, &s);
                let dst = grads[x.0].as_mut().unwrap().data_mut();
                for (d, sv) in dst.iter_mut().zip(gd) {
                    *d += sv;
                }
            }
            Op::PlaceRoi { emb, h, w, rect } => {
                let (h, w, rect) = (*h, *w, *rect);
                let s = self.value(*emb).shape().to_vec();
                let c = s[0];
                self.accumulate(grads, *emb, &s);
                let dst = grads[emb.0].as_mut().unwrap().data_mut();
                for (cc, d) in dst.iter_mut().enumerate().take(c) {
                    let mut acc = 0.0;
                    for y in rect.y0..rect.y1 {
                        for x in rect.x0..rect.x1 {
                            acc += gd[cc * h * w + y * w + x];
                        }
                    }
                    *d += acc;
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// dst[y][x] += alpha * src[y+dy][x+dx] over the in-bounds region.
fn shifted_axpy(dst: &mut [f64], src: &[f64], alpha: f64, dy: isize, dx: isize, h: usize, w: usize) {
    let y_start = (-dy).max(0) as usize;
    let y_end = (h as isize - dy.max(0)) as usize;
    let x_start = (-dx).max(0) as usize;
    let x_end = (w as isize - dx.max(0)) as usize;
    if y_end <= y_start || x_end <= x_start {
        return;
    }
    for y in y_start..y_end {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w + x_start..y * w + x_end];
        let srow = &src[sy * w + (x_start as isize + dx) as usize
            ..sy * w + (x_end as isize - 1 + dx) as usize + 1];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += alpha * s;
        }
    }
}

/// sum over in-bounds region of a[y][x] * b[y+dy][x+dx].
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, h: usize, w: usize) -> f64 {
    let y_start = (-dy).max(0) as usize;
    let y_end = (h as isize - dy.max(0)) as usize;
    let x_start = (-dx).max(0) as usize;
    let x_end = (w as isize - dx.max(0)) as usize;
    if y_end <= y_start || x_end <= x_start {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y_start..y_end {
        let by = (y as isize + dy) as usize;
        let arow = &a[y * w + x_start..y * w + x_end];
        let brow = &b[by * w + (x_start as isize + dx) as usize
            ..by * w + (x_end as isize - 1 + dx) as usize + 1];
        for (av, bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
    }
    acc
}

fn copy_slice(src: &[f64], shape: &[usize], ranges: &[(usize, usize)]) -> Vec<f64> {
    let out_shape: Vec<usize> = ranges.iter().map(|(s, e)| e - s).collect();
    let out_len: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(out_len);
    let strides = row_major_strides(shape);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..out_len {
        let mut off = 0;
        for (d, i) in idx.iter().enumerate() {
            off += (ranges[d].0 + i) * strides[d];
        }
        out.push(src[off]);
        bump_index(&mut idx, &out_shape);
    }
    out
}

fn scatter_add_slice(dst: &mut [f64], shape: &[usize], ranges: &[(usize, usize)], grad: &[f64]) {
    let out_shape: Vec<usize> = ranges.iter().map(|(s, e)| e - s).collect();
    let strides = row_major_strides(shape);
    let mut idx = vec![0usize; shape.len()];
    for gv in grad {
        let mut off = 0;
        for (d, i) in idx.iter().enumerate() {
            off += (ranges[d].0 + i) * strides[d];
        }
        dst[off] += gv;
        bump_index(&mut idx, &out_shape);
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn bump_index(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}
