//! Append-only Wengert tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so reverse append order is a valid
//! topological order for the backward sweep.

use super::kernels::{self, ConvGeometry, BN_MOMENTUM};
use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes input gradients from `(input values, output value, output grad, which inputs need grad)`.
pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F], &[bool]) -> Vec<Option<Vec<F>>>>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    trainable: bool,
    grad: Option<Tensor<F>>,
}

#[derive(Debug)]
pub enum BatchNormMode<'a, F: Scalar = f32> {
    /// Normalize by batch statistics and update the running estimates.
    Train(&'a mut RunningStats<F>),
    /// Normalize by the running estimates.
    Eval(&'a RunningStats<F>),
}

/// Per-channel running mean and variance for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F: Scalar = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    recording: bool,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates forward values only; nothing is saved for backward.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            trainable: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a trainable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends a node. `make_backward` is only invoked when some input needs a
    /// gradient, so saved buffers are skipped on inference tapes.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<F>,
        inputs: &[Var],
        make_backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then(make_backward);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            backward,
            requires_grad,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `∂loss/∂·` back to every trainable leaf.
    ///
    /// Trainable leaves that do not influence `loss` receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward pass".into()));
        }
        if !self.recording {
            return Err(Error::Backward("inference tape records no gradient information".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(bw) = node.backward.as_ref() {
                let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let input_grads = bw(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match grads[v.0].as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&ig) {
                                *a = *a + *b;
                            }
                        }
                        None => grads[v.0] = Some(ig),
                    }
                }
            } else if node.trainable {
                let shape = node.value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g).expect("gradient matches leaf shape"));
            }
        }
        for node in self.nodes.iter_mut().filter(|n| n.trainable && n.grad.is_none()) {
            node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
        }
        Ok(())
    }

    // ---- operations -------------------------------------------------------

    /// 2-D convolution. `x: [n,c_in,h,w]`, `kernel: [c_in,c_out,k,k]`, `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(kernel), self.shape(bias), stride, padding)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push_op(value, &[x, kernel, bias], move || {
            Box::new(move |inputs, _, g, needs| {
                let grads = kernels::conv2d_backward(&geom, inputs[0].data(), inputs[1].data(), g, needs[0]);
                vec![grads.input, Some(grads.kernel), Some(grads.bias)]
            })
        }))
    }

    /// Batch normalization over `[n,c,h,w]` with per-channel affine parameters.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, F>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input must be [n,c,h,w], got {shape:?}")));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::dim("batch_norm", name, c, self.value(v).len()));
            }
        }
        let stats_len = match &mode {
            BatchNormMode::Train(s) => s.mean.len().min(s.var.len()),
            BatchNormMode::Eval(s) => s.mean.len().min(s.var.len()),
        };
        if stats_len != c {
            return Err(Error::dim("batch_norm", "running stats", c, stats_len));
        }
        let train = matches!(mode, BatchNormMode::Train(_));
        let fwd = kernels::batchnorm_forward(
            &shape,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            match &mode {
                BatchNormMode::Train(_) => None,
                BatchNormMode::Eval(s) => Some((s.mean.as_slice(), s.var.as_slice())),
            },
        );
        if let (Some((mean, var)), BatchNormMode::Train(stats)) = (&fwd.batch_stats, mode) {
            let count = shape[0] * shape[2] * shape[3];
            let m = F::from_f64(BN_MOMENTUM);
            let unbias = if count > 1 {
                F::from_f64(count as f64 / (count - 1) as f64)
            } else {
                F::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (F::one() - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (F::one() - m) * stats.var[ch] + m * var[ch] * unbias;
            }
        }
        let value = Tensor::new(shape.clone(), fwd.out)?;
        let (xhat, inv_std) = (fwd.xhat, fwd.inv_std);
        Ok(self.push_op(value, &[x, gamma, beta], move || {
            Box::new(move |inputs, _, g, _| {
                let grads = kernels::batchnorm_backward(&shape, g, &xhat, &inv_std, inputs[1].data(), train);
                vec![Some(grads.input), Some(grads.gamma), Some(grads.beta)]
            })
        }))
    }

    /// Affine map `x·W + b` with `x: [n,in]`, `W: [in,out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("dense", format!("input must be [n,features], got {xs:?}")));
        }
        if ws.len() != 2 {
            return Err(Error::shape("dense", format!("weight must be [in,out], got {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim("dense", "input features", ws[0], xs[1]));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(Error::dim("dense", "bias", ws[1], self.value(bias).len()));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let bias_data = self.value(bias).data();
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bias_data);
        }
        gemm_nn(n, din, dout, self.value(x).data(), self.value(weight).data(), F::one(), &mut out);
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push_op(value, &[x, weight, bias], move || {
            Box::new(move |inputs, _, g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![F::zero(); n * din];
                    gemm_nt(n, dout, din, g, inputs[1].data(), F::zero(), &mut dx);
                    dx
                });
                let mut dw = vec![F::zero(); din * dout];
                gemm_tn(din, n, dout, inputs[0].data(), g, F::zero(), &mut dw);
                let mut db = vec![F::zero(); dout];
                for row in g.chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![dx, Some(dw), Some(db)]
            })
        }))
    }

    /// `max(x, 0)`; NaN passes through so a corrupted input cannot hide.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() || v.is_nan() { v } else { F::zero() });
        self.push_op(value, &[x], || {
            Box::new(|inputs, _, g, _| {
                let dx = inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                vec![Some(dx)]
            })
        })
    }

    /// Max pooling; the gradient flows to the recorded argmax of each window.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, out, argmax) = kernels::max_pool_forward(self.shape(x), self.value(x).data(), window, stride)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, &[x], move || {
            Box::new(move |inputs, _, g, _| {
                let mut dx = vec![F::zero(); inputs[0].len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Average pooling onto a fixed spatial grid regardless of input size.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("adaptive_avg_pool2d", format!("input must be [n,c,h,w], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 || out_h > shape[2] || out_w > shape[3] {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("cannot pool {}x{} onto {out_h}x{out_w}", shape[2], shape[3]),
            ));
        }
        let out = kernels::adaptive_avg_pool_forward(&shape, self.value(x).data(), out_h, out_w);
        let value = Tensor::new(vec![shape[0], shape[1], out_h, out_w], out)?;
        Ok(self.push_op(value, &[x], move || {
            Box::new(move |_, _, g, _| vec![Some(kernels::adaptive_avg_pool_backward(&shape, g, out_h, out_w))])
        }))
    }

    /// Collapses all trailing axes: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let value = self.value(x).clone().reshape(vec![n, rest]).expect("same element count");
        self.push_op(value, &[x], || Box::new(|_, _, g, _| vec![Some(g.to_vec())]))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: F) -> Result<Var> {
        let value = kernels::softmax_with_temperature(self.value(x), temperature)?;
        let classes = *value.shape().last().expect("non-empty shape");
        Ok(self.push_op(value, &[x], move || {
            Box::new(move |_, y, g, _| {
                let mut dx = vec![F::zero(); g.len()];
                for ((yr, gr), dr) in y.data().chunks(classes).zip(g.chunks(classes)).zip(dx.chunks_mut(classes)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / temperature;
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], || {
            Box::new(|_, _, g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], || {
            Box::new(|inputs, _, g, needs| {
                let da = needs[0].then(|| g.iter().zip(inputs[1].data()).map(|(&gv, &y)| gv * y).collect());
                let db = needs[1].then(|| g.iter().zip(inputs[0].data()).map(|(&gv, &x)| gv * x).collect());
                vec![da, db]
            })
        }))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push_op(value, &[x], move || {
            Box::new(move |_, _, g, _| vec![Some(g.iter().map(|&v| v * factor).collect())])
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(F::zero(), |acc, &v| acc + v);
        self.push_op(Tensor::scalar(total), &[x], || {
            Box::new(|inputs, _, g, _| vec![Some(vec![g[0]; inputs[0].len()])])
        })
    }
}
