use std::collections::BTreeMap;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv1d { x: usize, w: usize, b: usize, len: usize, c_in: usize, c_out: usize, kernel: usize },
    Dense { x: usize, w: usize, b: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Flatten { x: usize },
    Concat { parts: Vec<usize> },
    SoftmaxCrossEntropy { logits: usize, label: usize, probs: Vec<f32> },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, which read through to the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// Each tape borrows the parameter store read-only, so several tapes (one
/// per worker) can share a model. Frozen parameters are recorded as
/// constants: nothing upstream of them is differentiated.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    track_grads: bool,
    flops: u64,
}

/// Parameter gradients from one backward pass, plus gradients for any
/// input recorded with [`Tape::input_with_grad`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `id`; `None` means the parameter was frozen or not on
    /// any path to the loss, i.e. an exact zero.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Dense gradient for `id`, zero-filled when the parameter got none.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Sums `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.add_scaled(g, 1.0),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        self.params.values_mut().for_each(|g| g.scale(factor));
    }
}

impl<'p> Tape<'p> {
    /// A tape that records gradients for every unfrozen parameter.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), track_grads: true, flops: 0 }
    }

    /// A tape that only evaluates; `backward` yields no gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { track_grads: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// FLOPs executed so far: one per multiply-accumulate plus bias adds,
    /// counted for convolutions and dense layers only.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad: requires_grad && self.track_grads });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Softmax probabilities saved by a cross-entropy node.
    pub fn probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    /// An input leaf whose gradient is reported by `backward`.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = !self.params.is_frozen(id);
        self.push(Op::Param(id), None, trainable)
    }

    /// Same-padded 1-D convolution of `x: [L, C_in]` with `w: [K, C_in, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape().to_vec());
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        }
        let (len, c_in) = (xs[0], xs[1]);
        let (kernel, w_in, c_out) = (ws[0], ws[1], ws[2]);
        if w_in != c_in || bs[0] != c_out || kernel % 2 == 0 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        }
        let mut out = vec![0.0; len * c_out];
        kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            len,
            c_in,
            c_out,
            kernel,
            &mut out,
        );
        self.flops += (kernel * c_in * c_out * len + c_out * len) as u64;
        let rg = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            Op::Conv1d { x: x.0, w: w.0, b: b.0, len, c_in, c_out, kernel },
            Some(Tensor { shape: vec![len, c_out], data: out }),
            rg,
        ))
    }

    /// `x: [D_in]` times `w: [D_in, D_out]` plus `b: [D_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape().to_vec());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != xs[0] || ws[1] != bs[0] {
            return Err(Error::shape("dense", format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        }
        let mut out = vec![0.0; bs[0]];
        kernels::dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        self.flops += (ws[0] * ws[1] + ws[1]) as u64;
        let rg = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(Op::Dense { x: x.0, w: w.0, b: b.0 }, Some(Tensor::vector(out)), rg))
    }

    /// Max pooling with window = stride = `window` along the length axis of `[L, C]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || window == 0 || !xs[0].is_multiple_of(window) {
            return Err(Error::shape("maxpool1d", format!("input {xs:?} not divisible by window {window}")));
        }
        let (len, ch) = (xs[0], xs[1]);
        let mut out = vec![0.0; (len / window) * ch];
        let argmax = kernels::maxpool_forward(self.value(x).data(), len, ch, window, &mut out);
        let rg = self.needs(x.0);
        Ok(self.push(
            Op::MaxPool { x: x.0, argmax },
            Some(Tensor { shape: vec![len / window, ch], data: out }),
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&z| z.max(0.0)).collect() };
        let rg = self.needs(x.0);
        self.push(Op::Relu { x: x.0 }, Some(out), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, Some(out), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::vector(v.data.clone());
        let rg = self.needs(x.0);
        self.push(Op::Flatten { x: x.0 }, Some(out), rg)
    }

    /// Concatenates rank-1 operands in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape.len() != 1 {
                return Err(Error::shape("concat", format!("operand shape {:?} is not rank 1", v.shape)));
            }
            data.extend_from_slice(&v.data);
        }
        let rg = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(
            Op::Concat { parts: parts.iter().map(|p| p.0).collect() },
            Some(Tensor::vector(data)),
            rg,
        ))
    }

    /// Scalar `-ln softmax(logits)[label]`; the probabilities are kept on
    /// the node and available through [`Tape::probs`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.shape.len() != 1 || v.len() < 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits shape {:?}", v.shape)));
        }
        if label >= v.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                v.len()
            )));
        }
        // log-sum-exp form keeps the loss finite for saturated logits
        let max = v.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + v.data.iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
        let loss = lse - v.data[label];
        let probs = kernels::softmax(&v.data);
        let rg = self.needs(logits.0);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits: logits.0, label, probs },
            Some(Tensor::scalar(loss)),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data.iter().sum();
        let rg = self.needs(x.0);
        self.push(Op::Sum { x: x.0 }, Some(Tensor::scalar(s)), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape),
            ));
        }
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.inputs
                        .insert(i, Tensor { shape: node.value.as_ref().unwrap().shape.clone(), data: g });
                }
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape.clone();
                    match out.params.get_mut(id) {
                        Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert(*id, Tensor { shape, data: g });
                        }
                    }
                }
                Op::Conv1d { x, w, b, len, c_in, c_out, kernel } => {
                    let mut gx = self.needs(*x).then(|| vec![0.0; len * c_in]);
                    let mut gw = self.needs(*w).then(|| vec![0.0; kernel * c_in * c_out]);
                    let mut gb = self.needs(*b).then(|| vec![0.0; *c_out]);
                    kernels::conv1d_backward(
                        self.value(Var(*x)).data(),
                        self.value(Var(*w)).data(),
                        &g,
                        *len,
                        *c_in,
                        *c_out,
                        *kernel,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Dense { x, w, b } => {
                    let xv = self.value(Var(*x));
                    let wv = self.value(Var(*w));
                    let mut gx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                    let mut gw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                    let gb = self.needs(*b).then(|| g.clone());
                    kernels::dense_backward(
                        xv.data(),
                        wv.data(),
                        &g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        None,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; self.value(Var(*x)).len()];
                    for (src, gv) in argmax.iter().zip(&g) {
                        gx[*src as usize] += gv;
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Relu { x } => {
                    let xv = self.value(Var(*x));
                    let gx = xv.data.iter().zip(&g).map(|(&z, &gv)| if z > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, Some(g.clone()));
                    }
                    accumulate(&mut grads, *a, Some(g));
                }
                Op::Flatten { x } => accumulate(&mut grads, *x, Some(g)),
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(Var(*p)).len();
                        if self.needs(*p) {
                            accumulate(&mut grads, *p, Some(g[offset..offset + n].to_vec()));
                        }
                        offset += n;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let scale = g[0];
                    let gx = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| scale * (p - if k == *label { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(&mut grads, *logits, Some(gx));
                }
                Op::Sum { x } => {
                    let n = self.value(Var(*x)).len();
                    accumulate(&mut grads, *x, Some(vec![g[0]; n]));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], idx: usize, g: Option<Vec<f32>>) {
    let Some(g) = g else { return };
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
