//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and enough
//! cached state to run its vector-Jacobian product. `Tape::backward` walks the
//! nodes in reverse and accumulates gradients for every node that requires one.
//! Tensors are 2-D `[batch, features]` for activations and flat for parameters.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    Slice {
        src: Var,
        offset: usize,
    },
    Axpby {
        a: f64,
        x: Var,
        b: f64,
        y: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Add(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FeatureAffine {
        x: Var,
        scale: Vec<f64>,
    },
    LogSoftmax(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    KlToReference {
        logits: Var,
        /// `p_i * (log p_i - log r_i - kl)` per element, the whole VJP up to
        /// the incoming per-sample gradient.
        jac: Vec<f64>,
    },
    Min(Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// The computation record for one evaluation. Not shared across threads;
/// independent evaluations use independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
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

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Contiguous window `[offset, offset + prod(shape))` of `src`, reshaped.
    pub fn slice(&mut self, src: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src_len = self.nodes[src.0].value.len();
        if offset + len > src_len {
            return Err(Error::Shape {
                op: "slice",
                expected: vec![offset + len],
                got: vec![src_len],
            });
        }
        let data = self.nodes[src.0].value.data()[offset..offset + len].to_vec();
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { src, offset }, rg))
    }

    /// `a * x + b * y` elementwise.
    pub fn axpby(&mut self, a: f64, x: Var, b: f64, y: Var) -> Result<Var> {
        let (xv, yv) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        if xv.shape() != yv.shape() {
            return Err(Error::Shape {
                op: "axpby",
                expected: xv.shape().to_vec(),
                got: yv.shape().to_vec(),
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, Op::Axpby { a, x, b, y }, rg))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = self.axpby(1.0, x, 1.0, y)?;
        self.nodes[out.0].op = Op::Add(x, y);
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// `x @ w^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (batch, inp) = xv.rows_cols();
        let (out, w_in) = wv.rows_cols();
        if w_in != inp || bv.len() != out {
            return Err(Error::Shape {
                op: "linear",
                expected: vec![out, inp],
                got: vec![wv.shape().to_vec(), bv.shape().to_vec()]
                    .concat(),
            });
        }
        let mut data = vec![0.0; batch * out];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for r in 0..batch {
            let xr = &xd[r * inp..(r + 1) * inp];
            let yr = &mut data[r * out..(r + 1) * out];
            for o in 0..out {
                yr[o] = dot(xr, &wd[o * inp..(o + 1) * inp]) + bd[o];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor::matrix(batch, out, data)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Relu(x), rg)
    }

    /// Batch normalization using the statistics of the current batch.
    /// Returns the output along with the batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = &self.nodes[x.0].value;
        let (batch, feat) = xv.rows_cols();
        if self.nodes[gamma.0].value.len() != feat || self.nodes[beta.0].value.len() != feat {
            return Err(Error::Shape {
                op: "batch_norm",
                expected: vec![feat],
                got: vec![self.nodes[gamma.0].value.len()],
            });
        }
        if batch == 0 {
            return Err(Error::EmptyData("batch_norm on empty batch".into()));
        }
        let xd = xv.data();
        let mut mean = vec![0.0; feat];
        for r in 0..batch {
            axpy(1.0, &xd[r * feat..(r + 1) * feat], &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        let mut var = vec![0.0; feat];
        for r in 0..batch {
            for f in 0..feat {
                let d = xd[r * feat + f] - mean[f];
                var[f] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut x_hat = vec![0.0; batch * feat];
        let mut out = vec![0.0; batch * feat];
        for r in 0..batch {
            for f in 0..feat {
                let i = r * feat + f;
                x_hat[i] = (xd[i] - mean[f]) * inv_std[f];
                out[i] = g[f] * x_hat[i] + bt[f];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let node = self.push(
            Tensor::matrix(batch, feat, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            rg,
        );
        Ok((node, mean, var))
    }

    /// `x * scale + shift` per feature with constant coefficients. Used for
    /// batch normalization in frozen (running-statistics) mode, where no
    /// gradient reaches the normalization parameters.
    pub fn feature_affine(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (batch, feat) = xv.rows_cols();
        if scale.len() != feat || shift.len() != feat {
            return Err(Error::Shape {
                op: "feature_affine",
                expected: vec![feat],
                got: vec![scale.len(), shift.len()],
            });
        }
        let xd = xv.data();
        let mut out = vec![0.0; batch * feat];
        for r in 0..batch {
            for f in 0..feat {
                out[r * feat + f] = xd[r * feat + f] * scale[f] + shift[f];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::matrix(batch, feat, out)?, Op::FeatureAffine { x, scale }, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            log_softmax_row(xv.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Per-sample negative log-likelihood `-logp[r, labels[r]]`, shape `[batch]`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logp.0].value;
        let (rows, cols) = lv.rows_cols();
        if labels.len() != rows {
            return Err(Error::Length {
                op: "nll",
                left: rows,
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -lv.data()[r * cols + l])
            .collect();
        let rg = self.nodes[logp.0].requires_grad;
        Ok(self.push(
            Tensor::vector(data),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Per-sample `KL(softmax(logits) || reference)` where `reference_logp`
    /// holds row-wise log-probabilities treated as constants. Shape `[batch]`.
    pub fn kl_to_reference(&mut self, logits: Var, reference_logp: &[f64]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, cols) = lv.rows_cols();
        if reference_logp.len() != rows * cols {
            return Err(Error::Length {
                op: "kl_divergence",
                left: rows * cols,
                right: reference_logp.len(),
            });
        }
        let mut values = vec![0.0; rows];
        let mut jac = vec![0.0; rows * cols];
        let mut logp = vec![0.0; cols];
        for r in 0..rows {
            log_softmax_row(lv.row(r), &mut logp);
            let refr = &reference_logp[r * cols..(r + 1) * cols];
            let kl: f64 = logp
                .iter()
                .zip(refr)
                .map(|(lp, lr)| lp.exp() * (lp - lr))
                .sum();
            values[r] = kl;
            for c in 0..cols {
                jac[r * cols + c] = logp[c].exp() * (logp[c] - refr[c] - kl);
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(Tensor::vector(values), Op::KlToReference { logits, jac }, rg))
    }

    /// Elementwise minimum; ties route the gradient to `x`.
    pub fn min(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        if xv.shape() != yv.shape() {
            return Err(Error::Shape {
                op: "min",
                expected: xv.shape().to_vec(),
                got: yv.shape().to_vec(),
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(a, b)| a.min(*b))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        Ok(self.push(t, Op::Min(x, y), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.len().max(1) as f64;
        let m = xv.data().iter().sum::<f64>() / n;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Slice { src, offset } => {
                if self.wants(*src) {
                    let dst = self.accumulate(grads, *src);
                    axpy(1.0, g, &mut dst[*offset..*offset + g.len()]);
                }
            }
            Op::Axpby { a, x, b, y } => {
                if self.wants(*x) {
                    axpy(*a, g, self.accumulate(grads, *x));
                }
                if self.wants(*y) {
                    axpy(*b, g, self.accumulate(grads, *y));
                }
            }
            Op::Add(x, y) => {
                for v in [x, y] {
                    if self.wants(*v) {
                        axpy(1.0, g, self.accumulate(grads, *v));
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    axpy(*c, g, self.accumulate(grads, *x));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (batch, inp) = xv.rows_cols();
                let out = wv.rows_cols().0;
                if self.wants(*b) {
                    let db = self.accumulate(grads, *b);
                    for r in 0..batch {
                        axpy(1.0, &g[r * out..(r + 1) * out], db);
                    }
                }
                if self.wants(*w) {
                    let xd = xv.data();
                    let dw = self.accumulate(grads, *w);
                    for r in 0..batch {
                        let xr = &xd[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut dw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let wd = wv.data();
                    let dx = self.accumulate(grads, *x);
                    for r in 0..batch {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, &wd[o * inp..(o + 1) * inp], dxr);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.nodes[x.0].value.data();
                    let dx = self.accumulate(grads, *x);
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (batch, feat) = node.value.rows_cols();
                let mut sum_g = vec![0.0; feat];
                let mut sum_gx = vec![0.0; feat];
                for r in 0..batch {
                    for f in 0..feat {
                        let i = r * feat + f;
                        sum_g[f] += g[i];
                        sum_gx[f] += g[i] * x_hat[i];
                    }
                }
                if self.wants(*beta) {
                    axpy(1.0, &sum_g, self.accumulate(grads, *beta));
                }
                if self.wants(*gamma) {
                    axpy(1.0, &sum_gx, self.accumulate(grads, *gamma));
                }
                if self.wants(*x) {
                    let gd = self.nodes[gamma.0].value.data().to_vec();
                    let n = batch as f64;
                    let dx = self.accumulate(grads, *x);
                    for r in 0..batch {
                        for f in 0..feat {
                            let i = r * feat + f;
                            dx[i] += gd[f] * inv_std[f] / n
                                * (n * g[i] - sum_g[f] - x_hat[i] * sum_gx[f]);
                        }
                    }
                }
            }
            Op::FeatureAffine { x, scale } => {
                if self.wants(*x) {
                    let feat = scale.len();
                    let dx = self.accumulate(grads, *x);
                    for (i, (d, gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * scale[i % feat];
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let (rows, cols) = node.value.rows_cols();
                    let out = node.value.data();
                    let dx = self.accumulate(grads, *x);
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] += g[i] - out[i].exp() * s;
                        }
                    }
                }
            }
            Op::Nll { logp, labels } => {
                if self.wants(*logp) {
                    let cols = self.nodes[logp.0].value.rows_cols().1;
                    let dl = self.accumulate(grads, *logp);
                    for (r, &l) in labels.iter().enumerate() {
                        dl[r * cols + l] -= g[r];
                    }
                }
            }
            Op::KlToReference { logits, jac } => {
                if self.wants(*logits) {
                    let cols = self.nodes[logits.0].value.rows_cols().1;
                    let dl = self.accumulate(grads, *logits);
                    for (i, (d, j)) in dl.iter_mut().zip(jac).enumerate() {
                        *d += g[i / cols] * j;
                    }
                }
            }
            Op::Min(x, y) => {
                let xd = self.nodes[x.0].value.data();
                let yd = self.nodes[y.0].value.data();
                if self.wants(*x) {
                    let dx = self.accumulate(grads, *x);
                    for i in 0..g.len() {
                        if xd[i] <= yd[i] {
                            dx[i] += g[i];
                        }
                    }
                }
                if self.wants(*y) {
                    let dy = self.accumulate(grads, *y);
                    for i in 0..g.len() {
                        if xd[i] > yd[i] {
                            dy[i] += g[i];
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.len().max(1) as f64;
                    let dx = self.accumulate(grads, *x);
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }
}
