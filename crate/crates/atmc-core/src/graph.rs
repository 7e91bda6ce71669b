//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass as a flat tape of op nodes; node ids
//! ([`Var`]) are handed back to the caller. `backward` walks the tape in
//! reverse insertion order (a topological order by construction) and
//! accumulates gradients into every leaf registered with `requires_grad`.
//! Convolutions are lowered to GEMM via im2col, so a conv weight participates
//! as an ordinary matrix.
//!
//! Kernels split work only across disjoint output rows with a fixed reduction
//! order, so forward and backward are bit-identical for any worker count.

use rayon::prelude::*;

use crate::error::{AtmcError, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied by loss ops over the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<E> {
    Leaf {
        requires_grad: bool,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: E,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Relu {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        /// Cached im2col patches, [N, C*kh*kw, OH*OW].
        cols: Tensor<E>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        reduction: Reduction,
        /// Cached softmax probabilities, same shape as logits.
        probs: Tensor<E>,
    },
    SquaredError {
        pred: usize,
        target: Tensor<E>,
    },
}

/// One recorded forward pass.
pub struct Graph<E: Element> {
    ops: Vec<Op<E>>,
    values: Vec<Tensor<E>>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<E>>>,
    backward_run: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
        }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.needs.push(needs_grad);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    /// Register a leaf. Parameters and attackable inputs set `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf { requires_grad })
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AtmcError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm_nn_acc(
            self.values[a.0].data(),
            self.values[b.0].data(),
            out.data_mut(),
            m,
            p,
            n,
        );
        let ng = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, ng, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2d();
        let ng = self.needs[a.0];
        self.push(out, ng, Op::Transpose { a: a.0 })
    }

    fn check_same_shape(&self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AtmcError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let mut out = self.values[a.0].clone();
        out.axpy(E::one(), &self.values[b.0]);
        let ng = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let mut out = self.values[a.0].clone();
        out.axpy(-E::one(), &self.values[b.0]);
        let ng = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, ng, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let ng = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, ng, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let out = self.value(a).map(|v| v * ce);
        let ng = self.needs[a.0];
        self.push(out, ng, Op::Scale { a: a.0, c: ce })
    }

    /// Broadcast-add a bias over axis 1 of a [N,F] or [N,F,H,W] tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sb.len() != 1 || sx.len() < 2 || sx[1] != sb[0] {
            return Err(AtmcError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + bias {:?}", sx, sb),
            });
        }
        let f = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.values[x.0].clone();
        {
            let b = self.values[bias.0].data();
            for chunk in out.data_mut().chunks_mut(f * inner) {
                for (fi, bf) in b.iter().enumerate() {
                    for v in chunk[fi * inner..(fi + 1) * inner].iter_mut() {
                        *v = *v + *bf;
                    }
                }
            }
        }
        let ng = self.needs[x.0] || self.needs[bias.0];
        Ok(self.push(out, ng, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let ng = self.needs[x.0];
        self.push(out, ng, Op::Relu { x: x.0 })
    }

    /// Cross-correlation of x:[N,C,H,W] with a weight matrix w:[F, C*kh*kw],
    /// lowered to one GEMM per sample over im2col patches.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 2 {
            return Err(AtmcError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}", sx, sw),
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let f = sw[0];
        if sw[1] != c * kh * kw {
            return Err(AtmcError::ShapeMismatch {
                op: "conv2d",
                detail: format!("w {:?} vs C*kh*kw = {}", sw, c * kh * kw),
            });
        }
        let oh = kernels::conv_out_size(h, kh, stride, pad).ok_or(AtmcError::BadConvGeometry {
            h,
            w: wd,
            k: kh,
            stride,
            pad,
        })?;
        let ow = kernels::conv_out_size(wd, kw, stride, pad).ok_or(AtmcError::BadConvGeometry {
            h,
            w: wd,
            k: kw,
            stride,
            pad,
        })?;
        let ckk = c * kh * kw;
        let ospatial = oh * ow;
        let mut cols = Tensor::zeros(&[n, ckk, ospatial]);
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let run = |((sample_out, sample_cols), sample_x): ((&mut [E], &mut [E]), &[E])| {
                kernels::im2col_sample(
                    sample_x, c, h, wd, kh, kw, stride, pad, oh, ow, sample_cols,
                );
                kernels::mm_nn_acc(wv, sample_cols, sample_out, f, ckk, ospatial);
            };
            if n > 1 && n * f * ckk * ospatial >= 1 << 19 {
                out.data_mut()
                    .par_chunks_mut(f * ospatial)
                    .zip(cols.data_mut().par_chunks_mut(ckk * ospatial))
                    .zip(xv.par_chunks(c * h * wd))
                    .for_each(run);
            } else {
                out.data_mut()
                    .chunks_mut(f * ospatial)
                    .zip(cols.data_mut().chunks_mut(ckk * ospatial))
                    .zip(xv.chunks(c * h * wd))
                    .for_each(run);
            }
        }
        let ng = self.needs[x.0] || self.needs[w.0];
        Ok(self.push(
            out,
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                kh,
                kw,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(AtmcError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("{:?}", sx),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = kernels::conv_out_size(h, k, s, 0).ok_or(AtmcError::BadConvGeometry {
            h,
            w,
            k,
            stride: s,
            pad: 0,
        })?;
        let ow = kernels::conv_out_size(w, k, s, 0).ok_or(AtmcError::BadConvGeometry {
            h,
            w,
            k,
            stride: s,
            pad: 0,
        })?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        kernels::maxpool_forward(
            self.values[x.0].data(),
            n,
            c,
            h,
            w,
            k,
            s,
            oh,
            ow,
            out.data_mut(),
            &mut argmax,
        );
        let ng = self.needs[x.0];
        Ok(self.push(out, ng, Op::MaxPool2d { x: x.0, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs[x.0];
        Ok(self.push(out, ng, Op::Reshape { x: x.0 }))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let ng = self.needs[x.0];
        self.push(Tensor::scalar(acc), ng, Op::Sum { x: x.0 })
    }

    /// Numerically stable softmax + cross-entropy over logits [N,K].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(AtmcError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?}, {} labels", sl, labels.len()),
            });
        }
        let (n, k) = (sl[0], sl[1]);
        for &y in labels {
            if y >= k {
                return Err(AtmcError::LabelOutOfRange { label: y, classes: k });
            }
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut total = E::zero();
        {
            let lv = self.values[logits.0].data();
            for i in 0..n {
                let row = &lv[i * k..(i + 1) * k];
                let mut mx = row[0];
                for &v in row.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut se = E::zero();
                for &v in row.iter() {
                    se = se + (v - mx).exp();
                }
                let lse = se.ln();
                let p = &mut probs.data_mut()[i * k..(i + 1) * k];
                for (j, &v) in row.iter().enumerate() {
                    p[j] = ((v - mx) - lse).exp();
                }
                total = total + (lse - (row[labels[i]] - mx));
            }
        }
        if reduction == Reduction::Mean {
            total = total / E::from_f64(n as f64);
        }
        let ng = self.needs[logits.0];
        Ok(self.push(
            Tensor::scalar(total),
            ng,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                reduction,
                probs,
            },
        ))
    }

    /// Sum of squared differences against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(AtmcError::ShapeMismatch {
                op: "squared_error",
                detail: format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            });
        }
        let mut acc = E::zero();
        for (&p, &t) in self.values[pred.0].data().iter().zip(target.data().iter()) {
            let d = p - t;
            acc = acc + d * d;
        }
        let ng = self.needs[pred.0];
        Ok(self.push(
            Tensor::scalar(acc),
            ng,
            Op::SquaredError {
                pred: pred.0,
                target: target.clone(),
            },
        ))
    }

    /// Accumulate dLoss/dNode into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(AtmcError::DoubleBackward);
        }
        if self.value(loss).numel() != 1 {
            return Err(AtmcError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_run = true;
        self.grads[loss.0] = Some(Tensor::scalar(E::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.ops, &self.values, &self.needs, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }

        // Leaves off the loss path still report a (zero) gradient.
        for i in 0..self.ops.len() {
            if let Op::Leaf { requires_grad: true } = self.ops[i] {
                if self.grads[i].is_none() {
                    self.grads[i] = Some(Tensor::zeros(self.values[i].shape()));
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0].take()
    }
}

fn buf<'a, E: Element>(
    grads: &'a mut [Option<Tensor<E>>],
    values: &[Tensor<E>],
    id: usize,
) -> &'a mut Tensor<E> {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(values[id].shape()));
    }
    grads[id].as_mut().unwrap()
}

fn propagate<E: Element>(
    ops: &[Op<E>],
    values: &[Tensor<E>],
    needs: &[bool],
    grads: &mut [Option<Tensor<E>>],
    i: usize,
    g: &Tensor<E>,
) {
    match &ops[i] {
        Op::Leaf { .. } => {}
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, p) = (values[a].shape()[0], values[a].shape()[1]);
            let n = values[b].shape()[1];
            if needs[a] {
                // dA[m,p] += dC[m,n] * B[p,n]^T; B viewed row-major as [p,n].
                kernels::mm_nt_acc(
                    g.data(),
                    values[b].data(),
                    buf(grads, values, a).data_mut(),
                    m,
                    n,
                    p,
                );
            }
            if needs[b] {
                // dB[p,n] += A[m,p]^T * dC[m,n]
                kernels::mm_tn_acc(
                    values[a].data(),
                    g.data(),
                    buf(grads, values, b).data_mut(),
                    p,
                    m,
                    n,
                );
            }
        }
        Op::Transpose { a } => {
            if needs[*a] {
                let gt = g.transpose2d();
                buf(grads, values, *a).axpy(E::one(), &gt);
            }
        }
        Op::Add { a, b } => {
            if needs[*a] {
                buf(grads, values, *a).axpy(E::one(), g);
            }
            if needs[*b] {
                buf(grads, values, *b).axpy(E::one(), g);
            }
        }
        Op::Sub { a, b } => {
            if needs[*a] {
                buf(grads, values, *a).axpy(E::one(), g);
            }
            if needs[*b] {
                buf(grads, values, *b).axpy(-E::one(), g);
            }
        }
        Op::Mul { a, b } => {
            if needs[*a] {
                let gb = buf(grads, values, *a);
                for ((o, &gv), &bv) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter())
                    .zip(values[*b].data().iter())
                {
                    *o = *o + gv * bv;
                }
            }
            if needs[*b] {
                let gb = buf(grads, values, *b);
                for ((o, &gv), &av) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter())
                    .zip(values[*a].data().iter())
                {
                    *o = *o + gv * av;
                }
            }
        }
        Op::Scale { a, c } => {
            if needs[*a] {
                buf(grads, values, *a).axpy(*c, g);
            }
        }
        Op::AddBias { x, bias } => {
            if needs[*x] {
                buf(grads, values, *x).axpy(E::one(), g);
            }
            if needs[*bias] {
                let sx = values[*x].shape();
                let f = sx[1];
                let inner: usize = sx[2..].iter().product();
                let gb = buf(grads, values, *bias);
                let gd = gb.data_mut();
                for chunk in g.data().chunks(f * inner) {
                    for fi in 0..f {
                        let mut acc = E::zero();
                        for &v in &chunk[fi * inner..(fi + 1) * inner] {
                            acc = acc + v;
                        }
                        gd[fi] = gd[fi] + acc;
                    }
                }
            }
        }
        Op::Relu { x } => {
            if needs[*x] {
                let xv = values[*x].data();
                let gb = buf(grads, values, *x);
                for ((o, &gv), &xvv) in gb.data_mut().iter_mut().zip(g.data().iter()).zip(xv.iter())
                {
                    if xvv > E::zero() {
                        *o = *o + gv;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            kh,
            kw,
            stride,
            pad,
            cols,
        } => {
            let (x, w) = (*x, *w);
            let sx = values[x].shape();
            let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let so = values[i].shape();
            let (f, oh, ow) = (so[1], so[2], so[3]);
            let ckk = c * kh * kw;
            let ospatial = oh * ow;
            if needs[w] {
                // dW[f,ckk] += sum over samples of dY_n[f,os] * cols_n[ckk,os]^T.
                // Sample order is ascending, so accumulation is deterministic.
                let gb = buf(grads, values, w);
                for ni in 0..n {
                    let dy_n = &g.data()[ni * f * ospatial..(ni + 1) * f * ospatial];
                    let cols_n = &cols.data()[ni * ckk * ospatial..(ni + 1) * ckk * ospatial];
                    kernels::mm_nt_acc(dy_n, cols_n, gb.data_mut(), f, ospatial, ckk);
                }
            }
            if needs[x] {
                let wv = values[w].data();
                let gxb = buf(grads, values, x);
                let run = |(dx_n, dy_n): (&mut [E], &[E])| {
                    let mut dcols = vec![E::zero(); ckk * ospatial];
                    kernels::mm_tn_acc(wv, dy_n, &mut dcols, ckk, f, ospatial);
                    kernels::col2im_sample(
                        &dcols, c, h, wd, *kh, *kw, *stride, *pad, oh, ow, dx_n,
                    );
                };
                if n > 1 && n * f * ckk * ospatial >= 1 << 19 {
                    gxb.data_mut()
                        .par_chunks_mut(c * h * wd)
                        .zip(g.data().par_chunks(f * ospatial))
                        .for_each(run);
                } else {
                    gxb.data_mut()
                        .chunks_mut(c * h * wd)
                        .zip(g.data().chunks(f * ospatial))
                        .for_each(run);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if needs[*x] {
                let gb = buf(grads, values, *x);
                let gd = gb.data_mut();
                for (slot, &gv) in argmax.iter().zip(g.data().iter()) {
                    gd[*slot as usize] = gd[*slot as usize] + gv;
                }
            }
        }
        Op::Reshape { x } => {
            if needs[*x] {
                let gb = buf(grads, values, *x);
                for (o, &gv) in gb.data_mut().iter_mut().zip(g.data().iter()) {
                    *o = *o + gv;
                }
            }
        }
        Op::Sum { x } => {
            if needs[*x] {
                let gv = g.item();
                let gb = buf(grads, values, *x);
                for o in gb.data_mut().iter_mut() {
                    *o = *o + gv;
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            reduction,
            probs,
        } => {
            if needs[*logits] {
                let n = probs.shape()[0];
                let k = probs.shape()[1];
                let scale = match reduction {
                    Reduction::Sum => g.item(),
                    Reduction::Mean => g.item() / E::from_f64(n as f64),
                };
                let gb = buf(grads, values, *logits);
                let gd = gb.data_mut();
                for row in 0..n {
                    let p = &probs.data()[row * k..(row + 1) * k];
                    let y = labels[row];
                    for j in 0..k {
                        let ind = if j == y { E::one() } else { E::zero() };
                        gd[row * k + j] = gd[row * k + j] + scale * (p[j] - ind);
                    }
                }
            }
        }
        Op::SquaredError { pred, target } => {
            if needs[*pred] {
                let gv = g.item();
                let pv = values[*pred].data();
                let gb = buf(grads, values, *pred);
                let two = E::from_f64(2.0);
                for ((o, &p), &t) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(pv.iter())
                    .zip(target.data().iter())
                {
                    *o = *o + gv * two * (p - t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::eye(2), false);
        let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn grad_of_sum_matmul_wrt_a_is_b_transpose_rows() {
        // loss = sum(A*B) => dA[i,l] = sum_j B[l,j]
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.3, 0.2, 0.5, 0.0, -0.7]).unwrap(), true);
        let bt = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = g.leaf(bt.clone(), false);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        let da = g.grad(a).unwrap();
        for i in 0..2 {
            for l in 0..3 {
                let want: f64 = (0..2).map(|j| bt.data()[l * 2 + j]).sum();
                assert!((da.data()[i * 3 + l] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_and_trivial_losses() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_grad_is_ones_and_constant_grad_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let c = g.leaf(Tensor::from_vec(vec![5.0]), false);
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        // x does not feed the loss: gradient exists and is zero.
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(AtmcError::DoubleBackward)));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        let loss = g.softmax_cross_entropy(logits, &[0], Reduction::Sum).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 3], vec![1.3, -0.2, 4.0]).unwrap(), false);
        let l1 = g.softmax_cross_entropy(logits, &[2], Reduction::Sum).unwrap();
        let shifted = g.leaf(
            Tensor::new(vec![1, 3], vec![1.3 + 100.0, -0.2 + 100.0, 4.0 + 100.0]).unwrap(),
            false,
        );
        let l2 = g.softmax_cross_entropy(shifted, &[2], Reduction::Sum).unwrap();
        assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 2]), false);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[2], Reduction::Sum),
            Err(AtmcError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn maxpool_takes_max() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = g.leaf(Tensor::new(vec![1, 1, 3, 3], data.clone()).unwrap(), false);
        let w = g.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false);
        let y = g.conv2d(x, w, 1, 1, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 9], 1.0), false);
        let y = g.conv2d(x, w, 3, 3, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv2d_rejects_degenerate_output() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let w = g.leaf(Tensor::zeros(&[1, 9]), false);
        assert!(matches!(
            g.conv2d(x, w, 3, 3, 1, 0),
            Err(AtmcError::BadConvGeometry { .. })
        ));
    }
}
