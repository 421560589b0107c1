//! Minimal reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its variables; calling
//! [`Tape::backward`] on a scalar output returns gradients for every node that
//! requires them. Nodes whose inputs are all constants are evaluated eagerly
//! and skipped during the backward sweep, so frozen networks (the feature
//! extractor) only pay for input gradients.

use std::sync::Arc;

use crate::features::FeatureBackend;
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    AvgPool2(Var),
    UpNearest2(Var),
    UpBilinear2(Var),
    LeakyRelu { x: Var, slope: F },
    Add(Var, Var),
    Lerp { a: Var, b: Var, alpha: F },
    Scale { x: Var, s: F },
    Reshape(Var),
    ChannelNorm { x: Var, sigma: Vec<F> },
    RelL1 { target: Var, pred: Var, eps: F },
    MeanAbsDiff { a: Var, b: Var },
    Mean(Var),
    External { x: Var, stage: usize, backend: Arc<dyn FeatureBackend<F>> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(value, Op::Conv2d { x, w, b }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let value = ops::avg_pool2(self.value(x));
        let rg = self.requires_grad(x);
        self.push(value, Op::AvgPool2(x), rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let value = ops::upsample_nearest2(self.value(x));
        let rg = self.requires_grad(x);
        self.push(value, Op::UpNearest2(x), rg)
    }

    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let value = ops::upsample_bilinear2(self.value(x));
        let rg = self.requires_grad(x);
        self.push(value, Op::UpBilinear2(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { v * slope });
        let rg = self.requires_grad(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, F::zero())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn lerp(&mut self, a: Var, b: Var, alpha: F) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "lerp shape mismatch");
        let beta = F::one() - alpha;
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| alpha * p + beta * q).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Lerp { a, b, alpha }, rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Per-channel `(x - mu[c]) / sigma[c]` on an `[N, C, H, W]` tensor.
    pub fn channel_norm(&mut self, x: Var, mu: &[F], sigma: &[F]) -> Var {
        let v = self.value(x);
        let (_, c, h, w) = ops::dims4(v);
        assert!(mu.len() == c && sigma.len() == c, "channel_norm: stats length != channels");
        let hw = h * w;
        let data = v
            .data()
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(i, plane)| {
                let (m, s) = (mu[i % c], sigma[i % c]);
                plane.iter().map(move |&p| (p - m) / s)
            })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(x);
        self.push(
            value,
            Op::ChannelNorm {
                x,
                sigma: sigma.to_vec(),
            },
            rg,
        )
    }

    /// Per-sample `sum|t - p| / (sum|t| + eps)`; output shape `[N]`.
    pub fn rel_l1(&mut self, target: Var, pred: Var, eps: F) -> Var {
        let (t, p) = (self.value(target), self.value(pred));
        assert_eq!(t.shape(), p.shape(), "rel_l1 shape mismatch");
        let n = t.shape()[0];
        let len = t.numel() / n;
        let data = t
            .data()
            .chunks_exact(len)
            .zip(p.data().chunks_exact(len))
            .map(|(ts, ps)| {
                let num: F = ts.iter().zip(ps).map(|(&a, &b)| (a - b).abs()).sum();
                let den: F = ts.iter().map(|a| a.abs()).sum();
                num / (den + eps)
            })
            .collect();
        let value = Tensor::new(vec![n], data).unwrap();
        let rg = self.rg(&[target, pred]);
        self.push(value, Op::RelL1 { target, pred, eps }, rg)
    }

    /// Per-sample mean absolute difference; output shape `[N]`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mean_abs_diff shape mismatch");
        let n = va.shape()[0];
        let len = va.numel() / n;
        let inv = F::one() / F::of(len as f64);
        let data = va
            .data()
            .chunks_exact(len)
            .zip(vb.data().chunks_exact(len))
            .map(|(xs, ys)| xs.iter().zip(ys).map(|(&p, &q)| (p - q).abs()).sum::<F>() * inv)
            .collect();
        let value = Tensor::new(vec![n], data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MeanAbsDiff { a, b }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / F::of(v.numel() as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub(crate) fn external(&mut self, x: Var, stage: usize, backend: Arc<dyn FeatureBackend<F>>) -> Var {
        let value = backend.forward(self.value(x), stage);
        let rg = self.requires_grad(x);
        self.push(value, Op::External { x, stage, backend }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::full(rv.shape(), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        need(*x),
                        need(*w),
                        b.is_some_and(need),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        need(*x),
                        need(*w),
                        b.is_some_and(need),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AvgPool2(x) => accumulate(&mut grads[x.0], ops::avg_pool2_backward(&g)),
                Op::UpNearest2(x) => accumulate(&mut grads[x.0], ops::upsample_nearest2_backward(&g)),
                Op::UpBilinear2(x) => accumulate(&mut grads[x.0], ops::upsample_bilinear2_backward(&g)),
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > F::zero() { gi } else { gi * *slope })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Lerp { a, b, alpha } => {
                    if need(*a) {
                        accumulate(&mut grads[a.0], g.map(|v| v * *alpha));
                    }
                    if need(*b) {
                        let beta = F::one() - *alpha;
                        accumulate(&mut grads[b.0], g.map(|v| v * beta));
                    }
                }
                Op::Scale { x, s } => accumulate(&mut grads[x.0], g.map(|v| v * *s)),
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], g.reshape(&shape).unwrap());
                }
                Op::ChannelNorm { x, sigma } => {
                    let c = sigma.len();
                    let (h, w) = g.hw();
                    let data = g
                        .data()
                        .chunks_exact(h * w)
                        .enumerate()
                        .flat_map(|(i, plane)| {
                            let s = sigma[i % c];
                            plane.iter().map(move |&v| v / s)
                        })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::RelL1 { target, pred, eps } => {
                    let (t, p) = (self.value(*target), self.value(*pred));
                    let n = t.shape()[0];
                    let len = t.numel() / n;
                    let sign = |v: F| {
                        if v > F::zero() {
                            F::one()
                        } else if v < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    };
                    let mut dp = need(*pred).then(|| vec![F::zero(); t.numel()]);
                    let mut dt = need(*target).then(|| vec![F::zero(); t.numel()]);
                    for s in 0..n {
                        let ts = &t.data()[s * len..(s + 1) * len];
                        let ps = &p.data()[s * len..(s + 1) * len];
                        let num: F = ts.iter().zip(ps).map(|(&a, &b)| (a - b).abs()).sum();
                        let den: F = ts.iter().map(|a| a.abs()).sum::<F>() + *eps;
                        let gs = g.data()[s];
                        if let Some(dp) = dp.as_mut() {
                            for j in 0..len {
                                dp[s * len + j] = gs * sign(ps[j] - ts[j]) / den;
                            }
                        }
                        if let Some(dt) = dt.as_mut() {
                            for j in 0..len {
                                dt[s * len + j] =
                                    gs * (sign(ts[j] - ps[j]) / den - num * sign(ts[j]) / (den * den));
                            }
                        }
                    }
                    if let Some(dp) = dp {
                        accumulate(&mut grads[pred.0], Tensor::new(p.shape().to_vec(), dp).unwrap());
                    }
                    if let Some(dt) = dt {
                        accumulate(&mut grads[target.0], Tensor::new(t.shape().to_vec(), dt).unwrap());
                    }
                }
                Op::MeanAbsDiff { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let n = va.shape()[0];
                    let len = va.numel() / n;
                    let inv = F::one() / F::of(len as f64);
                    let da: Vec<F> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .enumerate()
                        .map(|(j, (&p, &q))| {
                            let d = p - q;
                            let s = if d > F::zero() {
                                F::one()
                            } else if d < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            };
                            g.data()[j / len] * s * inv
                        })
                        .collect();
                    if need(*b) {
                        let db = da.iter().map(|&v| -v).collect();
                        accumulate(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), db).unwrap());
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), da).unwrap());
                    }
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let v = g.data()[0] / F::of(xv.numel() as f64);
                    accumulate(&mut grads[x.0], Tensor::full(xv.shape(), v));
                }
                Op::External { x, stage, backend } => {
                    let dx = backend.backward(self.value(*x), *stage, &g);
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.avg_pool2(a);
        assert!(!tape.requires_grad(b));
        let v = tape.variable(Tensor::full(&[1, 1, 2, 2], 2.0));
        let s = tape.add(a, v);
        assert!(tape.requires_grad(s));
    }

    #[test]
    fn mean_of_lerp_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::full(&[2, 2], 1.0));
        let b = tape.variable(Tensor::full(&[2, 2], 3.0));
        let l = tape.lerp(a, b, 0.25);
        let m = tape.mean(l);
        assert_eq!(tape.value(m).data()[0], 2.5);
        let g = tape.backward(m);
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0625));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 0.1875));
    }
}
