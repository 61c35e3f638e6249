//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and a reverse sweep over indices is a valid reverse
//! topological order. Leaves can borrow their value (model parameters) to
//! avoid copying the whole parameter set for every forward pass.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Upsample {
        input: Var,
    },
    Flatten {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Modulate {
        feature: Var,
        saliency: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Tensor,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Relu { .. } => "relu",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Flatten { .. } => "flatten",
            Op::Linear { .. } => "linear",
            Op::Modulate { .. } => "modulate",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Test hook: scales the feature adjoint leaving every modulation node.
/// Used to check that the gradient checker catches a wrong adjoint rule.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FaultInjection {
    pub modulate_feature_scale: Option<f64>,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    fault: FaultInjection,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.adjoints.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
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

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.push_cow(op, Cow::Owned(value), requires_grad)
    }

    fn push_cow(&mut self, op: Op, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding an owned value.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf borrowing its value, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_cow(Op::Leaf, Cow::Borrowed(value), requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols, geom) =
            ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        // The patch matrix is only needed for the weight adjoint.
        let cols = if self.rg(weight) { cols } else { Vec::new() };
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            },
            out,
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(Op::MaxPool { input, argmax }, out, rg))
    }

    pub fn avgpool2d(&mut self, input: Var) -> Result<Var> {
        let out = ops::avgpool2d(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(Op::AvgPool { input }, out, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(Op::Relu { input }, out, rg)
    }

    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(Op::Upsample { input }, out, rg))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = v.clone().reshape(&[v.len()]).expect("flatten");
        let rg = self.rg(input);
        self.push(Op::Flatten { input }, out, rg)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Op::Linear { input, weight, bias }, out, rg))
    }

    pub fn modulate(&mut self, feature: Var, saliency: Var) -> Result<Var> {
        let out = ops::modulate(self.value(feature), self.value(saliency))?;
        let rg = self.rg(feature) || self.rg(saliency);
        Ok(self.push(Op::Modulate { feature, saliency }, out, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), label)?;
        let rg = self.rg(logits);
        Ok(self.push(Op::SoftmaxCe { logits, label, probs }, Tensor::scalar(loss), rg))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let out = a.add(b);
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, out, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Op::Sum { input }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let s = self.value(input).mean();
        let rg = self.rg(input);
        self.push(Op::Mean { input }, Tensor::scalar(s), rg)
    }

    /// Scalar `sum(weights * input)` with constant weights; a cheap way to
    /// reduce a tensor to a loss with a non-uniform upstream adjoint.
    pub fn dot(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "dot weights {:?} vs input {:?}",
                weights.shape(),
                x.shape()
            )));
        }
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(input);
        Ok(self.push(Op::Dot { input, weights }, Tensor::scalar(s), rg))
    }

    /// Fingerprint of every piecewise-linear branch taken in the forward
    /// pass: ReLU input signs and max-pool winners. Two evaluations with the
    /// same fingerprint lie on the same linear piece.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.value(*input).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar root. Adjoints of nodes with several
    /// consumers accumulate additively; nodes that do not require a
    /// gradient are skipped.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::new(self.value(root).shape(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            debug_assert_eq!(g.shape(), node.value.shape());
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    cols,
                    geom,
                } => {
                    let need_w = self.rg(*weight);
                    let need_x = self.rg(*input);
                    if need_w {
                        let grads = ops::conv2d_backward(&g, self.value(*weight), cols, geom, need_x);
                        self.accumulate(&mut adj, *weight, grads.weight);
                        if let Some(dx) = grads.input {
                            self.accumulate(&mut adj, *input, dx);
                        }
                    } else if need_x {
                        // Weight frozen: skip the patch-matrix product.
                        let dx = ops::conv2d_backward_input(&g, self.value(*weight), geom);
                        self.accumulate(&mut adj, *input, dx);
                    }
                    if self.rg(*bias) {
                        let db: Vec<f64> = g
                            .data()
                            .chunks_exact(geom.out_h * geom.out_w)
                            .map(|r| r.iter().sum())
                            .collect();
                        self.accumulate(&mut adj, *bias, Tensor::new(&[geom.filters], db)?);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool2d_backward(&g, argmax, self.value(*input).shape());
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::AvgPool { input } => {
                    let dx = ops::avgpool2d_backward(&g, self.value(*input).shape());
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Relu { input } => {
                    let dx = ops::relu_backward(&g, self.value(*input));
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Upsample { input } => {
                    let dx = ops::bilinear_upsample_backward(&g, self.value(*input).shape());
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Flatten { input } => {
                    let dx = g.clone().reshape(self.value(*input).shape())?;
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Linear { input, weight, bias } => {
                    let grads = ops::linear_backward(&g, self.value(*input), self.value(*weight), self.rg(*input));
                    if self.rg(*weight) {
                        self.accumulate(&mut adj, *weight, grads.weight);
                    }
                    if self.rg(*bias) {
                        self.accumulate(&mut adj, *bias, grads.bias);
                    }
                    if let Some(dx) = grads.input {
                        self.accumulate(&mut adj, *input, dx);
                    }
                }
                Op::Modulate { feature, saliency } => {
                    let (df, ds) = ops::modulate_backward(
                        &g,
                        self.value(*feature),
                        self.value(*saliency),
                        self.rg(*feature),
                        self.rg(*saliency),
                    );
                    if let Some(mut df) = df {
                        if let Some(s) = self.fault.modulate_feature_scale {
                            df = df.scale(s);
                        }
                        self.accumulate(&mut adj, *feature, df);
                    }
                    if let Some(ds) = ds {
                        self.accumulate(&mut adj, *saliency, ds);
                    }
                }
                Op::SoftmaxCe { logits, label, probs } => {
                    let up = g.data()[0];
                    let mut d: Vec<f64> = probs.iter().map(|p| p * up).collect();
                    d[*label] -= up;
                    let shape = self.value(*logits).shape().to_vec();
                    self.accumulate(&mut adj, *logits, Tensor::new(&shape, d)?);
                }
                Op::Add { lhs, rhs } => {
                    self.accumulate(&mut adj, *lhs, g.clone());
                    self.accumulate(&mut adj, *rhs, g.clone());
                }
                Op::Sum { input } => {
                    let dx = Tensor::full(self.value(*input).shape(), g.data()[0]);
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Mean { input } => {
                    let x = self.value(*input);
                    let dx = Tensor::full(x.shape(), g.data()[0] / x.len() as f64);
                    self.accumulate(&mut adj, *input, dx);
                }
                Op::Dot { input, weights } => {
                    let dx = weights.scale(g.data()[0]);
                    self.accumulate(&mut adj, *input, dx);
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, grad: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&grad),
            slot => *slot = Some(grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]), true);
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_adjoints_accumulate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-1.0, 2.0]), true);
        let r = g.relu(x);
        let y = g.add(r, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn modulation_adjoint_with_zero_saliency_is_identity() {
        let mut g = Graph::new();
        let f = g.input(Tensor::new(&[2, 1, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(), true);
        let s = g.input(Tensor::zeros(&[1, 1, 2]), true);
        let m = g.modulate(f, s).unwrap();
        let w = Tensor::new(&[2, 1, 2], vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let l = g.dot(m, w.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(f).unwrap().bit_eq(&w));
        assert!(grads.get(m).unwrap().bit_eq(&w));
    }

    #[test]
    fn frozen_leaves_get_no_adjoint() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]), false);
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let wv = g.param(&w, true);
        let bv = g.param(&b, false);
        let y = g.linear(x, wv, bv).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(bv).is_none());
        assert_eq!(grads.get(wv).unwrap().data(), &[1.0, 2.0]);
    }
}
