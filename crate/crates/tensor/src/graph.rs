//! Eager tape for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Inputs of a node always precede it, so walking the tape backwards
//! is a valid reverse topological order.

use crate::error::TensorError;
use crate::kernels;
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities inside log-losses.
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    /// Leaf that never receives a gradient.
    Constant,
    Param,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Bce { pred: NodeId, target: NodeId },
    Mse { pred: NodeId, target: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Parameter nodes in creation order, paired with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, &Tensor)> + '_ {
        self.params
            .iter()
            .map(move |&id| (id, self.grads[id.0].as_ref().expect("parameter gradient")))
    }

    pub fn into_param_grads(mut self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|id| self.grads[id.0].take().expect("parameter gradient"))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient is reported for it as a parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// A trainable leaf.
    /// A leaf excluded from differentiation; upstream ops skip work that
    /// only feeds its gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId, TensorError> {
        let (value, argmax) = kernels::maxpool2d_forward(self.value(input), window)?;
        Ok(self.push(Op::MaxPool { input, argmax }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0)).expect("relu keeps finite values finite");
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid).expect("sigmoid output is bounded");
        self.push(Op::Sigmoid(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let value = self.value(a).map(|x| x * factor)?;
        Ok(self.push(Op::Scale(a, factor), value))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).map(f64::ln)?;
        Ok(self.push(Op::Ln(a), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor::scalar(self.value(a).sum())?;
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64)?;
        Ok(self.push(Op::Mean(a), value))
    }

    /// Mean binary cross-entropy with soft targets:
    /// `-mean(t ln p + (1 - t) ln(1 - p))`, `p` clamped away from 0 and 1.
    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        p.same_shape(t)?;
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / n)?;
        Ok(self.push(Op::Bce { pred, target }, value))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        p.same_shape(t)?;
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / p.len() as f64)?;
        Ok(self.push(Op::Mse { pred, target }, value))
    }

    fn is_constant(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Constant)
    }

    /// Reverse-mode accumulation from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[], 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            // Leaves keep their gradient; interior buffers are dropped once propagated.
            if matches!(node.op, Op::Input | Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Input | Op::Param | Op::Constant => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let (x, k) = (self.value(*input), self.value(*kernel));
                    let (gk, gb) = if self.is_constant(*input) {
                        kernels::conv2d_backward_params(x, k, &g, *stride, *pad)?
                    } else {
                        let cg = kernels::conv2d_backward(x, k, &g, *stride, *pad)?;
                        accumulate(&mut grads, *input, cg.input)?;
                        (cg.kernel, cg.bias)
                    };
                    accumulate(&mut grads, *kernel, gk)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let gi = kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Relu(x) => {
                    let gi = self.value(*x).zip_map(&g, |v, g| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, gi)?;
                }
                Op::Sigmoid(x) => {
                    let gi = node.value.zip_map(&g, |s, g| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, gi)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.map(|v| -v)?)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |g, y| g * y)?;
                    let gb = g.zip_map(self.value(*a), |g, x| g * x)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|v| v * f)?)?;
                }
                Op::Ln(a) => {
                    let gi = g.zip_map(self.value(*a), |g, x| g / x)?;
                    accumulate(&mut grads, *a, gi)?;
                }
                Op::Sum(a) => {
                    let up = g.item();
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), up))?;
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let up = g.item() / t.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(t.shape(), up))?;
                }
                Op::Bce { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = g.item() / p.len() as f64;
                    let gp = p.zip_map(t, |p, t| {
                        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        scale * (p - t) / (p * (1.0 - p))
                    })?;
                    accumulate(&mut grads, *pred, gp)?;
                    if !self.is_constant(*target) {
                        let gt = p.map(|p| {
                            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                            scale * ((1.0 - p).ln() - p.ln())
                        })?;
                        accumulate(&mut grads, *target, gt)?;
                    }
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * g.item() / p.len() as f64;
                    let gp = p.zip_map(t, |p, t| scale * (p - t))?;
                    let gt = gp.map(|v| -v)?;
                    accumulate(&mut grads, *pred, gp)?;
                    accumulate(&mut grads, *target, gt)?;
                }
            }
        }

        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Constant) {
                grads[i] = None;
            }
        }
        let params: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| NodeId(i))
            .collect();
        for &p in &params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.value(p).shape()));
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<(), TensorError> {
    match &mut grads[id.0] {
        Some(existing) => {
            existing.same_shape(&g)?;
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
            existing.validate()
        }
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
