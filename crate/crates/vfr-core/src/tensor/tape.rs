//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass, in
//! topological order. `backward` replays the record in reverse, seeding the
//! scalar loss with 1.0 and accumulating parameter gradients into the
//! [`ParamStore`]. One backward pass per recorded forward pass; a tape is
//! not shareable across concurrent forward passes.

use super::ops::{self, BnStats};
use super::optim::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Constant input; receives no gradient.
    Leaf,
    /// Trainable parameter; backward accumulates into the store.
    Param(ParamId),
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, stats: BnStats },
    BnInfer { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    Gap { x: NodeId },
    Concat { a: NodeId, b: NodeId, split: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Softmax { x: NodeId },
    Bce { pred: NodeId, target: Tensor },
    CrossEntropy { probs: NodeId, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a constant input tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Record a trainable parameter by copying its current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = ops::sum(self.value(x));
        self.push(out, Op::Sum { x })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv2d_transpose(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let out = ops::conv2d_transpose(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride }))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2x2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<(NodeId, BnStats)> {
        let (out, stats) = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let id = self.push(out, Op::BnTrain { x, gamma, beta, stats: stats.clone() });
        Ok((id, stats))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<NodeId> {
        let out = ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        Ok(self.push(
            out,
            Op::BnInfer { x, gamma, beta, mean: mean.to_vec(), var: var.to_vec(), eps },
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::Gap { x }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let split = self.value(a).shape()[1];
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b, split }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    pub fn bce_loss(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let out = ops::bce_loss(self.value(pred), &target)?;
        Ok(self.push(out, Op::Bce { pred, target }))
    }

    pub fn cross_entropy_loss(&mut self, probs: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let out = ops::cross_entropy_loss(self.value(probs), &labels)?;
        Ok(self.push(out, Op::CrossEntropy { probs, labels }))
    }

    /// Reverse pass from a scalar loss. Every parameter reachable from the
    /// loss accumulates its gradient into the store; unreachable parameters
    /// receive nothing (their cleared slots stay zero). Gradients keep
    /// accumulating across calls until `store.zero_grads()`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: value.shape().to_vec() });
        }
        self.backward_seeded(loss, &[1.0], store)
    }

    /// Reverse pass seeding `out` with an explicit upstream gradient.
    /// Gradient-checking harnesses use this to probe one op at a time.
    pub fn backward_seeded(&self, out: NodeId, seed: &[f32], store: &mut ParamStore) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "seed length {} != output numel {}",
                    seed.len(),
                    self.value(out).numel()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let dout = Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad matches node shape");
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(pid) => store.accumulate_grad(*pid, dout.data()),
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &dout);
                    accumulate(&mut grads, *x, dx.data());
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(&self.nodes[i].value, &dout);
                    accumulate(&mut grads, *x, dx.data());
                }
                Op::Mul { a, b } => {
                    let da = ops::mul(&dout, self.value(*b)).expect("shape checked at forward");
                    let db = ops::mul(&dout, self.value(*a)).expect("shape checked at forward");
                    accumulate(&mut grads, *a, da.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::Sum { x } => {
                    let dy = dout.data()[0];
                    let dx = vec![dy; self.value(*x).numel()];
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &dout, *stride, *pad);
                    accumulate(&mut grads, *x, dx.data());
                    accumulate(&mut grads, *w, dw.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::ConvTranspose2d { x, w, b, stride } => {
                    let (dx, dw, db) =
                        ops::conv2d_transpose_backward(self.value(*x), self.value(*w), &dout, *stride);
                    accumulate(&mut grads, *x, dx.data());
                    accumulate(&mut grads, *w, dw.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2x2_backward(self.value(*x).shape(), argmax, &dout);
                    accumulate(&mut grads, *x, dx.data());
                }
                Op::BnTrain { x, gamma, beta, stats } => {
                    let (dx, dg, db) =
                        ops::batchnorm_train_backward(self.value(*x), self.value(*gamma), stats, &dout);
                    accumulate(&mut grads, *x, dx.data());
                    accumulate(&mut grads, *gamma, dg.data());
                    accumulate(&mut grads, *beta, db.data());
                }
                Op::BnInfer { x, gamma, beta, mean, var, eps } => {
                    let (dx, dg, db) = ops::batchnorm_infer_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &dout,
                    );
                    accumulate(&mut grads, *x, dx.data());
                    accumulate(&mut grads, *gamma, dg.data());
                    accumulate(&mut grads, *beta, db.data());
                }
                Op::Gap { x } => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &dout);
                    accumulate(&mut grads, *x, dx.data());
                }
                Op::Concat { a, b, split } => {
                    let (da, db) = ops::split_channels(&dout, *split).expect("shape checked at forward");
                    accumulate(&mut grads, *a, da.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &dout);
                    accumulate(&mut grads, *x, dx.data());
                    accumulate(&mut grads, *w, dw.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::Softmax { x } => {
                    let dx = ops::softmax_backward(&self.nodes[i].value, &dout);
                    accumulate(&mut grads, *x, dx.data());
                }
                Op::Bce { pred, target } => {
                    let dx = ops::bce_loss_backward(self.value(*pred), target, dout.data()[0]);
                    accumulate(&mut grads, *pred, dx.data());
                }
                Op::CrossEntropy { probs, labels } => {
                    let dx = ops::cross_entropy_loss_backward(self.value(*probs), labels, dout.data()[0]);
                    accumulate(&mut grads, *probs, dx.data());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, delta: &[f32]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}
