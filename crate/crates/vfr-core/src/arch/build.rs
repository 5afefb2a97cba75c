//! Instantiate executable models from specs.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, ModelSpec, SpecError};
use crate::rng;
use crate::tensor::ops::{self, BN_EPS, BN_MOMENTUM};
use crate::tensor::optim::{ParamId, ParamStore};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
enum Rt {
    Conv { w: ParamId, b: ParamId, stride: usize, pad: usize },
    ConvT { w: ParamId, b: ParamId, stride: usize },
    Bn { gamma: ParamId, beta: ParamId, running_mean: Vec<f32>, running_var: Vec<f32> },
    Relu,
    Sigmoid,
    MaxPool,
    Concat { source: usize },
    Gap,
    Dense { w: ParamId, b: ParamId },
    Softmax,
}

/// An executable model: the spec it was built from, its parameter store,
/// and per-layer runtime bindings. Frozen models are shareable for
/// concurrent inference; training mutates a model exclusively.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub seed: u64,
    layers: Vec<(String, Rt)>,
    /// Layer indices whose outputs feed a later concat.
    concat_sources: Vec<usize>,
}

/// RNG stream for one parameter tensor, keyed by build seed and position.
pub fn init_rng_stream(seed: u64, layer_idx: usize, slot: u64) -> ChaCha8Rng {
    rng::stream(seed, &[0x1217, layer_idx as u64, slot])
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Model {
    /// Build a model with He-uniform conv/dense weights, zero biases and
    /// beta, unit gamma, and zero/unit running statistics, all drawn
    /// deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model, SpecError> {
        let shapes = spec.infer_shapes()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut concat_sources = Vec::new();
        let mut id_to_idx = std::collections::HashMap::new();

        for (idx, layer) in spec.layers.iter().enumerate() {
            id_to_idx.insert(layer.id.clone(), idx);
            let rt = match &layer.kind {
                LayerKind::Conv { in_channels, out_channels, k, stride, pad } => {
                    let mut r = init_rng_stream(seed, idx, 0);
                    let w = he_uniform(&mut r, &[*out_channels, *in_channels, *k, *k], in_channels * k * k);
                    let wid = store.add(format!("{}.weight", layer.id), w);
                    let bid = store.add(format!("{}.bias", layer.id), Tensor::zeros(&[*out_channels]));
                    Rt::Conv { w: wid, b: bid, stride: *stride, pad: *pad }
                }
                LayerKind::ConvTranspose { in_channels, out_channels, k, stride } => {
                    let mut r = init_rng_stream(seed, idx, 0);
                    let w = he_uniform(&mut r, &[*in_channels, *out_channels, *k, *k], in_channels * k * k);
                    let wid = store.add(format!("{}.weight", layer.id), w);
                    let bid = store.add(format!("{}.bias", layer.id), Tensor::zeros(&[*out_channels]));
                    Rt::ConvT { w: wid, b: bid, stride: *stride }
                }
                LayerKind::BatchNorm { channels } => {
                    let gid = store.add(format!("{}.gamma", layer.id), Tensor::full(&[*channels], 1.0));
                    let bid = store.add(format!("{}.beta", layer.id), Tensor::zeros(&[*channels]));
                    Rt::Bn {
                        gamma: gid,
                        beta: bid,
                        running_mean: vec![0.0; *channels],
                        running_var: vec![1.0; *channels],
                    }
                }
                LayerKind::Relu => Rt::Relu,
                LayerKind::Sigmoid => Rt::Sigmoid,
                LayerKind::MaxPool2x2 => Rt::MaxPool,
                LayerKind::ConcatWith { source } => {
                    let src = id_to_idx[source.as_str()];
                    concat_sources.push(src);
                    Rt::Concat { source: src }
                }
                LayerKind::Gap => Rt::Gap,
                LayerKind::Dense { in_features, out_features } => {
                    let mut r = init_rng_stream(seed, idx, 0);
                    let w = he_uniform(&mut r, &[*out_features, *in_features], *in_features);
                    let wid = store.add(format!("{}.weight", layer.id), w);
                    let bid = store.add(format!("{}.bias", layer.id), Tensor::zeros(&[*out_features]));
                    Rt::Dense { w: wid, b: bid }
                }
                LayerKind::Softmax => Rt::Softmax,
            };
            layers.push((layer.id.clone(), rt));
        }
        let _ = shapes;
        Ok(Model { spec: spec.clone(), store, seed, layers, concat_sources })
    }

    fn check_input(&self, input: &Tensor) -> TensorResult<()> {
        let (c, h, w) = self.spec.input_shape;
        let (_, ic, ih, iw) = input.dims4("model_forward")?;
        if (ic, ih, iw) != (c, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "model_forward",
                detail: format!("input {:?} does not match model input ({c}, {h}, {w})", input.shape()),
            });
        }
        Ok(())
    }

    /// Pure inference pass. Batch norm uses running statistics.
    pub fn forward_infer(&self, input: &Tensor) -> TensorResult<Tensor> {
        self.check_input(input)?;
        let mut saved: std::collections::HashMap<usize, Tensor> = Default::default();
        let mut cur = input.clone();
        for (idx, (_, rt)) in self.layers.iter().enumerate() {
            cur = match rt {
                Rt::Conv { w, b, stride, pad } => ops::conv2d(
                    &cur,
                    &self.store.get(*w).value,
                    &self.store.get(*b).value,
                    *stride,
                    *pad,
                )?,
                Rt::ConvT { w, b, stride } => ops::conv2d_transpose(
                    &cur,
                    &self.store.get(*w).value,
                    &self.store.get(*b).value,
                    *stride,
                )?,
                Rt::Bn { gamma, beta, running_mean, running_var } => ops::batchnorm_infer(
                    &cur,
                    &self.store.get(*gamma).value,
                    &self.store.get(*beta).value,
                    running_mean,
                    running_var,
                    BN_EPS,
                )?,
                Rt::Relu => ops::relu(&cur),
                Rt::Sigmoid => ops::sigmoid(&cur),
                Rt::MaxPool => ops::maxpool2x2(&cur)?.0,
                Rt::Concat { source } => ops::concat_channels(&cur, &saved[source])?,
                Rt::Gap => ops::global_avg_pool(&cur)?,
                Rt::Dense { w, b } => ops::dense(
                    &cur,
                    &self.store.get(*w).value,
                    &self.store.get(*b).value,
                )?,
                Rt::Softmax => ops::softmax(&cur)?,
            };
            if self.concat_sources.contains(&idx) {
                saved.insert(idx, cur.clone());
            }
        }
        Ok(cur)
    }

    /// Training pass recorded on a tape. Batch norm normalizes with batch
    /// statistics and updates the model's running statistics in place.
    pub fn forward_train(&mut self, tape: &mut Tape, input: Tensor) -> TensorResult<NodeId> {
        self.check_input(&input)?;
        let mut saved: std::collections::HashMap<usize, NodeId> = Default::default();
        let mut cur = tape.leaf(input);
        for idx in 0..self.layers.len() {
            let rt = self.layers[idx].1.clone();
            cur = match rt {
                Rt::Conv { w, b, stride, pad } => {
                    let wn = tape.param(&self.store, w);
                    let bn = tape.param(&self.store, b);
                    tape.conv2d(cur, wn, bn, stride, pad)?
                }
                Rt::ConvT { w, b, stride } => {
                    let wn = tape.param(&self.store, w);
                    let bn = tape.param(&self.store, b);
                    tape.conv2d_transpose(cur, wn, bn, stride)?
                }
                Rt::Bn { gamma, beta, .. } => {
                    let gn = tape.param(&self.store, gamma);
                    let bn = tape.param(&self.store, beta);
                    let (out, stats) = tape.batchnorm_train(cur, gn, bn, BN_EPS)?;
                    if let Rt::Bn { running_mean, running_var, .. } = &mut self.layers[idx].1 {
                        for (r, m) in running_mean.iter_mut().zip(&stats.mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                        }
                        for (r, v) in running_var.iter_mut().zip(&stats.var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                        }
                    }
                    out
                }
                Rt::Relu => tape.relu(cur),
                Rt::Sigmoid => tape.sigmoid(cur),
                Rt::MaxPool => tape.maxpool2x2(cur)?,
                Rt::Concat { source } => tape.concat_channels(cur, saved[&source])?,
                Rt::Gap => tape.global_avg_pool(cur)?,
                Rt::Dense { w, b } => {
                    let wn = tape.param(&self.store, w);
                    let bn = tape.param(&self.store, b);
                    tape.dense(cur, wn, bn)?
                }
                Rt::Softmax => tape.softmax(cur)?,
            };
            if self.concat_sources.contains(&idx) {
                saved.insert(idx, cur);
            }
        }
        Ok(cur)
    }

    /// All persistent tensors: trainable parameters plus batch-norm running
    /// statistics, in a stable order, as (name, data, shape).
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.store.iter() {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for (id, rt) in &self.layers {
            if let Rt::Bn { running_mean, running_var, .. } = rt {
                out.push((format!("{id}.running_mean"), vec![running_mean.len()], running_mean.clone()));
                out.push((format!("{id}.running_var"), vec![running_var.len()], running_var.clone()));
            }
        }
        out
    }

    /// Overwrite one persistent tensor by name. Returns false if the name
    /// is unknown; shape mismatches are an error.
    pub fn restore_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> TensorResult<bool> {
        for i in 0..self.store.len() {
            let p = self.store.get_mut(ParamId(i));
            if p.name == name {
                if p.value.shape() != shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "restore_tensor",
                        detail: format!("'{name}' expects {:?}, checkpoint has {shape:?}", p.value.shape()),
                    });
                }
                let mut t = Tensor::new(shape.to_vec(), data)?;
                t.set_requires_grad(true);
                p.value = t;
                return Ok(true);
            }
        }
        for (id, rt) in &mut self.layers {
            if let Rt::Bn { running_mean, running_var, .. } = rt {
                let target = if name == format!("{id}.running_mean") {
                    Some(running_mean)
                } else if name == format!("{id}.running_var") {
                    Some(running_var)
                } else {
                    None
                };
                if let Some(buf) = target {
                    if shape != [buf.len()] {
                        return Err(TensorError::ShapeMismatch {
                            op: "restore_tensor",
                            detail: format!("'{name}' expects [{}], checkpoint has {shape:?}", buf.len()),
                        });
                    }
                    *buf = data;
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}
