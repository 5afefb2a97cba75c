//! Declarative model specifications: a linear chain of layers with
//! channel-concatenation skip connections, shape inference over the chain,
//! parameter/MAC accounting, a deterministic builder, and a versioned
//! binary checkpoint format.

mod build;
mod checkpoint;
mod count;

pub use build::{init_rng_stream, Model, RunMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_VERSION};
pub use count::{count_flops, count_parameters, FlopsReport, ParamCount};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("layer '{layer}': {detail}")]
    Layer { layer: String, detail: String },
    #[error("duplicate layer id '{0}'")]
    DuplicateId(String),
    #[error("model has no layers")]
    Empty,
    #[error("input shape {0:?} has a zero extent")]
    BadInput(Vec<usize>),
}

/// Layer kinds and their hyperparameters. Channel counts are stored
/// explicitly and validated against the inferred input during shape
/// inference, so a spec inconsistency is reported by layer name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize },
    ConvTranspose { in_channels: usize, out_channels: usize, k: usize, stride: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool2x2,
    /// Concatenate the named earlier layer's output onto this point's input.
    ConcatWith { source: String },
    Gap,
    Dense { in_features: usize, out_features: usize },
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { id: id.into(), kind }
    }
}

/// A full model: input shape (C, H, W), ordered layers, and a short
/// description of the output head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub output: String,
}

/// Feature shape flowing between layers: spatial maps until GAP, flat
/// feature vectors afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Map { c: usize, h: usize, w: usize },
    Vec { c: usize },
}

impl Feature {
    pub fn channels(&self) -> usize {
        match *self {
            Feature::Map { c, .. } | Feature::Vec { c } => c,
        }
    }
}

fn layer_err(layer: &str, detail: impl Into<String>) -> SpecError {
    SpecError::Layer { layer: layer.to_string(), detail: detail.into() }
}

impl ModelSpec {
    /// Shape inference over the layer chain. Pure: no arithmetic on tensor
    /// values is executed. Returns the feature shape after every layer.
    ///
    /// Validates: unique ids, concat sources referring to earlier layers
    /// with matching spatial extents, channel arithmetic along every path,
    /// and map/vector domain of each kind.
    pub fn infer_shapes(&self) -> Result<Vec<Feature>, SpecError> {
        if self.layers.is_empty() {
            return Err(SpecError::Empty);
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(SpecError::BadInput(vec![c, h, w]));
        }

        let mut seen = std::collections::HashMap::new();
        let mut outs: Vec<Feature> = Vec::with_capacity(self.layers.len());
        let mut cur = Feature::Map { c, h, w };

        for (idx, layer) in self.layers.iter().enumerate() {
            if seen.insert(layer.id.clone(), idx).is_some() {
                return Err(SpecError::DuplicateId(layer.id.clone()));
            }
            let id = layer.id.as_str();
            cur = match &layer.kind {
                LayerKind::Conv { in_channels, out_channels, k, stride, pad } => {
                    let Feature::Map { c, h, w } = cur else {
                        return Err(layer_err(id, "conv requires a spatial input"));
                    };
                    if *in_channels != c {
                        return Err(layer_err(
                            id,
                            format!("declared in_channels {in_channels} != incoming channels {c}"),
                        ));
                    }
                    if *k == 0 || *stride == 0 {
                        return Err(layer_err(id, "k and stride must be >= 1"));
                    }
                    if h + 2 * pad < *k || w + 2 * pad < *k {
                        return Err(layer_err(id, format!("kernel {k} exceeds padded input {h}x{w}")));
                    }
                    Feature::Map {
                        c: *out_channels,
                        h: (h + 2 * pad - k) / stride + 1,
                        w: (w + 2 * pad - k) / stride + 1,
                    }
                }
                LayerKind::ConvTranspose { in_channels, out_channels, k, stride } => {
                    let Feature::Map { c, h, w } = cur else {
                        return Err(layer_err(id, "up-conv requires a spatial input"));
                    };
                    if *in_channels != c {
                        return Err(layer_err(
                            id,
                            format!("declared in_channels {in_channels} != incoming channels {c}"),
                        ));
                    }
                    if *k == 0 || *stride == 0 {
                        return Err(layer_err(id, "k and stride must be >= 1"));
                    }
                    Feature::Map { c: *out_channels, h: (h - 1) * stride + k, w: (w - 1) * stride + k }
                }
                LayerKind::BatchNorm { channels } => {
                    let Feature::Map { c, .. } = cur else {
                        return Err(layer_err(id, "batchnorm requires a spatial input"));
                    };
                    if *channels != c {
                        return Err(layer_err(
                            id,
                            format!("declared channels {channels} != incoming channels {c}"),
                        ));
                    }
                    cur
                }
                LayerKind::Relu | LayerKind::Sigmoid => cur,
                LayerKind::MaxPool2x2 => {
                    let Feature::Map { c, h, w } = cur else {
                        return Err(layer_err(id, "maxpool requires a spatial input"));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(layer_err(id, format!("maxpool needs even extents, got {h}x{w}")));
                    }
                    Feature::Map { c, h: h / 2, w: w / 2 }
                }
                LayerKind::ConcatWith { source } => {
                    let Feature::Map { c, h, w } = cur else {
                        return Err(layer_err(id, "concat requires a spatial input"));
                    };
                    let Some(&src_idx) = seen.get(source) else {
                        return Err(layer_err(
                            id,
                            format!("concat source '{source}' is not an earlier layer"),
                        ));
                    };
                    let Feature::Map { c: sc, h: sh, w: sw } = outs[src_idx] else {
                        return Err(layer_err(id, format!("concat source '{source}' is not spatial")));
                    };
                    if sh != h || sw != w {
                        return Err(layer_err(
                            id,
                            format!("concat spatial mismatch: {h}x{w} vs source {sh}x{sw}"),
                        ));
                    }
                    Feature::Map { c: c + sc, h, w }
                }
                LayerKind::Gap => {
                    let Feature::Map { c, .. } = cur else {
                        return Err(layer_err(id, "gap requires a spatial input"));
                    };
                    Feature::Vec { c }
                }
                LayerKind::Dense { in_features, out_features } => {
                    let Feature::Vec { c } = cur else {
                        return Err(layer_err(id, "dense requires a flat feature vector (after gap)"));
                    };
                    if *in_features != c {
                        return Err(layer_err(
                            id,
                            format!("declared in_features {in_features} != incoming features {c}"),
                        ));
                    }
                    Feature::Vec { c: *out_features }
                }
                LayerKind::Softmax => {
                    let Feature::Vec { .. } = cur else {
                        return Err(layer_err(id, "softmax requires a flat feature vector"));
                    };
                    cur
                }
            };
            outs.push(cur);
        }
        Ok(outs)
    }

    /// Feature shape of the model output.
    pub fn output_shape(&self) -> Result<Feature, SpecError> {
        Ok(*self.infer_shapes()?.last().expect("non-empty checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_shape: (3, 8, 8),
            layers: vec![
                LayerSpec::new("c1", LayerKind::Conv { in_channels: 3, out_channels: 4, k: 3, stride: 1, pad: 1 }),
                LayerSpec::new("b1", LayerKind::BatchNorm { channels: 4 }),
                LayerSpec::new("r1", LayerKind::Relu),
                LayerSpec::new("p1", LayerKind::MaxPool2x2),
                LayerSpec::new("g", LayerKind::Gap),
                LayerSpec::new("d", LayerKind::Dense { in_features: 4, out_features: 5 }),
                LayerSpec::new("s", LayerKind::Softmax),
            ],
            output: "5-class distribution".into(),
        }
    }

    #[test]
    fn shapes_flow_through_the_chain() {
        let shapes = tiny_spec().infer_shapes().unwrap();
        assert_eq!(shapes[0], Feature::Map { c: 4, h: 8, w: 8 });
        assert_eq!(shapes[3], Feature::Map { c: 4, h: 4, w: 4 });
        assert_eq!(shapes[4], Feature::Vec { c: 4 });
        assert_eq!(*shapes.last().unwrap(), Feature::Vec { c: 5 });
    }

    #[test]
    fn channel_inconsistency_names_the_layer() {
        let mut spec = tiny_spec();
        spec.layers[1] = LayerSpec::new("b1", LayerKind::BatchNorm { channels: 7 });
        let err = spec.infer_shapes().unwrap_err();
        assert!(err.to_string().contains("b1"), "{err}");
    }

    #[test]
    fn forward_concat_reference_rejected() {
        let spec = ModelSpec {
            input_shape: (2, 4, 4),
            layers: vec![
                LayerSpec::new("cat", LayerKind::ConcatWith { source: "later".into() }),
                LayerSpec::new("later", LayerKind::Relu),
            ],
            output: "x".into(),
        };
        let err = spec.infer_shapes().unwrap_err();
        assert!(err.to_string().contains("not an earlier layer"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut spec = tiny_spec();
        spec.layers[2] = LayerSpec::new("c1", LayerKind::Relu);
        assert!(matches!(spec.infer_shapes(), Err(SpecError::DuplicateId(_))));
    }

    #[test]
    fn concat_adds_channels() {
        let spec = ModelSpec {
            input_shape: (2, 4, 4),
            layers: vec![
                LayerSpec::new("a", LayerKind::Conv { in_channels: 2, out_channels: 3, k: 3, stride: 1, pad: 1 }),
                LayerSpec::new("b", LayerKind::Conv { in_channels: 3, out_channels: 5, k: 3, stride: 1, pad: 1 }),
                LayerSpec::new("cat", LayerKind::ConcatWith { source: "a".into() }),
            ],
            output: "x".into(),
        };
        let shapes = spec.infer_shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), Feature::Map { c: 8, h: 4, w: 4 });
    }
}
