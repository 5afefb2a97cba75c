//! Concrete model specs for the segmentation and classification networks
//! at "paper" scale (224x224) and CPU-friendly "desk" scale (64x64), plus
//! the inference operations composing them into an end-to-end font
//! predictor.

use serde::{Deserialize, Serialize};

use crate::arch::{LayerKind, LayerSpec, Model, ModelSpec, SpecError};
use crate::tensor::{ops, Result as TensorResult, Tensor, TensorError};

/// Scale family for both networks. `paper` matches the published budgets
/// (~7.77M segmenter, ~853K classifier); `desk` is a 1/16-parameter replica
/// for CPU experiments and tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub name: String,
    pub input_hw: (usize, usize),
    /// Image channels into the segmenter: 3 for RGB, 1 for grayscale runs.
    pub in_channels: usize,
    /// First encoder width; the ladder doubles per stage, bottleneck = 16x.
    pub unet_base: usize,
    /// Classifier stage widths (two conv blocks per stage).
    pub cls_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ScaleProfile {
    pub fn paper() -> Self {
        ScaleProfile {
            name: "paper".into(),
            input_hw: (224, 224),
            in_channels: 3,
            unet_base: 32,
            cls_widths: vec![32, 64, 128, 192],
            num_classes: 60,
        }
    }

    pub fn desk() -> Self {
        ScaleProfile {
            name: "desk".into(),
            input_hw: (64, 64),
            in_channels: 1, // placeholder; see with_input
            unet_base: 8,
            cls_widths: vec![8, 16, 32, 48],
            num_classes: 5,
        }
        .with_input(3)
    }

    pub fn with_input(mut self, channels: usize) -> Self {
        self.in_channels = channels;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_input_hw(mut self, hw: (usize, usize)) -> Self {
        self.input_hw = hw;
        self
    }

    /// Four 2x poolings require extents divisible by 16.
    pub fn validate(&self) -> Result<(), SpecError> {
        let (h, w) = self.input_hw;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(SpecError::BadInput(vec![self.in_channels, h, w]));
        }
        if self.cls_widths.len() != 4 || self.unet_base == 0 {
            return Err(SpecError::Layer {
                layer: "profile".into(),
                detail: "expected 4 classifier stage widths and a nonzero encoder base".into(),
            });
        }
        Ok(())
    }
}

fn conv(id: &str, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Conv { in_channels: cin, out_channels: cout, k: 3, stride: 1, pad: 1 })
}

fn bn(id: &str, c: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::BatchNorm { channels: c })
}

fn relu(id: &str) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Relu)
}

/// Encoder-decoder segmenter. Four encoder stages of (Conv-BN-ReLU x2,
/// MaxPool), a bottleneck pair, four decoder stages of (up-conv, concat
/// with the matching encoder's second BN output, Conv-BN-ReLU x2), and a
/// 1x1 conv + sigmoid head producing a per-pixel probability mask. All
/// 3x3 convs use pad 1 so every stage preserves its spatial extent and
/// skip concatenation needs no cropping.
pub fn unet_spec(profile: &ScaleProfile) -> Result<ModelSpec, SpecError> {
    profile.validate()?;
    let b = profile.unet_base;
    let widths = [b, b * 2, b * 4, b * 8];
    let bottleneck = b * 16;
    let mut layers = Vec::new();

    let mut cin = profile.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(conv(&format!("enc{i}_conv1"), cin, w));
        layers.push(bn(&format!("enc{i}_bn1"), w));
        layers.push(relu(&format!("enc{i}_relu1")));
        layers.push(conv(&format!("enc{i}_conv2"), w, w));
        layers.push(bn(&format!("enc{i}_bn2"), w));
        layers.push(relu(&format!("enc{i}_relu2")));
        layers.push(LayerSpec::new(format!("enc{i}_pool"), LayerKind::MaxPool2x2));
        cin = w;
    }

    layers.push(conv("mid_conv1", widths[3], bottleneck));
    layers.push(bn("mid_bn1", bottleneck));
    layers.push(relu("mid_relu1"));
    layers.push(conv("mid_conv2", bottleneck, bottleneck));
    layers.push(bn("mid_bn2", bottleneck));
    layers.push(relu("mid_relu2"));

    let mut cur = bottleneck;
    for (i, &w) in widths.iter().enumerate().rev() {
        layers.push(LayerSpec::new(
            format!("dec{i}_up"),
            LayerKind::ConvTranspose { in_channels: cur, out_channels: w, k: 2, stride: 2 },
        ));
        layers.push(LayerSpec::new(
            format!("dec{i}_cat"),
            LayerKind::ConcatWith { source: format!("enc{i}_bn2") },
        ));
        layers.push(conv(&format!("dec{i}_conv1"), w * 2, w));
        layers.push(bn(&format!("dec{i}_bn1"), w));
        layers.push(relu(&format!("dec{i}_relu1")));
        layers.push(conv(&format!("dec{i}_conv2"), w, w));
        layers.push(bn(&format!("dec{i}_bn2"), w));
        layers.push(relu(&format!("dec{i}_relu2")));
        cur = w;
    }

    layers.push(LayerSpec::new(
        "head_conv",
        LayerKind::Conv { in_channels: widths[0], out_channels: 1, k: 1, stride: 1, pad: 0 },
    ));
    layers.push(LayerSpec::new("head_sigmoid", LayerKind::Sigmoid));

    let spec = ModelSpec {
        input_shape: (profile.in_channels, profile.input_hw.0, profile.input_hw.1),
        layers,
        output: "per-pixel text probability mask".into(),
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Mask classifier: four stages of (Conv-BN-ReLU x2) with 2x2 max pooling
/// between them, global average pooling, one dense layer to the class
/// count, softmax. Input is a 1-channel binary mask.
pub fn classifier_spec(profile: &ScaleProfile, num_classes: usize) -> Result<ModelSpec, SpecError> {
    profile.validate()?;
    if num_classes < 2 {
        return Err(SpecError::Layer {
            layer: "head_dense".into(),
            detail: format!("need at least 2 classes, got {num_classes}"),
        });
    }
    let mut layers = Vec::new();
    let mut cin = 1usize;
    for (i, &w) in profile.cls_widths.iter().enumerate() {
        layers.push(conv(&format!("s{i}_conv1"), cin, w));
        layers.push(bn(&format!("s{i}_bn1"), w));
        layers.push(relu(&format!("s{i}_relu1")));
        layers.push(conv(&format!("s{i}_conv2"), w, w));
        layers.push(bn(&format!("s{i}_bn2"), w));
        layers.push(relu(&format!("s{i}_relu2")));
        layers.push(LayerSpec::new(format!("s{i}_pool"), LayerKind::MaxPool2x2));
        cin = w;
    }
    layers.push(LayerSpec::new("gap", LayerKind::Gap));
    layers.push(LayerSpec::new(
        "head_dense",
        LayerKind::Dense { in_features: cin, out_features: num_classes },
    ));
    layers.push(LayerSpec::new("head_softmax", LayerKind::Softmax));

    let spec = ModelSpec {
        input_shape: (1, profile.input_hw.0, profile.input_hw.1),
        layers,
        output: format!("{num_classes}-class font distribution"),
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Probability mask and its thresholded binary counterpart.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// Per-pixel values in [0, 1], shape (N, 1, H, W).
    pub prob_mask: Tensor,
    /// prob >= threshold as {0, 1}, same shape.
    pub binary_mask: Tensor,
}

/// Run the segmenter in inference mode and threshold the probability mask.
pub fn segment_image(model: &Model, image: &Tensor, threshold: f32) -> TensorResult<SegmentationOutput> {
    let prob_mask = model.forward_infer(image)?;
    let binary = prob_mask
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    let binary_mask = Tensor::new(prob_mask.shape().to_vec(), binary)?;
    Ok(SegmentationOutput { prob_mask, binary_mask })
}

/// Ranked classes for one image: segment, binarize, classify.
#[derive(Debug, Clone)]
pub struct FontPrediction {
    /// (class index, probability), descending probability, ties broken by
    /// ascending class index.
    pub ranked: Vec<(usize, f32)>,
    /// True when the requested k exceeded the class count and was clamped.
    pub clamped: bool,
}

/// End-to-end prediction: the segmenter's binary mask (as 0/1 floats)
/// feeds the classifier; returns the top-k classes.
pub fn predict_font(
    seg_model: &Model,
    cls_model: &Model,
    image: &Tensor,
    k: usize,
) -> TensorResult<FontPrediction> {
    let seg = segment_image(seg_model, image, 0.5)?;
    let probs = cls_model.forward_infer(&seg.binary_mask)?;
    let (n, classes) = probs.dims2("predict_font")?;
    if n != 1 {
        return Err(TensorError::InvalidArgument {
            op: "predict_font",
            detail: format!("expected a single image, got batch of {n}"),
        });
    }
    let clamped = k > classes;
    let k = k.min(classes);
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(FontPrediction { ranked, clamped })
}

/// Rank all classes for a batch of masks; used by the classifier-only
/// evaluation path.
pub fn classify_masks(cls_model: &Model, masks: &Tensor) -> TensorResult<Tensor> {
    cls_model.forward_infer(masks)
}
