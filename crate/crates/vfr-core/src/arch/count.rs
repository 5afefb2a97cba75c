//! Parameter and multiply-accumulate accounting over model specs.

use super::{Feature, LayerKind, ModelSpec, SpecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: u64,
    pub non_trainable: u64,
}

/// Per-forward-pass complexity at batch 1.
///
/// `macs` counts conv/up-conv/dense multiply-accumulates. `flops_2x` is
/// the conventional 2x-MAC figure. Reductions with no multiplies (GAP)
/// are reported separately in `extra_adds`.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub macs: u64,
    pub flops_2x: u64,
    pub extra_adds: u64,
    pub per_layer: Vec<(String, u64)>,
}

/// Trainable/non-trainable scalar counts.
///
/// Convention: conv k*k*Cin*Cout + Cout, dense Cin*Cout + Cout, batch norm
/// 2C trainable (gamma, beta) plus 2C non-trainable (running stats); GAP,
/// pools, and activations contribute nothing.
pub fn count_parameters(spec: &ModelSpec) -> Result<ParamCount, SpecError> {
    spec.infer_shapes()?;
    let mut trainable = 0u64;
    let mut non_trainable = 0u64;
    for layer in &spec.layers {
        match &layer.kind {
            LayerKind::Conv { in_channels, out_channels, k, .. }
            | LayerKind::ConvTranspose { in_channels, out_channels, k, .. } => {
                trainable += (k * k * in_channels * out_channels + out_channels) as u64;
            }
            LayerKind::BatchNorm { channels } => {
                trainable += 2 * *channels as u64;
                non_trainable += 2 * *channels as u64;
            }
            LayerKind::Dense { in_features, out_features } => {
                trainable += (in_features * out_features + out_features) as u64;
            }
            _ => {}
        }
    }
    Ok(ParamCount { trainable, non_trainable })
}

/// Multiply-accumulate counts for one forward pass at batch 1, with a
/// per-layer breakdown.
pub fn count_flops(spec: &ModelSpec) -> Result<FlopsReport, SpecError> {
    let shapes = spec.infer_shapes()?;
    let mut macs = 0u64;
    let mut extra_adds = 0u64;
    let mut per_layer = Vec::new();
    let mut prev = Feature::Map {
        c: spec.input_shape.0,
        h: spec.input_shape.1,
        w: spec.input_shape.2,
    };
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        let layer_macs = match (&layer.kind, out, prev) {
            (LayerKind::Conv { in_channels, out_channels, k, .. }, Feature::Map { h, w, .. }, _) => {
                (h * w * out_channels * k * k * in_channels) as u64
            }
            (
                LayerKind::ConvTranspose { in_channels, out_channels, k, .. },
                _,
                Feature::Map { h, w, .. },
            ) => (h * w * in_channels * out_channels * k * k) as u64,
            (LayerKind::Dense { in_features, out_features }, _, _) => {
                (in_features * out_features) as u64
            }
            (LayerKind::Gap, _, Feature::Map { c, h, w }) => {
                extra_adds += (c * h * w) as u64;
                0
            }
            _ => 0,
        };
        macs += layer_macs;
        per_layer.push((layer.id.clone(), layer_macs));
        prev = *out;
    }
    Ok(FlopsReport { macs, flops_2x: 2 * macs, extra_adds, per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;

    #[test]
    fn conv_3_to_16_k3_has_448_trainable() {
        let spec = ModelSpec {
            input_shape: (3, 8, 8),
            layers: vec![LayerSpec::new(
                "c",
                LayerKind::Conv { in_channels: 3, out_channels: 16, k: 3, stride: 1, pad: 1 },
            )],
            output: "features".into(),
        };
        let count = count_parameters(&spec).unwrap();
        assert_eq!(count.trainable, 448); // 3*3*3*16 + 16
        assert_eq!(count.non_trainable, 0);
    }

    #[test]
    fn batchnorm_counts_2c_trainable_2c_frozen() {
        let spec = ModelSpec {
            input_shape: (8, 4, 4),
            layers: vec![LayerSpec::new("b", LayerKind::BatchNorm { channels: 8 })],
            output: "x".into(),
        };
        let count = count_parameters(&spec).unwrap();
        assert_eq!(count.trainable, 16);
        assert_eq!(count.non_trainable, 16);
    }

    #[test]
    fn dense_parameter_closed_form() {
        let spec = ModelSpec {
            input_shape: (4, 2, 2),
            layers: vec![
                LayerSpec::new("g", LayerKind::Gap),
                LayerSpec::new("d", LayerKind::Dense { in_features: 4, out_features: 9 }),
            ],
            output: "x".into(),
        };
        assert_eq!(count_parameters(&spec).unwrap().trainable, 4 * 9 + 9);
    }

    #[test]
    fn conv_macs_on_224_canvas() {
        let spec = ModelSpec {
            input_shape: (3, 224, 224),
            layers: vec![LayerSpec::new(
                "c",
                LayerKind::Conv { in_channels: 3, out_channels: 16, k: 3, stride: 1, pad: 1 },
            )],
            output: "x".into(),
        };
        let report = count_flops(&spec).unwrap();
        assert_eq!(report.macs, 21_676_032); // 224*224*16*9*3
        assert_eq!(report.flops_2x, 2 * 21_676_032);
    }

    #[test]
    fn dense_256_to_60_is_15360_macs() {
        let spec = ModelSpec {
            input_shape: (256, 2, 2),
            layers: vec![
                LayerSpec::new("g", LayerKind::Gap),
                LayerSpec::new("d", LayerKind::Dense { in_features: 256, out_features: 60 }),
            ],
            output: "x".into(),
        };
        let report = count_flops(&spec).unwrap();
        assert_eq!(report.macs, 15_360);
    }

    #[test]
    fn gap_contributes_zero_macs_and_reports_adds() {
        let spec = ModelSpec {
            input_shape: (8, 6, 6),
            layers: vec![LayerSpec::new("g", LayerKind::Gap)],
            output: "x".into(),
        };
        let report = count_flops(&spec).unwrap();
        assert_eq!(report.macs, 0);
        assert_eq!(report.extra_adds, 8 * 36);
        assert_eq!(report.per_layer, vec![("g".to_string(), 0)]);
    }
}
