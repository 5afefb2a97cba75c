//! Visual font recognition pipeline built from first principles: a dense
//! f32 tensor engine with reverse-mode gradients, declarative CNN model
//! specs (a U-Net segmenter and a GAP classifier), a deterministic
//! synthetic text-image dataset generator, evaluation metrics, and the
//! training/evaluation orchestration behind the `vfr` CLI.

pub mod arch;
pub mod rng;
pub mod models;
pub mod tensor;

pub use arch::{
    count_flops, count_parameters, load_checkpoint, save_checkpoint, CheckpointError,
    CheckpointMeta, Feature, FlopsReport, LayerKind, LayerSpec, Model, ModelSpec, ParamCount,
    SpecError,
};
pub use models::{classifier_spec, predict_font, segment_image, unet_spec, FontPrediction, ScaleProfile, SegmentationOutput};
pub use tensor::check;
pub use tensor::ops;
pub use tensor::optim::{adam_step, AdamConfig, ParamId, ParamState, ParamStore};
pub use tensor::tape::{NodeId, Tape};
pub use tensor::{Result as TensorResult, Tensor, TensorError};
