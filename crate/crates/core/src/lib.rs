//! A small, self-contained engine for training and explaining convolutional
//! networks with dilated convolutions, written against no external numerics.

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
pub mod fsio;
pub mod metrics;
pub mod model_io;
pub mod resnet;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod xai;

pub use autodiff::{gradient_check, GradientReport, Tape, ValueId};
pub use conv::{
    conv2d, conv2d_grad, layer_geometry, receptive_field_of_network, spread_kernel, ConvSpec,
    LayerGeometry,
};
pub use data::{
    class_region, decode_image, decode_pgm, decode_ppm, encode_image, generate_synthetic,
    load_dataset, load_image, load_manifest, parse_manifest, reduce_labels, resize_bilinear,
    save_image, save_manifest, split, synthesize, to_tensor, Image, Manifest, ManifestEntry,
    SyntheticSpec, CLASS_COUNT, CLASS_NAMES,
};
pub use error::{Error, Result};
pub use fsio::write_atomic;
pub use model_io::{decode_model, encode_model, load_model, save_model};
pub use resnet::{
    audit, build, ArchSpec, AuditReport, BlockKind, BlockSpec, ForwardTrace, Mode, Network,
    Shortcut, StemSpec, Variant,
};
pub use tensor::{
    batch_norm_infer, batch_norm_train, channel_stats, BatchNormState, Dtype, Scalar, Tensor,
};
pub use metrics::{argmax_row, confusion, report, ClassMetrics, ClassReport, ConfusionMatrix};
pub use train::{evaluate, scce_loss, sgd_step, softmax, train, Dataset, EpochStats, History, TrainConfig};
pub use xai::{
    activation_map, gradcam, gradcam_core, generate_rise_masks, lime, lime_fit,
    lime_with_scorer, overlay_ppm, rise, rise_accumulate, rise_with_scorer, to_pgm,
    upsample_shifted, LimeConfig, LimeExplanation, RiseConfig, SaliencyMap,
};
