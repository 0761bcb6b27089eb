//! Network building blocks and the dual-encoder model.

pub mod fusion;
pub mod global;
pub mod layers;
pub mod local;
pub mod model;

pub use fusion::{Coupled, Fusion, FusionInputs};
pub use global::{Backbone, BackboneRegistry, ExternalBackbone, FeatureFn, GlobalEncoder, SmallCnn, SMALL_CNN};
pub use local::LocalEncoder;
pub use model::{
    local_embeddings, normalize_frames, out_to_params, pad_stack, predict_sweep, sweep_frames, variant_mask, CoupledVariant,
    DualTrack, DualTrackModel, GlobalInput, LocalInput, LocalOnly, SweepBatch, Variant, VariantRegistry,
};
