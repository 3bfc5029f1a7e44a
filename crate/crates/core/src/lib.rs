//! Multimodal masked visual sequence transformer for semantic future
//! prediction: discrete per-pixel modalities (semantic classes, depth bins)
//! are tokenized without a learned codebook, fused, processed by a
//! space-time factorized transformer, and decoded back to per-pixel labels.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod layout;
pub mod masking;
pub mod modality;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod tokenization;
pub mod training;

pub use config::{AbsRelDenominator, Fusion, MaskingStrategy, ModelConfig, OptimizerConfig, Schedule};
pub use error::{Error, Result};
pub use layout::TokenLayout;
pub use masking::{MaskSampler, MaskSet, ModalityMask};
pub use modality::{FrameSequence, LabelMap, Labels, ModalitySpec, SequenceRecord};
pub use model::Futurist;
pub use objective::LossBreakdown;
