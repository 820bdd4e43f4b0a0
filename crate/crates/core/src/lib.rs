//! TriQDef: shared-weight multi-bit quantization-aware training hardened
//! against transferable adversarial patches.
//!
//! The crate is a self-contained desk-scale laboratory: a reverse-mode
//! autodiff tape with second-order support, symmetric fake quantization with
//! a clipped straight-through estimator, differentiable perceptual metrics
//! (Sobel edges, soft binarization, SoftDice, SoftHOG), the FDP/GPDP
//! disalignment losses built on them, patch crafting and transfer
//! evaluation, a bit-width activation curriculum, and a training harness.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod patch_io;
pub mod perceptual;
pub mod quant;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attacks::{AttackConfig, Classifier, PatchFamily, PatchSpec, VariantModel};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DatasetChoice, DefenseMode, PoolEntry, RunConfig};
pub use curriculum::{CurriculumSchedule, EnsembleMode, EnsembleState, ScheduleMode};
pub use data::Dataset;
pub use error::{Result, TriqError};
pub use eval::{
    accuracy_of, alignment_report, evaluate_clean, transfer_matrix, AlignmentReport,
    CleanAccuracy, SimilarityCell, TransferCell, TransferReport,
};
pub use losses::{LayerTapSet, LossWeights, VariantGrad, VariantTaps};
pub use models::{Architecture, BoundParams, ModelDef, ParamSet, VariantSpecs};
pub use quant::QuantSpec;
pub use tape::{Gradients, NodeId, Op, Tape};
pub use tensor::Tensor;
pub use train::{craft_pool, StepMetrics, Trainer};
