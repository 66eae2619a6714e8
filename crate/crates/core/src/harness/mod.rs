//! Desk-scale end-to-end harness: synthetic paired scenes, a frozen patch
//! encoder, fusion, a trainable projection and an adapter-tuned decoder,
//! trained with degradation-aware augmentation and scored over 13
//! robustness conditions.

pub mod checkpoint;
mod dataset;
mod decoder;
mod encoder;
mod eval;
mod model;
mod scene;
mod train;
pub mod vocab;

pub use dataset::{Dataset, Sample};
pub use decoder::{Decoder, DecoderCache};
pub use encoder::PatchEncoder;
pub use eval::{
    default_threads, evaluate, run_ablation, Answerer, Condition, ConditionReport, ConditionRow, ConstantAnswerer,
    OracleAnswerer,
};
pub use model::{Encoded, ForwardCache, FusionMode, ModelConfig, ToyModel};
pub use scene::{gen_scene, questions_for, Cell, Modality, QaSample, SceneConfig, SyntheticScene};
pub use train::{encode_ir_cache, train, StepRecord, TrainConfig, TrainTrace};
pub use vocab::Vocab;
