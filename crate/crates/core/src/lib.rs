pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod eval;
pub mod meta;
pub mod params;
pub mod synthetic;
pub mod tasks;

pub use autodiff::{Tape, Tensor};
pub use corpus::{PipelineConfig, SentenceStore, TokenId, TokenTable, VocabIndex};
pub use encoder::{EncoderConfig, TextEncoder};
pub use eval::{FinetuneConfig, TargetTask};
pub use meta::{MetaModel, MetaTrainConfig, MetaTrainer};
pub use params::ParamTree;
pub use tasks::{Episode, Provenance, SamplerConfig, TaskSampler};
