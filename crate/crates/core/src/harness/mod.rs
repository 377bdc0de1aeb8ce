//! Desk-scale training: ListOps data, AdamW, schedule, loop and evaluation.

pub mod listops;
pub mod optim;
pub mod train;

pub use listops::{listops_generate, load_lra_tsv, GeneratorSpec, ListOpsSample};
pub use optim::{clip_grad_norm, cosine_warmup, AdamW, AdamWConfig};
pub use train::{evaluate, train, DataSpec, EvalReport, Predictor, Splits, TrainConfig};
