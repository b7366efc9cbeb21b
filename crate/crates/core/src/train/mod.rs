//! Mini-batch training with controlled batch composition, Adam, and
//! retrieval evaluation.

mod adam;
mod batches;
mod eval;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use batches::{make_batches, SamplerMode};
pub use eval::{rank_by_cosine, recall_at_k, RetrievalResult, Truth};
pub use trainer::{
    encode_corpus, evaluate, train, EpochMetrics, EvalMode, Model, SamplingMethod, Side, TrainConfig, TrainOutput,
};
