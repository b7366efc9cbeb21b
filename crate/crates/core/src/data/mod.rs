//! Feature sequences, sampling, on-disk formats, and the synthetic paired
//! feature generator.

mod dataset;
mod sequence;
mod synth;
mod tensor_file;

pub use dataset::{load_dataset, save_dataset, split_train_test, Dataset, PairRecord, MANIFEST_NAME};
pub use sequence::{fd_sample, gs_sample, temporal_mean, temporal_mean_of, FeatureSequence, Sampling};
pub use synth::{generate_synthetic, SynthConfig};
pub use tensor_file::{decode_tensor, encode_tensor, load_tensor, save_tensor, MAGIC};
