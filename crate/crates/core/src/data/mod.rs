//! Synthetic speech-translation corpus, split harnesses, and batching.

mod batch;
pub mod io;
mod splits;
mod task;

pub use batch::{batch, batches, decoder_io, sorted_chunks, Batch, SeqBatch, TokenBatch};
pub use splits::{bucket_by_length, bucket_edges, bucket_index, low_resource_splits, SplitSpec};
pub use task::{
    speed_perturb, Corpus, LengthDist, TaskConfig, ToyTask, Utterance, BOS, EOS, FIRST_TOKEN, PAD,
};
