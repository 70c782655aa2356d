//! Tokenization, corpus readers and batching.

pub mod batching;
pub mod dataset;
pub mod tokenizer;

pub use batching::{
    length_bucket_batches, lm_sequences, padding_fraction, random_batches, summarization_sequence, Batch,
    TrainSequence, IGNORE_INDEX,
};
pub use dataset::{
    openwebtext_split, read_jsonl, read_raw, split_documents, tokenize_pairs, truncate, SummarizationExample,
    TokenSequence,
};
pub use tokenizer::{byte_vocabulary_files, Tokenizer, END_OF_TEXT};
