//! Subword tokenization penalties for natural words, and significance tests of
//! whether they are higher on instances a model gets wrong.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod iforest;
pub mod logprob;
pub mod penalty;
pub mod stats;
pub mod tokenizer;
