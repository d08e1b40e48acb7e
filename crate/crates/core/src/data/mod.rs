//! Corpus construction: SQuAD ingestion, grouped splits, vocabulary and batching.

pub mod batch;
pub mod corpus;
pub mod squad;
pub mod text;
pub mod vocab;

pub use batch::{encode_pairs, make_batches, Batch, QaPair, TokenBatch};
pub use corpus::{read_jsonl, split_corpus, write_jsonl, CorpusRecord, Splits};
pub use squad::{ingest_squad, IngestOutput};
pub use text::{detokenize, tokenize, SplitterConfig};
pub use vocab::Vocabulary;
