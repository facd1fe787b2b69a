//! Multi-granular phrase memory: extraction, pairing, layer partitioning,
//! encoding, and bank files.

mod bank;
mod build;
mod phrase;

pub use bank::{BankLayer, MemoryBank, PhrasePair};
pub use build::{build_memory, pair_phrases, pair_phrases_with, partition_phrases, PartitionStrategy};
pub use phrase::{extract_phrases, parse_tree, parse_trees, ExtractMode, PhraseSet, Tree};
