//! Synthetic trilingual corpora and plain-text parallel data.
//!
//! The generator draws latent integer sentences and renders each into three
//! languages X (source), Z (pivot) and Y (target) through a per-language word
//! bijection, periodic function-word insertion and, for X only, a local block
//! reordering. Latent sentences are assigned to splits without repetition, so
//! the pivot sentences of the X-Z and Z-Y training corpora never overlap.

mod generator;
mod io;

pub use generator::{
    generate_trilingual, GeneratorConfig, Grammar, Lang, Language, LinePairs, TrilingualSplit, FUNCTION_PERIOD,
};
pub use io::{
    build_vocab, encode_parallel, load_parallel, read_lines, read_manifest, sha256_file, tokenize_line, write_lines,
    write_split, FileRecord, ParallelCorpus, SplitManifest, SplitPaths, VocabPolicy, DEFAULT_MAX_VOCAB, MANIFEST_FILE,
};
