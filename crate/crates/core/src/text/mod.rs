//! Tokenization, vocabularies, embedding files and dataset ingestion.

pub mod cut;
pub mod embeddings;
pub mod newsqa;
pub mod squad;
pub mod stopwords;
pub mod tokenize;
pub mod vocab;

pub use cut::{best_window, cut_all, cut_context};
pub use embeddings::{load_embeddings, write_embeddings, Embeddings};
pub use newsqa::newsqa_csv_to_squad;
pub use squad::{ingest_squad, load_examples, parse_squad, Cache, IngestStats, TokenizedExample, CACHE_VERSION, MAX_CHARS};
pub use stopwords::is_stopword;
pub use tokenize::{tokenize, Token, TokenMode};
pub use vocab::{CharVocab, Vocabulary, PAD_ID, UNK_ID};
