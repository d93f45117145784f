//! Tweet preprocessing, vocabulary, batching and dataset files.

pub mod batch;
pub mod dataset;
pub mod emoji;
pub mod preprocess;
pub mod vocab;

pub use batch::{encode_batch, encoded_len, TokenBatch};
pub use dataset::{label_inconsistencies, load_tsv, split_train_dev, write_tsv, RawExample};
pub use emoji::extract_emojis;
pub use preprocess::{
    normalize_hashtags, preprocess, render_input, substitute_mentions_urls, NormalizedInput,
    Preprocessor,
};
pub use vocab::Vocabulary;
