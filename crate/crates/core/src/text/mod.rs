//! Word-level datasets: normalization, alphabets, loading, splitting, batching.

mod alphabet;
mod batch;
mod dataset;

pub use alphabet::{build_alphabet, decode_word, encode_word, Alphabet, EncodedWord, BOS, EOS, NUM_SPECIAL, PAD, UNK};
pub use batch::{batch_order, make_batches, Batch};
pub use dataset::{
    load_dataset, load_word_list, normalize_word, read_utf8, split_holdout, Pair, Split, TrainView, WordDataset,
    MAX_WORD_LEN,
};
