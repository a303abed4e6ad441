//! Caption tokenization, the bi-LSTM language encoder, and color-word editing.

pub mod encoder;
pub mod lexicon;
pub mod vocab;

pub use encoder::{CaptionEncoder, LanguageCode};
pub use lexicon::{swap_color_word, ColorLexicon, ColorWord, Swapped};
pub use vocab::{build_vocab, tokenize, TokenSequence, Vocab};
