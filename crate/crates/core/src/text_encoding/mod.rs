//! Frozen per-token text embeddings and the trainable text adapter.
//!
//! The toy encoder tokenizes on whitespace and looks each token up in a fixed
//! seeded table of [`HASH_ROWS`] rows, adding a refinement row for words of
//! the synthetic corpus vocabulary so that synonyms share a direction.
//! Precomputed embeddings from any other encoder can be imported instead.

mod adapter;
mod embeddings_io;

pub use adapter::{AdapterConfig, TextAdapter, TextBatch, TextConditioning};
pub use embeddings_io::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION,
};

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::normal_init;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const HASH_ROWS: usize = 8192;
pub const TOY_WIDTH: usize = 64;
const TOY_SEED: u64 = 0x6d6f_6c69_6e67_6f21;

/// Word groups of the synthetic vocabulary that share a refinement direction.
pub const SYNONYM_GROUPS: &[&[&str]] = &[
    &["person", "someone", "man", "woman"],
    &["walk", "walks", "walking", "strolls"],
    &["slowly", "slow", "leisurely"],
    &["quickly", "fast", "hurries"],
    &["forward", "ahead", "straight"],
    &["circle", "circles", "around"],
    &["clockwise"],
    &["counterclockwise"],
    &["turning", "while"],
    &["raise", "raises", "lifts", "holds"],
    &["arm", "arms"],
    &["side", "sideways", "out"],
    &["both"],
    &["squat", "squats", "bends", "knees"],
    &["deeply", "deep", "all", "way"],
    &["slightly", "shallow", "little"],
    &["wave", "waves", "greets"],
    &["hand", "head", "above"],
    &["jump", "jumps", "leaps", "hops"],
    &["high", "big"],
    &["low", "small", "lightly"],
    &["left"],
    &["right"],
];

/// Per-token embeddings of one prompt (`k x E`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings<T> {
    pub tokens: Matrix<T>,
    /// Set for the empty (null) prompt, which maps to a single reserved row.
    pub null: bool,
}

impl<T: Scalar> TokenEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Mean of the token rows.
    pub fn pooled(&self) -> Vec<T> {
        let k = T::lit(self.tokens.rows().max(1) as f64);
        (0..self.tokens.cols())
            .map(|c| (0..self.tokens.rows()).map(|r| self.tokens.get(r, c)).sum::<T>() / k)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> TokenEmbeddings<U> {
        TokenEmbeddings { tokens: self.tokens.cast(), null: self.null }
    }
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic hashed token embedder.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    table: Matrix<f64>,
    refinement: HashMap<String, Vec<f64>>,
    null_row: Vec<f64>,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self::new(TOY_WIDTH, TOY_SEED)
    }
}

impl ToyTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (width as f64).sqrt();
        let table = normal_init(HASH_ROWS, width, std, &mut rng);
        let null_row = normal_init::<f64>(1, width, std, &mut rng).into_data();
        let mut refinement = HashMap::new();
        for group in SYNONYM_GROUPS {
            let dir = normal_init::<f64>(1, width, std, &mut rng).into_data();
            for word in *group {
                refinement.insert(word.to_string(), dir.clone());
            }
        }
        Self { table, refinement, null_row }
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn token_row(&self, token: &str) -> Vec<f64> {
        let row = (fnv1a(token.as_bytes()) % HASH_ROWS as u64) as usize;
        let mut v = self.table.row(row).to_vec();
        if let Some(r) = self.refinement.get(token) {
            for (a, b) in v.iter_mut().zip(r) {
                *a += b;
            }
        }
        v
    }

    pub fn encode<T: Scalar>(&self, prompt: &str) -> TokenEmbeddings<T> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return TokenEmbeddings { tokens: Matrix::row_vector(&self.null_row).cast(), null: true };
        }
        let mut data = Vec::with_capacity(tokens.len() * self.width());
        for t in &tokens {
            data.extend(self.token_row(t));
        }
        let m = Matrix::from_vec(tokens.len(), self.width(), data).expect("token rows have the table width");
        TokenEmbeddings { tokens: m.cast(), null: false }
    }
}

/// Where prompt embeddings come from.
#[derive(Clone, Debug)]
pub enum TextSource {
    Toy(ToyTextEncoder),
    /// Imported per-prompt embeddings; unknown prompts fall back to the toy encoder.
    Imported { table: Arc<HashMap<String, Matrix<f32>>>, width: usize, fallback: ToyTextEncoder },
}

impl Default for TextSource {
    fn default() -> Self {
        TextSource::Toy(ToyTextEncoder::default())
    }
}

impl TextSource {
    /// Imported embeddings; the fallback toy encoder uses the same width.
    pub fn imported(table: HashMap<String, Matrix<f32>>, width: usize) -> Self {
        TextSource::Imported { table: Arc::new(table), width, fallback: ToyTextEncoder::new(width, TOY_SEED) }
    }

    pub fn width(&self) -> usize {
        match self {
            TextSource::Toy(t) => t.width(),
            TextSource::Imported { width, .. } => *width,
        }
    }

    /// Error naming both widths when a model expects a different embedding width.
    pub fn check_width(&self, expected: usize) -> Result<()> {
        if self.width() == expected {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "text embeddings are {} wide but the model expects {expected}",
                self.width()
            )))
        }
    }

    /// Embeddings of a prompt, plus whether an imported table had to fall back to the toy encoder.
    pub fn encode_flagged<T: Scalar>(&self, prompt: &str) -> (TokenEmbeddings<T>, bool) {
        match self {
            TextSource::Toy(t) => (t.encode(prompt), false),
            TextSource::Imported { table, fallback, .. } => {
                if tokenize(prompt).is_empty() {
                    return (fallback.encode(prompt), false);
                }
                match table.get(prompt) {
                    Some(m) => (TokenEmbeddings { tokens: m.cast(), null: false }, false),
                    None => {
                        log::warn!("no imported embedding for prompt {prompt:?}; using the toy encoder");
                        (fallback.encode(prompt), true)
                    }
                }
            }
        }
    }

    pub fn encode<T: Scalar>(&self, prompt: &str) -> TokenEmbeddings<T> {
        self.encode_flagged(prompt).0
    }

    /// One vector per text: the mean of its token embeddings.
    pub fn sentence_embedding<T: Scalar>(&self, text: &str) -> Vec<T> {
        self.encode::<T>(text).pooled()
    }
}
