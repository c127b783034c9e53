//! Toy text encoder: a fixed vocabulary, a token-embedding table whose only
//! trainable rows are per-task concept tokens, and the frozen bank of
//! concept-embedding snapshots consumed by routing distillation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealArray;

pub type TokenId = usize;

/// Fixed word list plus reserved concept-token slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    base_words: Vec<String>,
    concept_capacity: usize,
    d_in: usize,
}

impl Vocabulary {
    pub fn new(base_words: Vec<String>, concept_capacity: usize, d_in: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for w in &base_words {
            if !seen.insert(w.clone()) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { base_words, concept_capacity, d_in })
    }

    pub fn base_len(&self) -> usize {
        self.base_words.len()
    }

    pub fn concept_capacity(&self) -> usize {
        self.concept_capacity
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn base_id(&self, word: &str) -> Result<TokenId> {
        self.base_words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Lookup(format!("unknown word {word:?}")))
    }

    /// Token id of the τ-th concept slot.
    pub fn concept_id(&self, slot: usize) -> TokenId {
        self.base_words.len() + slot
    }

    /// Inverse of `concept_id` when `id` refers to a concept slot.
    pub fn slot_of(&self, id: TokenId) -> Option<usize> {
        (id >= self.base_words.len()).then(|| id - self.base_words.len())
    }

    pub fn word(&self, id: TokenId) -> String {
        if id < self.base_words.len() {
            self.base_words[id].clone()
        } else {
            format!("<V*{}>", id - self.base_words.len())
        }
    }

    /// Tokenize whitespace-separated words; `<V*k>` names concept slot `k`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                if let Some(rest) = w.strip_prefix("<V*").and_then(|r| r.strip_suffix('>')) {
                    let slot: usize = rest
                        .parse()
                        .map_err(|_| Error::Lookup(format!("bad concept token {w:?}")))?;
                    if slot >= self.concept_capacity {
                        return Err(Error::Lookup(format!("concept slot {slot} out of range")));
                    }
                    Ok(self.concept_id(slot))
                } else {
                    self.base_id(w)
                }
            })
            .collect()
    }
}

/// Embedding rows: frozen base rows plus one row per registered concept.
///
/// Base rows never change after construction. A concept row is trainable only
/// while its task runs; `freeze_concept` pins it for good.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenEmbeddingTable {
    base_rows: RealArray,
    concept_rows: Vec<RealArray>,
    frozen: Vec<bool>,
}

impl TokenEmbeddingTable {
    /// Fresh table with seeded Gaussian base rows.
    pub fn init<R: Rng>(vocab: &Vocabulary, rng: &mut R) -> Self {
        let base_rows = RealArray::randn(&[vocab.base_len(), vocab.d_in()], 1.0, rng);
        Self { base_rows, concept_rows: Vec::new(), frozen: Vec::new() }
    }

    pub fn base_rows(&self) -> &RealArray {
        &self.base_rows
    }

    pub fn concept_count(&self) -> usize {
        self.concept_rows.len()
    }

    pub fn concept_row(&self, slot: usize) -> &RealArray {
        &self.concept_rows[slot]
    }

    pub fn concept_row_mut(&mut self, slot: usize) -> &mut RealArray {
        assert!(!self.frozen[slot], "concept row {slot} is frozen");
        &mut self.concept_rows[slot]
    }

    pub fn is_frozen(&self, slot: usize) -> bool {
        self.frozen[slot]
    }

    /// Register a new concept token, warm-started from the class word's row
    /// plus seeded noise. Returns the new token id.
    pub fn register_concept<R: Rng>(
        &mut self,
        vocab: &Vocabulary,
        class_word: &str,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<TokenId> {
        if self.concept_rows.len() >= vocab.concept_capacity() {
            return Err(Error::Capacity(format!(
                "all {} concept slots in use",
                vocab.concept_capacity()
            )));
        }
        let base = vocab.base_id(class_word)?;
        let d = vocab.d_in();
        let mut row = RealArray::new(vec![d], self.base_rows.row(base).to_vec());
        if noise_scale != 0.0 {
            let noise = RealArray::randn(&[d], noise_scale, rng);
            for (r, n) in row.data_mut().iter_mut().zip(noise.data()) {
                *r += n;
            }
        }
        self.concept_rows.push(row);
        self.frozen.push(false);
        Ok(vocab.concept_id(self.concept_rows.len() - 1))
    }

    pub fn freeze_concept(&mut self, slot: usize) {
        self.frozen[slot] = true;
    }

    fn row_of(&self, vocab: &Vocabulary, id: TokenId) -> Result<&[f64]> {
        if id < vocab.base_len() {
            Ok(self.base_rows.row(id))
        } else {
            let slot = id - vocab.base_len();
            self.concept_rows
                .get(slot)
                .map(|r| r.data())
                .ok_or_else(|| Error::Lookup(format!("token id {id} has no embedding row")))
        }
    }

    /// Pure embedding lookup: row `i` of the output is token `i`'s row.
    pub fn encode(&self, vocab: &Vocabulary, prompt: &[TokenId]) -> Result<RealArray> {
        if prompt.is_empty() {
            return Err(Error::Domain("cannot encode an empty prompt".into()));
        }
        let d = vocab.d_in();
        let mut data = Vec::with_capacity(prompt.len() * d);
        for &id in prompt {
            data.extend_from_slice(self.row_of(vocab, id)?);
        }
        Ok(RealArray::new(vec![prompt.len(), d], data))
    }
}

/// Write-once store of per-concept embedding snapshots `C_τ`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConceptEmbeddingBank {
    entries: Vec<RealArray>,
}

impl ConceptEmbeddingBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, concept: usize) -> Result<&RealArray> {
        self.entries
            .get(concept)
            .ok_or_else(|| Error::State(format!("no bank entry for concept {concept}")))
    }

    /// Store the snapshot for the next concept in sequence. Snapshots are
    /// append-only: re-snapshotting an existing concept is an error.
    pub fn snapshot(&mut self, concept: usize, embedding: RealArray) -> Result<()> {
        if concept < self.entries.len() {
            return Err(Error::State(format!("concept {concept} already snapshotted")));
        }
        if concept != self.entries.len() {
            return Err(Error::State(format!(
                "snapshot for concept {concept} out of order (next is {})",
                self.entries.len()
            )));
        }
        self.entries.push(embedding);
        Ok(())
    }
}

/// Default base word list: structure words, shape classes, colors, fillers.
pub fn default_base_words() -> Vec<String> {
    let words = [
        "<null>", "photo", "of", "a", "the", "on", "in", "with", "and",
        "circle", "square", "triangle", "diamond", "ring", "cross", "star", "stripe",
        "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
        "white", "black", "gray", "pink", "teal", "olive", "navy", "brown",
        "small", "large", "bright", "dark", "soft", "sharp", "plain", "textured",
        "left", "right", "top", "bottom", "center", "corner", "edge", "field",
        "scene", "object", "shape", "mark", "figure", "patch", "spot", "tile",
        "one", "two", "three", "four", "grid", "band", "dot", "line",
    ];
    words.iter().map(|s| s.to_string()).collect()
}

/// Token id of the reserved null word used for unconditional prompts.
pub const NULL_WORD: &str = "<null>";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn setup() -> (Vocabulary, TokenEmbeddingTable) {
        let vocab = Vocabulary::new(default_base_words(), 8, 16).unwrap();
        let mut rng = stream(1, "embed");
        let table = TokenEmbeddingTable::init(&vocab, &mut rng);
        (vocab, table)
    }

    #[test]
    fn encode_is_pure_lookup() {
        let (vocab, table) = setup();
        let id = vocab.base_id("circle").unwrap();
        let one = table.encode(&vocab, &[id]).unwrap();
        assert_eq!(one.shape(), &[1, 16]);
        assert_eq!(one.data(), table.base_rows().row(id));

        let prompt = vocab.tokenize("photo of a circle").unwrap();
        let a = table.encode(&vocab, &prompt).unwrap();
        let b = table.encode(&vocab, &prompt).unwrap();
        assert_eq!(a, b);

        // independent index-gather oracle
        for (i, &tid) in prompt.iter().enumerate() {
            assert_eq!(a.row(i), table.base_rows().row(tid));
        }
    }

    #[test]
    fn encode_unknown_token_is_lookup_error() {
        let (vocab, table) = setup();
        let err = table.encode(&vocab, &[vocab.concept_id(3)]).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)));
    }

    #[test]
    fn register_concept_initialization() {
        let (vocab, mut table) = setup();
        let mut rng = stream(2, "concept");
        // zero noise: row equals the class word row
        let id = table.register_concept(&vocab, "circle", 0.0, &mut rng).unwrap();
        assert_eq!(id, vocab.concept_id(0));
        let circle = vocab.base_id("circle").unwrap();
        assert_eq!(table.concept_row(0).data(), table.base_rows().row(circle));

        // different seeds give different rows
        let mut r1 = stream(3, "concept");
        let mut r2 = stream(4, "concept");
        table.register_concept(&vocab, "square", 0.01, &mut r1).unwrap();
        table.register_concept(&vocab, "square", 0.01, &mut r2).unwrap();
        assert_ne!(table.concept_row(1).data(), table.concept_row(2).data());
        assert_eq!(table.concept_count(), 3);
    }

    #[test]
    fn register_concept_respects_capacity() {
        let vocab = Vocabulary::new(default_base_words(), 1, 16).unwrap();
        let mut rng = stream(5, "cap");
        let mut table = TokenEmbeddingTable::init(&vocab, &mut rng);
        table.register_concept(&vocab, "circle", 0.0, &mut rng).unwrap();
        let err = table.register_concept(&vocab, "square", 0.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn bank_is_write_once_and_ordered() {
        let (vocab, mut table) = setup();
        let mut rng = stream(6, "bank");
        table.register_concept(&vocab, "circle", 0.01, &mut rng).unwrap();
        let prompt = vocab.tokenize("photo of a <V*0> circle").unwrap();
        let c0 = table.encode(&vocab, &prompt).unwrap();

        let mut bank = ConceptEmbeddingBank::new();
        bank.snapshot(0, c0.clone()).unwrap();
        assert_eq!(bank.len(), 1);
        assert!(matches!(bank.snapshot(0, c0.clone()), Err(Error::State(_))));
        assert!(matches!(bank.snapshot(2, c0.clone()), Err(Error::State(_))));

        // freeze contract: re-encoding after freezing matches the snapshot bitwise
        table.freeze_concept(0);
        let again = table.encode(&vocab, &prompt).unwrap();
        assert_eq!(&again, bank.entry(0).unwrap());
    }

    #[test]
    fn bank_size_tracks_tasks() {
        let (vocab, mut table) = setup();
        let mut rng = stream(7, "bank10");
        let mut bank = ConceptEmbeddingBank::new();
        for t in 0..8 {
            table.register_concept(&vocab, "circle", 0.01, &mut rng).unwrap();
            let prompt = vec![vocab.concept_id(t)];
            let c = table.encode(&vocab, &prompt).unwrap();
            bank.snapshot(t, c).unwrap();
            table.freeze_concept(t);
        }
        assert_eq!(bank.len(), 8);
    }
}
