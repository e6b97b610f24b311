//! Fixed closed vocabulary and token sequences.
//!
//! The synthetic world this crate attacks is small enough for one shared,
//! versioned vocabulary: four special tokens, 33 location tokens that
//! quantise box coordinates on a 32-pixel canvas losslessly, and 64 ordinary
//! words covering colors, shapes, question templates, and filler. Word
//! substitution attacks operate on ordinary words only; stop words are
//! excluded from importance ranking but remain legal substitution targets'
//! neighbours never include specials.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token identifier into the shared [`Vocabulary`].
pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const END: TokenId = 3;

/// Number of location tokens: integer pixel coordinates `0..=32` on a
/// 32-pixel canvas, so every axis-aligned integer box round-trips exactly.
pub const LOC_TOKENS: usize = 33;
const FIRST_LOC: TokenId = 4;
const FIRST_WORD: TokenId = FIRST_LOC + LOC_TOKENS;

/// The eight scene colors, in class-index order.
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
];

/// The three scene shapes.
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

/// Ordinary words. Order is part of the vocabulary fingerprint; append-only.
const WORDS: [&str; 64] = [
    // colors (8)
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    // shapes (3)
    "circle", "square", "triangle",
    // sizes (2)
    "big", "small",
    // question words (8)
    "what", "where", "which", "how", "many", "is", "are", "the",
    // articles and prepositions (10)
    "a", "an", "of", "in", "on", "at", "to", "with", "this", "that",
    // verbs (6)
    "describe", "show", "find", "see", "look", "point",
    // spatial terms (10)
    "left", "right", "top", "bottom", "center", "above", "below", "near", "inside", "outside",
    // nouns (12)
    "image", "picture", "scene", "object", "shape", "color", "size", "thing", "item", "box",
    "region", "count",
    // misc (5)
    "one", "two", "three", "there", "it",
];

/// Function words carry no scene content; importance ranking skips them.
const STOP_WORDS: [&str; 19] = [
    "what", "where", "which", "how", "is", "are", "the", "a", "an", "of", "in", "on", "at", "to",
    "with", "this", "that", "there", "it",
];

/// The shared closed vocabulary: specials, location tokens, words.
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    stop: Vec<bool>,
    fingerprint: u64,
}

impl Vocabulary {
    /// The process-wide vocabulary instance.
    pub fn shared() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    fn build() -> Vocabulary {
        let mut tokens: Vec<String> =
            vec!["<pad>".into(), "<unk>".into(), "<cls>".into(), "<end>".into()];
        for v in 0..LOC_TOKENS {
            tokens.push(format!("<loc_{v}>"));
        }
        tokens.extend(WORDS.iter().map(|w| w.to_string()));

        let mut index = HashMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            let previous = index.insert(tok.clone(), id);
            assert!(previous.is_none(), "duplicate vocabulary entry {tok}");
        }
        let stop = tokens
            .iter()
            .map(|t| STOP_WORDS.contains(&t.as_str()))
            .collect();
        let fingerprint = fnv1a(tokens.iter().map(|t| t.as_str()));
        Vocabulary {
            tokens,
            index,
            stop,
            fingerprint,
        }
    }

    /// Total number of tokens (specials + locations + words).
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Stable hash of the full token list; stored in every
    /// [`TokenSequence`] so sequences from a different vocabulary version
    /// are rejected instead of silently misread.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Specials and location tokens: never produced by the tokenizer for
    /// prose, never offered as substitution candidates.
    pub fn is_special(&self, id: TokenId) -> bool {
        id < FIRST_WORD
    }

    /// Ordinary word that carries scene content (not a function word).
    pub fn is_content_word(&self, id: TokenId) -> bool {
        id >= FIRST_WORD && !self.stop[id]
    }

    /// Ordinary (non-special) word of any kind.
    pub fn is_word(&self, id: TokenId) -> bool {
        id >= FIRST_WORD && id < self.size()
    }

    /// Location token for an integer coordinate `0..=32`.
    pub fn loc_id(&self, value: usize) -> Result<TokenId> {
        if value >= LOC_TOKENS {
            return Err(Error::Input(format!(
                "coordinate {value} outside the location token range 0..={}",
                LOC_TOKENS - 1
            )));
        }
        Ok(FIRST_LOC + value)
    }

    /// Inverse of [`Vocabulary::loc_id`].
    pub fn loc_value(&self, id: TokenId) -> Option<usize> {
        (FIRST_LOC..FIRST_WORD).contains(&id).then(|| id - FIRST_LOC)
    }

    /// All ordinary word ids, in id order.
    pub fn word_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        FIRST_WORD..self.size()
    }

    /// Lowercases, splits on whitespace, strips edge punctuation, and maps
    /// out-of-vocabulary words to `<unk>`. Errors on input with no tokens.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let word: String = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if word.is_empty() {
                continue;
            }
            ids.push(self.id_of(&word).unwrap_or(UNK));
        }
        if ids.is_empty() {
            return Err(Error::Input(format!("no tokens in input text {text:?}")));
        }
        Ok(self.sequence_from_ids(ids))
    }

    /// Builds a sequence directly from ids, validating each against this
    /// vocabulary.
    pub fn sequence(&self, ids: Vec<TokenId>) -> Result<TokenSequence> {
        for &id in &ids {
            if id >= self.size() {
                return Err(Error::Input(format!("token id {id} out of range")));
            }
        }
        Ok(self.sequence_from_ids(ids))
    }

    fn sequence_from_ids(&self, ids: Vec<TokenId>) -> TokenSequence {
        let raw_text = ids
            .iter()
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        TokenSequence {
            ids,
            raw_text,
            vocabulary_id: self.fingerprint,
        }
    }
}

fn fnv1a<'a>(items: impl Iterator<Item = &'a str>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for item in items {
        for byte in item.as_bytes().iter().chain(&[0xffu8]) {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// An immutable tokenized text tied to a vocabulary version.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    raw_text: String,
    vocabulary_id: u64,
}

impl TokenSequence {
    /// The empty sequence, for image-only tasks where no text accompanies
    /// the query. `tokenize` never produces this; constructing it is an
    /// explicit opt-in.
    pub fn empty() -> TokenSequence {
        TokenSequence {
            ids: Vec::new(),
            raw_text: String::new(),
            vocabulary_id: Vocabulary::shared().fingerprint(),
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn vocabulary_id(&self) -> u64 {
        self.vocabulary_id
    }

    /// New sequence with the word at `position` replaced by `new_id`.
    pub fn substitute(&self, position: usize, new_id: TokenId) -> Result<TokenSequence> {
        let vocab = Vocabulary::shared();
        if position >= self.ids.len() {
            return Err(Error::Input(format!(
                "substitution position {position} out of range for length {}",
                self.ids.len()
            )));
        }
        let mut ids = self.ids.clone();
        ids[position] = new_id;
        vocab.sequence(ids)
    }

    /// Positions at which two sequences differ; a length difference makes
    /// every position past the shorter end count as differing.
    pub fn diff_positions(&self, other: &TokenSequence) -> Vec<usize> {
        let longer = self.ids.len().max(other.ids.len());
        (0..longer)
            .filter(|&i| self.ids.get(i) != other.ids.get(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_has_expected_layout() {
        let v = Vocabulary::shared();
        assert_eq!(v.size(), 4 + LOC_TOKENS + WORDS.len());
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(CLS), Some("<cls>"));
        assert_eq!(v.token(END), Some("<end>"));
        assert_eq!(v.token(FIRST_LOC), Some("<loc_0>"));
        assert_eq!(v.token(FIRST_WORD), Some("red"));
    }

    #[test]
    fn location_tokens_round_trip_all_coordinates() {
        let v = Vocabulary::shared();
        for value in 0..LOC_TOKENS {
            let id = v.loc_id(value).unwrap();
            assert!(v.is_special(id));
            assert_eq!(v.loc_value(id), Some(value));
        }
        assert!(v.loc_id(LOC_TOKENS).is_err());
        assert_eq!(v.loc_value(FIRST_WORD), None);
    }

    #[test]
    fn tokenize_lowercases_strips_punctuation_and_maps_unknowns() {
        let v = Vocabulary::shared();
        let t = v.tokenize("What color IS the zebra?").unwrap();
        let expected: Vec<TokenId> = ["what", "color", "is", "the"]
            .iter()
            .map(|w| v.id_of(w).unwrap())
            .chain([UNK])
            .collect();
        assert_eq!(t.ids(), expected.as_slice());
        assert_eq!(t.raw_text(), "what color is the <unk>");
    }

    #[test]
    fn tokenize_rejects_empty_input() {
        assert!(Vocabulary::shared().tokenize("  ??  ").is_err());
    }

    #[test]
    fn content_word_classification() {
        let v = Vocabulary::shared();
        for w in ["red", "circle", "big", "color", "left", "describe"] {
            assert!(v.is_content_word(v.id_of(w).unwrap()), "{w} should be content");
        }
        for w in ["what", "is", "the", "a"] {
            assert!(!v.is_content_word(v.id_of(w).unwrap()), "{w} should be stop");
        }
        assert!(!v.is_content_word(UNK));
        assert!(!v.is_content_word(v.loc_id(3).unwrap()));
    }

    #[test]
    fn substitution_replaces_exactly_one_position() {
        let v = Vocabulary::shared();
        let t = v.tokenize("what color is the circle").unwrap();
        let green = v.id_of("green").unwrap();
        let s = t.substitute(4, green).unwrap();
        assert_eq!(s.raw_text(), "what color is the green");
        assert_eq!(t.diff_positions(&s), vec![4]);
        assert!(t.substitute(9, green).is_err());
    }

    #[test]
    fn diff_positions_counts_length_mismatch() {
        let v = Vocabulary::shared();
        let a = v.tokenize("red circle").unwrap();
        let b = v.tokenize("red circle big").unwrap();
        assert_eq!(a.diff_positions(&b), vec![2]);
        assert_eq!(a.diff_positions(&a), Vec::<usize>::new());
    }

    #[test]
    fn sequences_serialize_round_trip() {
        let v = Vocabulary::shared();
        let t = v.tokenize("where is the red square").unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: TokenSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
        assert_eq!(back.vocabulary_id(), v.fingerprint());
    }
}
