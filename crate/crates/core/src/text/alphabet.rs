use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Symbol inventory of one language. Regular symbols start at index 4,
/// ordered by code point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AlphabetRepr", into = "AlphabetRepr")]
pub struct Alphabet {
    language_id: String,
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct AlphabetRepr {
    language_id: String,
    symbols: String,
}

impl From<Alphabet> for AlphabetRepr {
    fn from(a: Alphabet) -> Self {
        AlphabetRepr {
            language_id: a.language_id,
            symbols: a.symbols.into_iter().collect(),
        }
    }
}

impl TryFrom<AlphabetRepr> for Alphabet {
    type Error = Error;
    fn try_from(r: AlphabetRepr) -> Result<Self> {
        Alphabet::from_symbols(r.language_id, r.symbols.chars().collect())
    }
}

/// Index sequence `[BOS, c1..cn, EOS]` for one word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedWord {
    pub ids: Vec<usize>,
    pub word: String,
    pub unk_count: usize,
}

impl Alphabet {
    /// Builds from an explicit symbol list, which must be strictly ascending.
    pub fn from_symbols(language_id: impl Into<String>, symbols: Vec<char>) -> Result<Self> {
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "alphabet symbols must be unique and sorted by code point".into(),
            ));
        }
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIAL))
            .collect();
        Ok(Alphabet {
            language_id: language_id.into(),
            symbols,
            index,
        })
    }

    pub fn language_id(&self) -> &str {
        &self.language_id
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Total size including the special tokens.
    pub fn len(&self) -> usize {
        self.symbols.len() + NUM_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        index.checked_sub(NUM_SPECIAL).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn is_regular(&self, index: usize) -> bool {
        index >= NUM_SPECIAL && index < self.len()
    }

    /// Alphabet over the symbols of both inputs.
    pub fn union(language_id: impl Into<String>, a: &Alphabet, b: &Alphabet) -> Self {
        let mut symbols: Vec<char> = a.symbols.iter().chain(&b.symbols).copied().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Alphabet::from_symbols(language_id, symbols).expect("sorted")
    }

    /// Text export: four special-token lines, then one symbol per line.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for name in SPECIAL_NAMES {
            out.push_str(name);
            out.push('\n');
        }
        for c in &self.symbols {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn import_text(language_id: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if lines.next() != Some(*name) {
                return Err(Error::InvalidArgument(format!(
                    "alphabet header line {} must be {name}",
                    i + 1
                )));
            }
        }
        let mut symbols = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "alphabet line {line:?} is not a single symbol"
                    )))
                }
            }
        }
        Alphabet::from_symbols(language_id, symbols)
    }
}

/// Alphabet containing every scalar value that occurs in `words`.
pub fn build_alphabet<S: AsRef<str>>(words: &[S], language_id: &str) -> Result<Alphabet> {
    let mut symbols: Vec<char> = words.iter().flat_map(|w| w.as_ref().chars()).collect();
    if symbols.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot build alphabet '{language_id}' from an empty corpus"
        )));
    }
    symbols.sort_unstable();
    symbols.dedup();
    Alphabet::from_symbols(language_id, symbols)
}

/// Frames `w` with BOS/EOS; unknown characters become UNK.
pub fn encode_word(w: &str, alphabet: &Alphabet) -> EncodedWord {
    let mut ids = Vec::with_capacity(w.chars().count() + 2);
    let mut unk_count = 0;
    ids.push(BOS);
    for c in w.chars() {
        match alphabet.index_of(c) {
            Some(i) => ids.push(i),
            None => {
                unk_count += 1;
                ids.push(UNK);
            }
        }
    }
    ids.push(EOS);
    EncodedWord {
        ids,
        word: w.to_string(),
        unk_count,
    }
}

/// Inverse of [`encode_word`]: drops BOS/PAD, stops at the first EOS, renders UNK as U+FFFD.
pub fn decode_word(ids: &[usize], alphabet: &Alphabet) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        match id {
            PAD | BOS => {}
            EOS => break,
            UNK => out.push(char::REPLACEMENT_CHARACTER),
            _ => match alphabet.symbol(id) {
                Some(c) => out.push(c),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "index {id} out of range for alphabet of size {}",
                        alphabet.len()
                    )))
                }
            },
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> Alphabet {
        build_alphabet(&["ab", "ba"], "x").unwrap()
    }

    #[test]
    fn construction_rule() {
        let a = ab();
        assert_eq!(a.len(), 6);
        assert_eq!(a.index_of('a'), Some(4));
        assert_eq!(a.index_of('b'), Some(5));
    }

    #[test]
    fn hebrew_sorted_by_code_point() {
        let a = build_alphabet(&["אב"], "he").unwrap();
        assert_eq!(a.symbols(), &['א', 'ב']);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn space_is_a_regular_symbol() {
        let a = build_alphabet(&["רבע גלון"], "he").unwrap();
        assert_eq!(a.index_of(' '), Some(NUM_SPECIAL));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_alphabet::<&str>(&[], "x").is_err());
        assert!(build_alphabet(&[""], "x").is_err());
    }

    #[test]
    fn encode_examples() {
        let a = ab();
        assert_eq!(encode_word("ab", &a).ids, vec![1, 4, 5, 2]);
        assert_eq!(encode_word("", &a).ids, vec![1, 2]);
        let e = encode_word("aX", &a);
        assert_eq!(e.ids, vec![1, 4, 3, 2]);
        assert_eq!(e.unk_count, 1);
    }

    #[test]
    fn decode_examples() {
        let a = ab();
        assert_eq!(decode_word(&[1, 4, 5, 2], &a).unwrap(), "ab");
        assert_eq!(decode_word(&[1, 2], &a).unwrap(), "");
        assert_eq!(decode_word(&[1, 4, 2, 5], &a).unwrap(), "a");
        assert_eq!(decode_word(&[1, 3, 2], &a).unwrap(), "\u{FFFD}");
        assert!(decode_word(&[1, 9], &a).is_err());
    }

    #[test]
    fn text_export_round_trip() {
        let a = build_alphabet(&["zeta ab", "ξ"], "mix").unwrap();
        let text = a.export_text();
        assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\n \n"));
        assert_eq!(Alphabet::import_text("mix", &text).unwrap(), a);
        assert_eq!(Alphabet::import_text("mix", &text).unwrap().export_text(), text);
    }

    #[test]
    fn json_round_trip() {
        let a = build_alphabet(&["שלום", "hello"], "mix").unwrap();
        let s = serde_json::to_string(&a).unwrap();
        let back: Alphabet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in proptest::collection::vec("[a-zа-яא-ת\u{0621}-\u{064A} ]{1,12}", 1..8)) {
            let a = build_alphabet(&words, "p").unwrap();
            for w in &words {
                let e = encode_word(w, &a);
                prop_assert_eq!(e.unk_count, 0);
                prop_assert_eq!(&decode_word(&e.ids, &a).unwrap(), w);
            }
        }

        #[test]
        fn index_mapping_is_bijective(words in proptest::collection::vec("\\PC{1,10}", 1..6)) {
            let a = build_alphabet(&words, "p").unwrap();
            for i in NUM_SPECIAL..a.len() {
                let c = a.symbol(i).unwrap();
                prop_assert_eq!(a.index_of(c), Some(i));
            }
        }
    }
}
