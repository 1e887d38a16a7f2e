use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Longest accepted word, in Unicode scalar values (BOS/EOS not counted).
pub const MAX_WORD_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub source: String,
    pub target: String,
    pub split: Split,
}

/// Parallel pairs plus optional unpaired word lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordDataset {
    pairs: Vec<Pair>,
    extra_source: Vec<String>,
    extra_target: Vec<String>,
    duplicates_dropped: usize,
}

/// The part of a dataset that training code may see.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainView {
    pairs: Vec<(String, String)>,
    extra_source: Vec<String>,
    extra_target: Vec<String>,
}

/// NFC, default case folding, then trimming of surrounding whitespace.
pub fn normalize_word(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    caseless::default_case_fold_str(&nfc).trim().to_string()
}

/// Reads a file and rejects invalid UTF-8 with the byte offset of the first bad byte.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Utf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn check_word(path: &Path, line: usize, raw: &str, too_long: &mut Vec<String>) -> Result<String> {
    let w = normalize_word(raw);
    if w.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "empty word after normalization".into(),
        });
    }
    if w.chars().count() > MAX_WORD_LEN {
        too_long.push(format!("{line}:{w}"));
    }
    Ok(w)
}

fn reject_long(path: &Path, too_long: Vec<String>) -> Result<()> {
    if too_long.is_empty() {
        return Ok(());
    }
    Err(Error::Parse {
        path: path.to_path_buf(),
        line: too_long[0].split(':').next().unwrap().parse().unwrap_or(0),
        msg: format!(
            "{} word(s) longer than {MAX_WORD_LEN} symbols: {}",
            too_long.len(),
            too_long.join(", ")
        ),
    })
}

/// One normalized word per non-comment line; duplicates removed (first kept).
pub fn load_word_list(path: &Path) -> Result<(Vec<String>, usize)> {
    let text = read_utf8(path)?;
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    let mut dups = 0;
    let mut too_long = Vec::new();
    for (line, raw) in content_lines(&text) {
        let w = check_word(path, line, raw, &mut too_long)?;
        if seen.insert(w.clone()) {
            words.push(w);
        } else {
            dups += 1;
        }
    }
    reject_long(path, too_long)?;
    Ok((words, dups))
}

fn load_pairs(path: &Path) -> Result<(Vec<Pair>, usize)> {
    let text = read_utf8(path)?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut dups = 0;
    let mut too_long = Vec::new();
    for (line, raw) in content_lines(&text) {
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected exactly one TAB, found {}: {raw:?}", fields.len() - 1),
            });
        }
        let source = check_word(path, line, fields[0], &mut too_long)?;
        let target = check_word(path, line, fields[1], &mut too_long)?;
        if seen.insert((source.clone(), target.clone())) {
            pairs.push(Pair {
                source,
                target,
                split: Split::Train,
            });
        } else {
            dups += 1;
        }
    }
    reject_long(path, too_long)?;
    Ok((pairs, dups))
}

/// Loads any combination of a parallel file and two word lists.
pub fn load_dataset(
    parallel: Option<&Path>,
    source_list: Option<&Path>,
    target_list: Option<&Path>,
) -> Result<WordDataset> {
    if parallel.is_none() && source_list.is_none() && target_list.is_none() {
        return Err(Error::InvalidArgument("load_dataset needs at least one path".into()));
    }
    let mut ds = WordDataset::default();
    if let Some(p) = parallel {
        let (pairs, dups) = load_pairs(p)?;
        ds.pairs = pairs;
        ds.duplicates_dropped += dups;
    }
    if let Some(p) = source_list {
        let (words, dups) = load_word_list(p)?;
        ds.extra_source = words;
        ds.duplicates_dropped += dups;
    }
    if let Some(p) = target_list {
        let (words, dups) = load_word_list(p)?;
        ds.extra_target = words;
        ds.duplicates_dropped += dups;
    }
    Ok(ds)
}

/// Marks `holdout_count` uniformly chosen pairs as holdout; the rest become train.
pub fn split_holdout(dataset: &WordDataset, holdout_count: usize, seed: u64) -> Result<WordDataset> {
    let n = dataset.pairs.len();
    if holdout_count >= n {
        return Err(Error::InvalidArgument(format!(
            "holdout count {holdout_count} must be smaller than the number of pairs ({n})"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let chosen: HashSet<usize> = sample(&mut rng, n, holdout_count).into_iter().collect();
    let mut out = dataset.clone();
    for (i, p) in out.pairs.iter_mut().enumerate() {
        p.split = if chosen.contains(&i) {
            Split::Holdout
        } else {
            Split::Train
        };
    }
    Ok(out)
}

impl WordDataset {
    /// In-memory dataset; words are normalized and exact duplicate pairs dropped.
    pub fn from_parts<S: AsRef<str>>(pairs: &[(S, S)], extra_source: &[S], extra_target: &[S]) -> Result<Self> {
        let norm = |w: &S| -> Result<String> {
            let n = normalize_word(w.as_ref());
            if n.is_empty() {
                return Err(Error::InvalidArgument("empty word after normalization".into()));
            }
            if n.chars().count() > MAX_WORD_LEN {
                return Err(Error::InvalidArgument(format!(
                    "word '{n}' longer than {MAX_WORD_LEN} symbols"
                )));
            }
            Ok(n)
        };
        let mut ds = WordDataset::default();
        let mut seen = HashSet::new();
        for (s, t) in pairs {
            let (s, t) = (norm(s)?, norm(t)?);
            if seen.insert((s.clone(), t.clone())) {
                ds.pairs.push(Pair {
                    source: s,
                    target: t,
                    split: Split::Train,
                });
            } else {
                ds.duplicates_dropped += 1;
            }
        }
        ds.extra_source = extra_source.iter().map(norm).collect::<Result<_>>()?;
        ds.extra_target = extra_target.iter().map(norm).collect::<Result<_>>()?;
        Ok(ds)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn extra_source(&self) -> &[String] {
        &self.extra_source
    }

    pub fn extra_target(&self) -> &[String] {
        &self.extra_target
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn is_parallel(&self) -> bool {
        !self.pairs.is_empty()
    }

    pub fn holdout_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| p.split == Split::Holdout)
    }

    pub fn train_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| p.split == Split::Train)
    }

    /// Everything except holdout pairs.
    pub fn train_view(&self) -> TrainView {
        TrainView {
            pairs: self
                .train_pairs()
                .map(|p| (p.source.clone(), p.target.clone()))
                .collect(),
            extra_source: self.extra_source.clone(),
            extra_target: self.extra_target.clone(),
        }
    }

    /// Tab-separated `source<TAB>target` lines for the pairs with `split`.
    pub fn pairs_tsv(&self, split: Split) -> String {
        let mut out = String::new();
        for p in self.pairs.iter().filter(|p| p.split == split) {
            out.push_str(&p.source);
            out.push('\t');
            out.push_str(&p.target);
            out.push('\n');
        }
        out
    }
}

fn unique(words: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    words.filter(|w| seen.insert(w.clone())).collect()
}

impl TrainView {
    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Distinct source-side words: paired sources first, then the unpaired list.
    pub fn source_words(&self) -> Vec<String> {
        unique(
            self.pairs
                .iter()
                .map(|p| p.0.clone())
                .chain(self.extra_source.iter().cloned()),
        )
    }

    /// Distinct target-side words: paired targets first, then the unpaired list.
    pub fn target_words(&self) -> Vec<String> {
        unique(
            self.pairs
                .iter()
                .map(|p| p.1.clone())
                .chain(self.extra_target.iter().cloned()),
        )
    }
}
