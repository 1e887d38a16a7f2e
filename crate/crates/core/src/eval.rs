//! Vocabulary metrics, word-shape statistics, root-consistency probes and
//! rating summaries for generated words.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeStats {
    pub count: usize,
    pub mean_len: f64,
    /// `None` for an empty list.
    pub median_len: Option<f64>,
    /// `None` when no vowel set applies to the script.
    pub vowel_ratio: Option<f64>,
    /// Entries that repeat an earlier entry.
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unique unseen words found in the reference vocabulary.
    pub ewns: usize,
    /// Unique unseen words absent from the reference vocabulary.
    pub pnw: usize,
    /// `ewns + pnw`.
    pub tuw: usize,
    pub generated_total: usize,
    pub unique_generated: usize,
    pub seen_in_training: usize,
    pub ewns_words: Vec<String>,
    pub pnw_words: Vec<String>,
    pub seen_words: Vec<String>,
    pub repeated_words: Vec<String>,
    pub shape: ShapeStats,
    pub provenance: Provenance,
}

/// Counts generated words against the training targets and a reference vocabulary.
/// All inputs are expected to be normalized the same way.
pub fn compute_vocab_metrics(generated: &[String], training_targets: &HashSet<String>, reference: &HashSet<String>) -> EvalReport {
    let unique: BTreeSet<&str> = generated.iter().map(String::as_str).collect();
    let mut report = EvalReport {
        generated_total: generated.len(),
        unique_generated: unique.len(),
        ..EvalReport::default()
    };
    for w in unique {
        let list = if training_targets.contains(w) {
            &mut report.seen_words
        } else if reference.contains(w) {
            &mut report.ewns_words
        } else {
            &mut report.pnw_words
        };
        list.push(w.to_string());
    }
    report.seen_in_training = report.seen_words.len();
    report.ewns = report.ewns_words.len();
    report.pnw = report.pnw_words.len();
    report.tuw = report.ewns + report.pnw;
    report.repeated_words = repeated(generated);
    report
}

fn repeated(words: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in words {
        *counts.entry(w).or_default() += 1;
    }
    counts.into_iter().filter(|&(_, c)| c > 1).map(|(w, _)| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VowelSet(BTreeSet<char>);

impl VowelSet {
    pub fn new(chars: &str) -> Self {
        VowelSet(chars.chars().collect())
    }

    pub fn latin() -> Self {
        Self::new("aeiou")
    }

    pub fn cyrillic() -> Self {
        Self::new("аеёиоуыэюяіїє")
    }

    /// Default set for the script of the first alphabetic character, if one is configured.
    pub fn default_for(words: &[String]) -> Option<Self> {
        let c = words.iter().flat_map(|w| w.chars()).find(|c| c.is_alphabetic())?;
        match c {
            'a'..='z' | 'A'..='Z' | '\u{00C0}'..='\u{024F}' => Some(Self::latin()),
            '\u{0400}'..='\u{04FF}' => Some(Self::cyrillic()),
            _ => None,
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.0.contains(&c)
    }
}

/// Length statistics in Unicode scalars; the median of an even count is the
/// mean of the two middle lengths.
pub fn word_shape_stats(words: &[String], vowels: Option<&VowelSet>) -> ShapeStats {
    let mut lens: Vec<usize> = words.iter().map(|w| w.chars().count()).collect();
    lens.sort_unstable();
    let total: usize = lens.iter().sum();
    let n = lens.len();
    let median_len = match n {
        0 => None,
        _ if n % 2 == 1 => Some(lens[n / 2] as f64),
        _ => Some((lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0),
    };
    let vowel_ratio = vowels.map(|v| {
        let hits = words.iter().flat_map(|w| w.chars()).filter(|&c| v.contains(c)).count();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    });
    let unique: HashSet<&String> = words.iter().collect();
    ShapeStats {
        count: n,
        mean_len: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        median_len,
        vowel_ratio,
        repetitions: n - unique.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootFamily {
    pub id: String,
    pub sources: Vec<String>,
    pub proposals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootReport {
    pub score: f64,
    pub baseline: f64,
    pub gap: f64,
    pub family_scores: Vec<(String, f64)>,
    pub trials: usize,
}

/// Longest common prefix in Unicode scalars.
pub fn common_prefix(a: &str, b: &str) -> String {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).map(|(x, _)| x).collect()
}

/// Common-prefix length divided by the shorter word's length (1.0 when one is a prefix of the other).
pub fn normalized_lcp(a: &str, b: &str) -> f64 {
    let shorter = a.chars().count().min(b.chars().count());
    if shorter == 0 {
        return 1.0;
    }
    common_prefix(a, b).chars().count() as f64 / shorter as f64
}

fn mean_pairwise(words: &[String]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            sum += normalized_lcp(&words[i], &words[j]);
            n += 1;
        }
    }
    sum / n as f64
}

/// Mean intra-family prefix similarity of proposals against random background pairs.
pub fn root_consistency(families: &[RootFamily], background: &[String], trials: usize, seed: u64) -> Result<RootReport> {
    if families.is_empty() {
        return Err(Error::InvalidArgument("no root families given".into()));
    }
    let mut family_scores = Vec::with_capacity(families.len());
    for f in families {
        if f.proposals.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "root family {:?} has {} proposals, need at least 2",
                f.id,
                f.proposals.len()
            )));
        }
        family_scores.push((f.id.clone(), mean_pairwise(&f.proposals)));
    }
    if background.len() < 2 || trials == 0 {
        return Err(Error::InvalidArgument("baseline needs at least 2 background words and 1 trial".into()));
    }
    let score = family_scores.iter().map(|(_, s)| s).sum::<f64>() / family_scores.len() as f64;
    let mut r = rng::stream(seed, Stream::Probe);
    let mut sum = 0.0;
    for _ in 0..trials {
        let i = r.gen_range(0..background.len());
        let mut j = r.gen_range(0..background.len() - 1);
        if j >= i {
            j += 1;
        }
        sum += normalized_lcp(&background[i], &background[j]);
    }
    let baseline = sum / trials as f64;
    Ok(RootReport {
        score,
        baseline,
        gap: score - baseline,
        family_scores,
        trials,
    })
}

/// Families from a TSV of `family<TAB>source<TAB>proposal` lines.
pub fn parse_root_families(text: &str, path: &Path) -> Result<Vec<RootFamily>> {
    let mut map: BTreeMap<String, RootFamily> = BTreeMap::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let f = map.entry(cols[0].to_string()).or_insert_with(|| RootFamily {
            id: cols[0].to_string(),
            sources: Vec::new(),
            proposals: Vec::new(),
        });
        f.sources.push(crate::text::normalize_word(cols[1]));
        f.proposals.push(crate::text::normalize_word(cols[2]));
    }
    Ok(map.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub word: String,
    pub rating: u8,
    pub judge: String,
    pub group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    Group,
    Judge,
    Word,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub key: String,
    pub count: usize,
    pub mean: f64,
    /// Lower median for even counts.
    pub median: u8,
}

pub const MAX_RATING: u8 = 5;

#[derive(Deserialize)]
struct RawRating {
    word: String,
    rating: String,
    judge: String,
    group: String,
}

/// Parses a `word,rating,judge,group` CSV. Record indices in errors are 0-based data rows.
pub fn parse_ratings(text: &str, path: &Path) -> Result<Vec<Rating>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["word", "rating", "judge", "group"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must be word,rating,judge,group".into(),
        });
    }
    let mut out = Vec::new();
    for (idx, rec) in reader.deserialize::<RawRating>().enumerate() {
        let line = idx + 2;
        let raw = rec.map_err(|e| csv_error(path, line, e))?;
        let rating = raw
            .rating
            .trim()
            .parse::<i64>()
            .ok()
            .filter(|r| (0..=MAX_RATING as i64).contains(r))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rating record {idx} ({}:{line}): {:?} is not an integer in 0..={MAX_RATING}",
                    path.display(),
                    raw.rating
                ))
            })?;
        out.push(Rating {
            word: crate::text::normalize_word(&raw.word),
            rating: rating as u8,
            judge: raw.judge,
            group: raw.group,
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Mean and lower median per key, keys in sorted order.
pub fn summarize_ratings(ratings: &[Rating], grouping: Grouping) -> Result<Vec<RatingSummary>> {
    let mut groups: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for (i, r) in ratings.iter().enumerate() {
        if r.rating > MAX_RATING {
            return Err(Error::InvalidArgument(format!("rating record {i}: {} is outside 0..={MAX_RATING}", r.rating)));
        }
        let key = match grouping {
            Grouping::Group => r.group.as_str(),
            Grouping::Judge => r.judge.as_str(),
            Grouping::Word => r.word.as_str(),
            Grouping::All => "all",
        };
        groups.entry(key).or_default().push(r.rating);
    }
    Ok(groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_unstable();
            RatingSummary {
                key: k.to_string(),
                count: v.len(),
                mean: v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64,
                median: v[(v.len() - 1) / 2],
            }
        })
        .collect())
}

/// One row of the vocabulary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub dataset: String,
    pub ewns: usize,
    pub pnw: usize,
    pub tuw: usize,
    pub mean: Option<f64>,
    pub median: Option<u8>,
}

impl MetricsRow {
    pub fn from_report(report: &EvalReport, ratings: Option<&RatingSummary>) -> Self {
        MetricsRow {
            model: report.provenance.model_id.clone(),
            dataset: report.provenance.dataset_id.clone(),
            ewns: report.ewns,
            pnw: report.pnw,
            tuw: report.tuw,
            mean: ratings.map(|r| r.mean),
            median: ratings.map(|r| r.median),
        }
    }
}

/// Tab-separated metrics table; means are shown to one decimal.
pub fn render_metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = String::from("Model\tDataset\tEWNS\tPNW\tTUW\tMean\tMedian\n");
    for r in rows {
        let mean = r.mean.map_or("-".to_string(), |m| format!("{m:.1}"));
        let median = r.median.map_or("-".to_string(), |m| m.to_string());
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{mean}\t{median}", r.model, r.dataset, r.ewns, r.pnw, r.tuw);
    }
    out
}

/// Marks a proposal: `+` seen in training, `^` existing word never seen, `!` repeated in its column.
fn mark(word: &str, report: &EvalReport) -> String {
    let mut s = word.to_string();
    if report.seen_words.binary_search_by(|w| w.as_str().cmp(word)).is_ok() {
        s.push('+');
    } else if report.ewns_words.binary_search_by(|w| w.as_str().cmp(word)).is_ok() {
        s.push('^');
    }
    if report.repeated_words.binary_search_by(|w| w.as_str().cmp(word)).is_ok() {
        s.push('!');
    }
    s
}

/// Source words beside each model's marked proposals, one row per source word.
pub fn render_proposals_table(sources: &[String], columns: &[(String, Vec<String>, EvalReport)]) -> String {
    let mut out = String::from("# + seen in training, ^ existing word not seen in training, ! repeated in column\n");
    out.push_str("source");
    for (name, _, _) in columns {
        let _ = write!(out, "\t{name}");
    }
    out.push('\n');
    for (i, src) in sources.iter().enumerate() {
        out.push_str(src);
        for (_, words, report) in columns {
            let cell = words.get(i).map_or(String::new(), |w| mark(w, report));
            let _ = write!(out, "\t{cell}");
        }
        out.push('\n');
    }
    out
}

/// Plain-text summary of a single report.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let p = &report.provenance;
    let _ = writeln!(out, "model\t{}\ndataset\t{}\nseed\t{}", p.model_id, p.dataset_id, p.seed);
    let _ = writeln!(
        out,
        "generated\t{}\nunique\t{}\nseen_in_training\t{}\nEWNS\t{}\nPNW\t{}\nTUW\t{}",
        report.generated_total, report.unique_generated, report.seen_in_training, report.ewns, report.pnw, report.tuw
    );
    let s = &report.shape;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let _ = writeln!(
        out,
        "mean_length\t{:.3}\nmedian_length\t{}\nvowel_ratio\t{}\nrepetitions\t{}",
        s.mean_len,
        opt(s.median_len),
        opt(s.vowel_ratio),
        s.repetitions
    );
    let _ = writeln!(out, "ewns_words\t{}", report.ewns_words.join(" "));
    let _ = writeln!(out, "seen_words\t{}", report.seen_words.join(" "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn set(v: &[&str]) -> HashSet<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn vocab_metrics_example() {
        let r = compute_vocab_metrics(&s(&["cat", "dog", "dag", "dog"]), &set(&["cat"]), &set(&["cat", "dog"]));
        assert_eq!((r.ewns, r.pnw, r.tuw, r.seen_in_training), (1, 1, 2, 1));
        assert_eq!(r.ewns_words, s(&["dog"]));
        assert_eq!(r.pnw_words, s(&["dag"]));
        assert_eq!(r.repeated_words, s(&["dog"]));
        let e = compute_vocab_metrics(&[], &set(&[]), &set(&[]));
        assert_eq!((e.ewns, e.pnw, e.tuw, e.generated_total), (0, 0, 0, 0));
    }

    fn naive(gen: &[String], train: &[String], refv: &[String]) -> (usize, usize, usize, usize) {
        let mut uniq: Vec<&String> = Vec::new();
        for g in gen {
            if !uniq.contains(&g) {
                uniq.push(g);
            }
        }
        let unseen: Vec<&&String> = uniq.iter().filter(|w| !train.contains(w)).collect();
        let ewns = unseen.iter().filter(|w| refv.contains(w)).count();
        let seen = uniq.len() - unseen.len();
        (ewns, unseen.len() - ewns, unseen.len(), seen)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn metrics_match_naive_set_arithmetic(
            gen in prop::collection::vec("[ab]{1,3}", 0..30),
            train in prop::collection::vec("[ab]{1,3}", 0..10),
            refv in prop::collection::vec("[ab]{1,3}", 0..10),
        ) {
            let r = compute_vocab_metrics(&gen, &train.iter().cloned().collect(), &refv.iter().cloned().collect());
            prop_assert_eq!((r.ewns, r.pnw, r.tuw, r.seen_in_training), naive(&gen, &train, &refv));
            prop_assert_eq!(r.tuw, r.ewns + r.pnw);
            prop_assert_eq!(r.tuw + r.seen_in_training, r.unique_generated);
            let mut rev = gen.clone();
            rev.reverse();
            let r2 = compute_vocab_metrics(&rev, &train.iter().cloned().collect(), &refv.iter().cloned().collect());
            prop_assert_eq!(r.ewns_words, r2.ewns_words);
            prop_assert_eq!(r.pnw_words, r2.pnw_words);
        }

        #[test]
        fn lcp_score_in_unit_interval(a in "[a-c]{0,6}", b in "[a-c]{0,6}") {
            let v = normalized_lcp(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, a.starts_with(&b) || b.starts_with(&a));
        }
    }

    #[test]
    fn shape_stats_examples() {
        let st = word_shape_stats(&s(&["ab", "abcd"]), Some(&VowelSet::new("a")));
        assert_eq!(st.mean_len, 3.0);
        assert_eq!(st.median_len, Some(3.0));
        assert!((st.vowel_ratio.unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(word_shape_stats(&s(&["x"; 5]), None).repetitions, 4);
        let e = word_shape_stats(&[], None);
        assert_eq!((e.count, e.mean_len, e.median_len), (0, 0.0, None));
        assert!(VowelSet::default_for(&s(&["שלום"])).is_none());
        assert_eq!(VowelSet::default_for(&s(&["мир"])), Some(VowelSet::cyrillic()));
    }

    #[test]
    fn root_family_example() {
        assert_eq!(common_prefix("dunendarvald", "duendorva"), "du");
        assert!((normalized_lcp("dunendarvald", "duendorva") - 2.0 / 9.0).abs() < 1e-12);
        let fam = |p: &[&str]| RootFamily {
            id: "f".into(),
            sources: s(&["a", "b"]),
            proposals: s(p),
        };
        let bg = s(&["ab", "cd", "ef"]);
        let r = root_consistency(&[fam(&["abc", "abc", "abc"])], &bg, 10, 0).unwrap();
        assert_eq!(r.score, 1.0);
        assert!(root_consistency(&[fam(&["abc"])], &bg, 10, 0).is_err());
    }

    #[test]
    fn random_families_match_baseline() {
        let mut r = rng::stream(3, Stream::Probe);
        let word = |r: &mut rng::Rng| -> String { (0..6).map(|_| char::from_u32(0x4E00 + r.gen_range(0..400)).unwrap()).collect() };
        let bg: Vec<String> = (0..2000).map(|_| word(&mut r)).collect();
        let families: Vec<RootFamily> = (0..300)
            .map(|i| RootFamily {
                id: i.to_string(),
                sources: vec![],
                proposals: (0..3).map(|_| word(&mut r)).collect(),
            })
            .collect();
        let rep = root_consistency(&families, &bg, 5000, 1).unwrap();
        assert!(rep.gap.abs() < 0.01, "{rep:?}");
    }

    #[test]
    fn ratings_summary() {
        let rs = |v: &[u8]| -> Vec<Rating> {
            v.iter()
                .map(|&r| Rating {
                    word: "w".into(),
                    rating: r,
                    judge: "j".into(),
                    group: "g".into(),
                })
                .collect()
        };
        let out = summarize_ratings(&rs(&[3, 3, 4]), Grouping::Group).unwrap();
        assert_eq!(format!("{:.1}", out[0].mean), "3.3");
        assert_eq!(out[0].median, 3);
        let out = summarize_ratings(&rs(&[5, 5, 5, 5]), Grouping::All).unwrap();
        assert_eq!((out[0].mean, out[0].median), (5.0, 5));
        assert_eq!(summarize_ratings(&rs(&[1, 4]), Grouping::All).unwrap()[0].median, 1);
        assert!(summarize_ratings(&rs(&[2, 9]), Grouping::All).unwrap_err().to_string().contains("record 1"));
    }

    #[test]
    fn ratings_csv() {
        let p = Path::new("r.csv");
        let ok = parse_ratings("word,rating,judge,group\nfoo,3,j1,a\nbar,5,j2,b\n", p).unwrap();
        assert_eq!(ok.len(), 2);
        let err = parse_ratings("word,rating,judge,group\nfoo,3,j1,a\nbar,6,j2,b\n", p).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        assert!(parse_ratings("w,r\n", p).is_err());
    }

    #[test]
    fn tables_render() {
        let r = compute_vocab_metrics(&s(&["cat", "dog", "dag", "dog"]), &set(&["cat"]), &set(&["cat", "dog"]));
        let row = MetricsRow {
            model: "Seq2Seq".into(),
            dataset: "200-200".into(),
            ..MetricsRow::from_report(&r, None)
        };
        assert_eq!(
            render_metrics_table(&[row]),
            "Model\tDataset\tEWNS\tPNW\tTUW\tMean\tMedian\nSeq2Seq\t200-200\t1\t1\t2\t-\t-\n"
        );
        let t = render_proposals_table(&s(&["a", "b", "c", "d"]), &[("s2s".into(), s(&["cat", "dog", "dag", "dog"]), r)]);
        assert!(t.ends_with("a\tcat+\nb\tdog^!\nc\tdag\nd\tdog^!\n"), "{t}");
    }
}
