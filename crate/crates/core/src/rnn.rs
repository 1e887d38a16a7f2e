//! Character-level language model baseline.
//!
//! A GRU language model is trained on the target vocabulary. To "translate"
//! a source word, the mean of its character embeddings (taken from a
//! source-side model trained the same way) is matched to the nearest target
//! character embedding; that character seeds autoregressive generation.
//! Anagrams share a mean and therefore an indicator, so greedy outputs
//! collide; the baseline keeps that behavior.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nn::{argmax_allowed, zeros_state, Gru, Linear};
use crate::params::{clip_grad_norm, Bound, ParamId, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{build_alphabet, encode_word, make_batches, Alphabet, Batch, TrainView, BOS, EOS, MAX_WORD_LEN, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CharLmConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        CharLmConfig {
            emb_dim: 32,
            hidden: 128,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 300,
            max_steps: None,
            clip_norm: 5.0,
            temperature: 0.8,
            max_len: MAX_WORD_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: ParamId,
    gru: Gru,
    out: Linear,
}

/// GRU language model over one alphabet.
#[derive(Debug, Clone)]
pub struct CharLm {
    config: CharLmConfig,
    alphabet: Alphabet,
    params: ParamStore,
    layout: Layout,
}

/// Per-epoch mean per-symbol loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub word: String,
    pub ids: Vec<usize>,
    /// Generation hit the length limit before EOS.
    pub truncated: bool,
}

impl CharLm {
    pub fn new(alphabet: Alphabet, config: CharLmConfig, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let a = alphabet.len();
        let layout = Layout {
            emb: params.table("emb", a, config.emb_dim, rng),
            gru: Gru::new(&mut params, "gru", config.emb_dim, config.hidden, rng),
            out: Linear::new(&mut params, "out", config.hidden, a, rng),
        };
        CharLm {
            config,
            alphabet,
            params,
            layout,
        }
    }

    pub fn config(&self) -> &CharLmConfig {
        &self.config
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Embedding table `[alphabet, emb_dim]`.
    pub fn embeddings(&self) -> &Tensor {
        self.params.get(self.layout.emb)
    }

    /// Teacher-forced next-symbol loss over a padded batch, plus the number of scored positions.
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<(Var, usize)> {
        let l = &self.layout;
        let rows = batch.rows;
        let mut h = zeros_state(tape, rows, self.config.hidden);
        let mut states = Vec::with_capacity(batch.len);
        let mut targets = Vec::with_capacity(rows * batch.len);
        for t in 0..batch.len - 1 {
            let x = tape.embedding(p[l.emb], &batch.column(t))?;
            h = l.gru.step(tape, p, x, h)?;
            states.push(h);
            targets.extend(batch.column(t + 1));
        }
        let hs = tape.concat(&states, 0)?;
        let logits = l.out.forward(tape, p, hs)?;
        let weights: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
        let scored = weights.iter().filter(|&&w| w > 0.0).count();
        Ok((tape.cross_entropy(logits, &targets, &weights)?, scored))
    }

    /// Next-symbol distribution after feeding `prefix` (which should start with BOS).
    pub fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let mut h = zeros_state(&mut tape, 1, self.config.hidden);
        for &id in prefix {
            h = self.step(&mut tape, &p, id, h)?;
        }
        let logits = self.layout.out.forward(&mut tape, &p, h)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }

    fn step(&self, tape: &mut Tape, p: &Bound, id: usize, h: Var) -> Result<Var> {
        let x = tape.embedding(p[self.layout.emb], &[id])?;
        self.layout.gru.step(tape, p, x, h)
    }
}

fn pick(row: &[f64], alphabet: &Alphabet, mode: DecodeMode, rng: &mut Rng) -> usize {
    let allowed = |i: usize| i == EOS || alphabet.is_regular(i);
    match mode {
        DecodeMode::Greedy => argmax_allowed(row, allowed),
        DecodeMode::Sample { temperature } => {
            let best = argmax_allowed(row, allowed);
            let weights: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    if allowed(i) {
                        ((l - row[best]) / temperature).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    if u < *w {
                        return i;
                    }
                    u -= w;
                }
            }
            best
        }
    }
}

/// Generates a word that starts with `seed_symbol`.
pub fn sample_word(lm: &CharLm, seed_symbol: usize, mode: DecodeMode, rng: &mut Rng) -> Result<Generated> {
    sample_word_limited(lm, seed_symbol, mode, lm.config.max_len, rng)
}

pub fn sample_word_limited(
    lm: &CharLm,
    seed_symbol: usize,
    mode: DecodeMode,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Generated> {
    if !lm.alphabet.is_regular(seed_symbol) {
        return Err(Error::InvalidArgument(format!(
            "seed symbol {seed_symbol} is not a regular symbol"
        )));
    }
    if let DecodeMode::Sample { temperature } = mode {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
    }
    let mut tape = Tape::new();
    let p = lm.params.attach(&mut tape, false);
    let mut h = zeros_state(&mut tape, 1, lm.config.hidden);
    h = lm.step(&mut tape, &p, BOS, h)?;
    let mut ids = vec![seed_symbol];
    let mut current = seed_symbol;
    let mut truncated = true;
    while ids.len() < max_len {
        h = lm.step(&mut tape, &p, current, h)?;
        let logits = lm.layout.out.forward(&mut tape, &p, h)?;
        let next = pick(tape.value(logits).data(), &lm.alphabet, mode, rng);
        if next == EOS {
            truncated = false;
            break;
        }
        ids.push(next);
        current = next;
    }
    if ids.len() < max_len {
        truncated = false;
    }
    let word = ids.iter().map(|&i| lm.alphabet.symbol(i).unwrap()).collect();
    Ok(Generated { word, ids, truncated })
}

/// Trains a language model on `words`.
pub fn train_char_lm(words: &[String], language_id: &str, config: &CharLmConfig, seed: u64) -> Result<(CharLm, LossTrace)> {
    let distinct: std::collections::HashSet<&String> = words.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "language model training needs at least 2 distinct words".into(),
        ));
    }
    let alphabet = build_alphabet(words, language_id)?;
    let mut init = rng::stream(seed, Stream::Init);
    let lm = CharLm::new(alphabet, config.clone(), &mut init);
    fit_char_lm(lm, words, seed)
}

/// Continues training an existing model.
pub fn fit_char_lm(mut lm: CharLm, words: &[String], seed: u64) -> Result<(CharLm, LossTrace)> {
    let config = lm.config.clone();
    let encoded: Vec<Vec<usize>> = words.iter().map(|w| encode_word(w, &lm.alphabet).ids).collect();
    let mut adam = AdamState::for_store(config.adam, &lm.params);
    let mut trace = LossTrace::default();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in make_batches(&encoded, config.batch_size, true, seed, epoch as u64) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut tape = Tape::new();
            let p = lm.params.attach(&mut tape, true);
            let (loss, scored) = lm.batch_loss(&mut tape, &p, &batch)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let mut grads = tape.backward(loss)?;
            let mut g = p.gradients(&mut grads);
            drop(tape);
            clip_grad_norm(&mut g, config.clip_norm);
            adam.step_store(&mut lm.params, &g)?;
            trace.step_loss.push(value);
            sum += value * scored as f64;
            count += scored;
            step += 1;
        }
        if count > 0 {
            trace.epoch_loss.push(sum / count as f64);
        }
    }
    lm.params.round_to_f32();
    Ok((lm, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
}

/// Nearest-neighbour mapping from a source word to a seed symbol of the target alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMap {
    source_alphabet: Alphabet,
    source_embeddings: Tensor,
    target_alphabet: Alphabet,
    target_embeddings: Tensor,
    pub metric: DistanceMetric,
}

impl IndicatorMap {
    pub fn new(
        source_alphabet: Alphabet,
        source_embeddings: Tensor,
        target_alphabet: Alphabet,
        target_embeddings: Tensor,
    ) -> Result<Self> {
        let ok = source_embeddings.rank() == 2
            && target_embeddings.rank() == 2
            && source_embeddings.shape()[0] == source_alphabet.len()
            && target_embeddings.shape()[0] == target_alphabet.len()
            && source_embeddings.shape()[1] == target_embeddings.shape()[1];
        if !ok {
            return Err(Error::Shape {
                op: "indicator_map",
                lhs: source_embeddings.shape().to_vec(),
                rhs: target_embeddings.shape().to_vec(),
            });
        }
        Ok(IndicatorMap {
            source_alphabet,
            source_embeddings,
            target_alphabet,
            target_embeddings,
            metric: DistanceMetric::Euclidean,
        })
    }

    pub fn from_models(source: &CharLm, target: &CharLm) -> Result<Self> {
        Self::new(
            source.alphabet.clone(),
            source.embeddings().clone(),
            target.alphabet.clone(),
            target.embeddings().clone(),
        )
    }

    pub fn target_alphabet(&self) -> &Alphabet {
        &self.target_alphabet
    }

    /// Mean embedding of the word's known characters.
    pub fn mean_embedding(&self, source_word: &str) -> Result<Vec<f64>> {
        if source_word.is_empty() {
            return Err(Error::InvalidArgument("empty source word".into()));
        }
        let d = self.source_embeddings.shape()[1];
        let ids: Vec<usize> = encode_word(source_word, &self.source_alphabet)
            .ids
            .into_iter()
            .filter(|&i| self.source_alphabet.is_regular(i))
            .collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no indicator basis: '{source_word}' has no known source symbols"
            )));
        }
        let mut mean = vec![0.0; d];
        for &i in &ids {
            for (m, v) in mean.iter_mut().zip(self.source_embeddings.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= ids.len() as f64);
        Ok(mean)
    }

    /// Target symbol index closest to the mean source embedding; ties go to the lowest index.
    pub fn indicator(&self, source_word: &str) -> Result<usize> {
        let mean = self.mean_embedding(source_word)?;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for i in 0..self.target_alphabet.len() {
            if !self.target_alphabet.is_regular(i) {
                continue;
            }
            let d: f64 = self
                .target_embeddings
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best.ok_or_else(|| Error::InvalidArgument("target alphabet has no regular symbols".into()))
    }
}

/// Indicator symbol for `source_word`.
pub fn indicator_char(source_word: &str, map: &IndicatorMap) -> Result<usize> {
    map.indicator(source_word)
}

/// Source and target language models used together for translation.
#[derive(Debug, Clone)]
pub struct RnnTranslator {
    pub source: CharLm,
    pub target: CharLm,
    pub map: IndicatorMap,
}

/// Per-model loss traces from [`train_rnn_baseline`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RnnTraces {
    pub source: LossTrace,
    pub target: LossTrace,
}

impl RnnTranslator {
    pub fn from_models(source: CharLm, target: CharLm) -> Result<Self> {
        let map = IndicatorMap::from_models(&source, &target)?;
        Ok(RnnTranslator { source, target, map })
    }

    pub fn translate(&self, source_word: &str, mode: DecodeMode, rng: &mut Rng) -> Result<Generated> {
        translate_rnn(source_word, &self.map, &self.target, mode, rng)
    }
}

/// `sample_word(lm, indicator_char(source_word))`.
pub fn translate_rnn(source_word: &str, map: &IndicatorMap, lm: &CharLm, mode: DecodeMode, rng: &mut Rng) -> Result<Generated> {
    if map.target_alphabet != lm.alphabet {
        return Err(Error::InvalidArgument(
            "indicator map and language model use different target alphabets".into(),
        ));
    }
    let seed = indicator_char(source_word, map)?;
    sample_word(lm, seed, mode, rng)
}

/// Trains the source-side and target-side language models on the train view.
pub fn train_rnn_baseline(
    view: &TrainView,
    source_language: &str,
    target_language: &str,
    config: &CharLmConfig,
    seed: u64,
) -> Result<(RnnTranslator, RnnTraces)> {
    let (source, st) = train_char_lm(&view.source_words(), source_language, config, seed)?;
    let (target, tt) = train_char_lm(&view.target_words(), target_language, config, seed.wrapping_add(1))?;
    Ok((
        RnnTranslator::from_models(source, target)?,
        RnnTraces {
            source: st,
            target: tt,
        },
    ))
}

impl CharLm {
    /// Rebuilds a model skeleton for loading stored parameters.
    pub fn skeleton(alphabet: Alphabet, config: CharLmConfig) -> Self {
        let mut rng = rng::stream(0, Stream::Init);
        CharLm::new(alphabet, config, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CharLmConfig {
        CharLmConfig {
            emb_dim: 8,
            hidden: 16,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..CharLmConfig::default()
        }
    }

    fn toy_map() -> IndicatorMap {
        let src = build_alphabet(&["ab"], "s").unwrap();
        let tgt = build_alphabet(&["cd"], "t").unwrap();
        let mut se = Tensor::zeros(&[src.len(), 2]);
        se.data_mut()[5 * 2..5 * 2 + 2].copy_from_slice(&[2.0, 2.0]);
        let mut te = Tensor::zeros(&[tgt.len(), 2]);
        te.data_mut()[4 * 2..4 * 2 + 2].copy_from_slice(&[0.9, 1.1]);
        te.data_mut()[5 * 2..5 * 2 + 2].copy_from_slice(&[5.0, 5.0]);
        IndicatorMap::new(src, se, tgt, te).unwrap()
    }

    #[test]
    fn indicator_nearest_neighbour() {
        let map = toy_map();
        // mean of a=(0,0), b=(2,2) is (1,1): c at (0.9,1.1) is closest
        assert_eq!(indicator_char("ab", &map).unwrap(), 4);
        assert_eq!(indicator_char("ba", &map).unwrap(), 4);
        // singleton mean is the char's own embedding: b=(2,2) -> c (dist 1.49) over d (4.24)
        assert_eq!(map.mean_embedding("b").unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn indicator_errors() {
        let map = toy_map();
        assert!(indicator_char("", &map).is_err());
        let err = indicator_char("zz", &map).unwrap_err().to_string();
        assert!(err.contains("no indicator basis"), "{err}");
    }

    #[test]
    fn indicator_ties_go_to_lowest_index() {
        let src = build_alphabet(&["a"], "s").unwrap();
        let tgt = build_alphabet(&["xy"], "t").unwrap();
        let se = Tensor::zeros(&[src.len(), 1]);
        let mut te = Tensor::zeros(&[tgt.len(), 1]);
        te.data_mut()[4] = 1.0;
        te.data_mut()[5] = -1.0;
        let map = IndicatorMap::new(src, se, tgt, te).unwrap();
        assert_eq!(map.indicator("a").unwrap(), 4);
    }

    #[test]
    fn next_distribution_sums_to_one() {
        let a = build_alphabet(&["abc"], "t").unwrap();
        let mut rng = rng::stream(1, Stream::Init);
        let lm = CharLm::new(a, small(), &mut rng);
        let p = lm.next_distribution(&[BOS, 4]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_gives_constant_loss_trace() {
        let words: Vec<String> = ["abc", "bca", "cab", "aab"].iter().map(|s| s.to_string()).collect();
        let cfg = CharLmConfig {
            epochs: 5,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            batch_size: 3,
            ..small()
        };
        let (_, trace) = train_char_lm(&words, "t", &cfg, 4).unwrap();
        let first = trace.epoch_loss[0];
        assert!(trace.epoch_loss.iter().all(|l| (l - first).abs() < 1e-12), "{trace:?}");
    }

    #[test]
    fn needs_two_distinct_words() {
        let words = vec!["abc".to_string(), "abc".to_string()];
        assert!(train_char_lm(&words, "t", &small(), 0).is_err());
    }

    #[test]
    fn overfit_single_word_reproduces_it() {
        // one word repeated, plus a second word so the corpus has two distinct entries
        let mut words = vec!["abc".to_string(); 7];
        words.push("cb".to_string());
        let cfg = CharLmConfig {
            epochs: 150,
            ..small()
        };
        let (lm, _) = train_char_lm(&words, "t", &cfg, 2).unwrap();
        let a = lm.alphabet().index_of('a').unwrap();
        let mut rng = rng::stream(0, Stream::Sample);
        let g = sample_word(&lm, a, DecodeMode::Greedy, &mut rng).unwrap();
        assert_eq!(g.word, "abc");
        assert!(!g.truncated);
        // near-zero temperature collapses to greedy
        let s = sample_word(&lm, a, DecodeMode::Sample { temperature: 1e-9 }, &mut rng).unwrap();
        assert_eq!(s, g);
    }

    #[test]
    fn twenty_words_overfit_after_first_symbol() {
        // Distinct first letters, so every word is determined by its first symbol.
        let mut r = rng::stream(20, Stream::Probe);
        let letters: Vec<char> = ('a'..='t').collect();
        let words: Vec<String> = letters
            .iter()
            .map(|&c| {
                let tail: String = (0..r.gen_range(2..5)).map(|_| letters[r.gen_range(0..20)]).collect();
                format!("{c}{tail}")
            })
            .collect();
        let cfg = CharLmConfig {
            hidden: 32,
            batch_size: 20,
            epochs: 2000,
            max_steps: Some(2000),
            ..small()
        };
        let (lm, trace) = train_char_lm(&words, "t", &cfg, 5).unwrap();
        assert_eq!(trace.step_loss.len(), 2000);

        let (mut after_first, mut n) = (0.0, 0usize);
        for w in &words {
            let ids = encode_word(w, lm.alphabet()).ids;
            for t in 2..ids.len() {
                after_first -= lm.next_distribution(&ids[..t]).unwrap()[ids[t]].ln();
                n += 1;
            }
        }
        let after_first = after_first / n as f64;
        assert!(after_first < 0.1, "{after_first}");

        // The first symbol carries ln 20 nats per word, so the mean over all
        // positions is bounded below by 20·ln 20 / scored positions.
        let scored: usize = words.iter().map(|w| w.chars().count() + 1).sum();
        let bound = 20.0 * 20f64.ln() / scored as f64;
        let last = *trace.epoch_loss.last().unwrap();
        assert!(last >= bound - 1e-3 && last < bound + 0.1, "{last} vs bound {bound}");
    }

    #[test]
    fn truncation_is_flagged() {
        let a = build_alphabet(&["ab"], "t").unwrap();
        let mut rng = rng::stream(3, Stream::Init);
        let mut lm = CharLm::new(a, small(), &mut rng);
        // Force EOS to be the least likely output.
        let out_b = lm.layout.out.b;
        let pos = lm.params.ids().position(|id| id == out_b).unwrap();
        lm.params.tensors_mut()[pos].data_mut()[EOS] = -100.0;
        let g = sample_word_limited(&lm, 4, DecodeMode::Greedy, 6, &mut rng).unwrap();
        assert_eq!(g.ids.len(), 6);
        assert!(g.truncated);
        assert!(g.word.starts_with('a'));
    }
}
