use std::collections::HashSet;
use std::path::PathBuf;

use lexiforge::checkpoint::{self, Model};
use lexiforge::config::{DataConfig, ExperimentConfig, ModelKind};
use lexiforge::eval;
use lexiforge::rng::{self, Stream};
use lexiforge::rnn::{train_rnn_baseline, CharLmConfig, DecodeMode};
use lexiforge::seq2seq::{train_seq2seq, Seq2SeqConfig};
use lexiforge::style::{train_cross_aligned, StyleConfig, StyleLabel};
use lexiforge::text::{self, WordDataset};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(lexiforge_py, LexiforgeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    LexiforgeError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(err),
    }
}

#[pyclass(name = "Alphabet")]
struct PyAlphabet(text::Alphabet);

#[pymethods]
impl PyAlphabet {
    #[staticmethod]
    fn build(words: Vec<String>, language: &str) -> PyResult<Self> {
        let words: Vec<String> = words.iter().map(|w| text::normalize_word(w)).collect();
        text::build_alphabet(&words, language).map(PyAlphabet).map_err(err)
    }

    #[getter]
    fn language(&self) -> String {
        self.0.language_id().to_string()
    }

    #[getter]
    fn symbols(&self) -> String {
        self.0.symbols().iter().collect()
    }

    fn encode(&self, word: &str) -> Vec<usize> {
        text::encode_word(word, &self.0).ids
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        text::decode_word(&ids, &self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A trained generator of any of the three kinds.
#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    config: ExperimentConfig,
}

fn experiment(kind: ModelKind, source: &str, target: &str, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(
        kind,
        DataConfig {
            source_language: source.into(),
            target_language: target.into(),
            ..DataConfig::default()
        },
    );
    c.seed = seed;
    c.holdout = 0;
    c
}

fn pairs_view(pairs: &[(String, String)]) -> PyResult<WordDataset> {
    WordDataset::from_parts(pairs, &[], &[]).map_err(err)
}

#[pymethods]
impl PyModel {
    /// Character-LM baseline on parallel pairs; `config` is a JSON object of hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (pairs, source_language, target_language, seed=0, config=None))]
    fn train_rnn(pairs: Vec<(String, String)>, source_language: &str, target_language: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: CharLmConfig = parse(config)?;
        let ds = pairs_view(&pairs)?;
        let (t, _) = train_rnn_baseline(&ds.train_view(), source_language, target_language, &cfg, seed).map_err(err)?;
        let mut c = experiment(ModelKind::Rnn, source_language, target_language, seed);
        c.rnn = cfg;
        Ok(PyModel { model: Model::Rnn(t), config: c })
    }

    #[staticmethod]
    #[pyo3(signature = (pairs, source_language, target_language, seed=0, config=None))]
    fn train_seq2seq(pairs: Vec<(String, String)>, source_language: &str, target_language: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: Seq2SeqConfig = parse(config)?;
        let ds = pairs_view(&pairs)?;
        let (m, _) = train_seq2seq(&ds.train_view(), source_language, target_language, &cfg, seed).map_err(err)?;
        let mut c = experiment(ModelKind::Seq2seq, source_language, target_language, seed);
        c.seq2seq = cfg;
        Ok(PyModel { model: Model::Seq2Seq(m), config: c })
    }

    /// Cross-aligned style transfer on two non-parallel word lists.
    #[staticmethod]
    #[pyo3(signature = (source_words, target_words, source_language, target_language, seed=0, config=None))]
    fn train_style(
        source_words: Vec<String>,
        target_words: Vec<String>,
        source_language: &str,
        target_language: &str,
        seed: u64,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let cfg: StyleConfig = parse(config)?;
        let norm = |ws: Vec<String>| -> Vec<String> { ws.iter().map(|w| text::normalize_word(w)).collect() };
        let (m, _) = train_cross_aligned(&norm(source_words), &norm(target_words), [source_language, target_language], &cfg, seed)
            .map_err(|a| err(a.source))?;
        let mut c = experiment(ModelKind::Styletransfer, source_language, target_language, seed);
        c.style = cfg;
        Ok(PyModel { model: Model::Style(m), config: c })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, config) = checkpoint::load_checkpoint(&path).map_err(err)?;
        Ok(PyModel { model, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.model, &self.config, &path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.model.kind().name()
    }

    /// Greedy proposal for one source word (`reverse` swaps the style-transfer direction).
    #[pyo3(signature = (word, reverse=false))]
    fn translate(&self, word: &str, reverse: bool) -> PyResult<String> {
        let word = text::normalize_word(word);
        match &self.model {
            Model::Rnn(t) => {
                let mut r = rng::stream(self.config.seed, Stream::Sample);
                t.translate(&word, DecodeMode::Greedy, &mut r).map(|g| g.word).map_err(err)
            }
            Model::Seq2Seq(m) => m.translate_greedy(&word).map(|(w, _)| w).map_err(err),
            Model::Style(m) => {
                let (from, to) = if reverse {
                    (StyleLabel::Y2, StyleLabel::Y1)
                } else {
                    (StyleLabel::Y1, StyleLabel::Y2)
                };
                m.transfer(&word, from, to).map_err(err)
            }
        }
    }

    fn translate_all(&self, words: Vec<String>) -> PyResult<Vec<String>> {
        words.iter().map(|w| self.translate(w, false)).collect()
    }

    fn config_json(&self) -> String {
        self.config.to_json()
    }
}

#[pyfunction]
fn normalize_word(word: &str) -> String {
    text::normalize_word(word)
}

/// EWNS / PNW / TUW counts as a dict.
#[pyfunction]
fn vocab_metrics(py: Python<'_>, generated: Vec<String>, training: Vec<String>, reference: Vec<String>) -> PyResult<Py<PyAny>> {
    let training: HashSet<String> = training.into_iter().collect();
    let reference: HashSet<String> = reference.into_iter().collect();
    let r = eval::compute_vocab_metrics(&generated, &training, &reference);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("ewns", r.ewns)?;
    d.set_item("pnw", r.pnw)?;
    d.set_item("tuw", r.tuw)?;
    d.set_item("seen_in_training", r.seen_in_training)?;
    d.set_item("generated_total", r.generated_total)?;
    d.set_item("ewns_words", r.ewns_words)?;
    d.set_item("pnw_words", r.pnw_words)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn normalized_lcp(a: &str, b: &str) -> f64 {
    eval::normalized_lcp(a, b)
}

#[pymodule]
fn lexiforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAlphabet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize_word, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_lcp, m)?)?;
    m.add("LexiforgeError", m.py().get_type::<LexiforgeError>())?;
    Ok(())
}
