//! Binary checkpoints.
//!
//! Layout: the magic bytes `CWF1`, a little-endian `u32` header length, a
//! UTF-8 JSON header (format version, experiment config, alphabets, array
//! manifest), then every array as contiguous little-endian `f32` in manifest
//! order. Parameters are widened back to `f64` on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rnn::{CharLm, RnnTranslator};
use crate::seq2seq::Seq2SeqModel;
use crate::style::TransferModel;
use crate::tensor::Tensor;
use crate::text::Alphabet;

pub const MAGIC: &[u8; 4] = b"CWF1";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the array section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphabetEntry {
    pub role: String,
    pub alphabet: Alphabet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u64,
    pub config: ExperimentConfig,
    pub alphabets: Vec<AlphabetEntry>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub enum Model {
    Rnn(RnnTranslator),
    Seq2Seq(Seq2SeqModel),
    Style(TransferModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Rnn(_) => ModelKind::Rnn,
            Model::Seq2Seq(_) => ModelKind::Seq2seq,
            Model::Style(_) => ModelKind::Styletransfer,
        }
    }

    fn alphabets(&self) -> Vec<AlphabetEntry> {
        let entry = |role: &str, a: &Alphabet| AlphabetEntry {
            role: role.into(),
            alphabet: a.clone(),
        };
        match self {
            Model::Rnn(t) => vec![entry("source", t.source.alphabet()), entry("target", t.target.alphabet())],
            Model::Seq2Seq(m) => vec![entry("source", m.source_alphabet()), entry("target", m.target_alphabet())],
            Model::Style(m) => vec![entry("union", m.alphabet())],
        }
    }

    /// Parameter stores with the name prefix each one is saved under.
    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        match self {
            Model::Rnn(t) => vec![("source/", t.source.params()), ("target/", t.target.params())],
            Model::Seq2Seq(m) => vec![("", m.params())],
            Model::Style(m) => vec![("gen/", m.generator_params()), ("disc/", m.discriminator_params())],
        }
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        match self {
            Model::Rnn(t) => vec![("source/", t.source.params_mut()), ("target/", t.target.params_mut())],
            Model::Seq2Seq(m) => vec![("", m.params_mut())],
            Model::Style(m) => {
                let (g, d) = m.params_pair_mut();
                vec![("gen/", g), ("disc/", d)]
            }
        }
    }

    /// The model's hyperparameters copied into `config`, so the header describes the stored model.
    fn stamp(&self, config: &mut ExperimentConfig) {
        config.model = self.kind();
        match self {
            Model::Rnn(t) => config.rnn = t.target.config().clone(),
            Model::Seq2Seq(m) => config.seq2seq = m.config().clone(),
            Model::Style(m) => {
                config.style = m.config().clone();
                config.data.source_language = m.languages()[0].clone();
                config.data.target_language = m.languages()[1].clone();
            }
        }
    }
}

fn alphabet<'a>(entries: &'a [AlphabetEntry], role: &str) -> Result<&'a Alphabet> {
    entries
        .iter()
        .find(|e| e.role == role)
        .map(|e| &e.alphabet)
        .ok_or_else(|| Error::Checkpoint(format!("missing '{role}' alphabet")))
}

fn skeleton(header: &Header) -> Result<Model> {
    let c = &header.config;
    let a = &header.alphabets;
    Ok(match c.model {
        ModelKind::Rnn => {
            let source = CharLm::skeleton(alphabet(a, "source")?.clone(), c.rnn.clone());
            let target = CharLm::skeleton(alphabet(a, "target")?.clone(), c.rnn.clone());
            Model::Rnn(RnnTranslator {
                map: crate::rnn::IndicatorMap::from_models(&source, &target)?,
                source,
                target,
            })
        }
        ModelKind::Seq2seq => Model::Seq2Seq(Seq2SeqModel::skeleton(
            alphabet(a, "source")?.clone(),
            alphabet(a, "target")?.clone(),
            c.seq2seq.clone(),
        )),
        ModelKind::Styletransfer => Model::Style(TransferModel::skeleton(
            alphabet(a, "union")?.clone(),
            [c.data.source_language.clone(), c.data.target_language.clone()],
            c.style.clone(),
        )),
    })
}

/// Serializes `model` with `config` embedded.
pub fn encode_checkpoint(model: &Model, config: &ExperimentConfig) -> Result<Vec<u8>> {
    let mut config = config.clone();
    model.stamp(&mut config);
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (prefix, store) in model.stores() {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            arrays.push(ArrayEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: data.len(),
            });
            for &v in t.data() {
                data.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config,
        alphabets: model.alphabets(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Validates magic, version and manifest; returns the header and the array section.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Checkpoint(format!("truncated header: {len} bytes declared, {} present", bytes.len() - 8)))?;
    let value: serde_json::Value = serde_json::from_slice(json)?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(Error::Version {
                what: "checkpoint format",
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Checkpoint("header lacks format_version".into())),
    }
    let header: Header = serde_json::from_value(value)?;
    let data = &bytes[8 + len..];
    let mut expected = 0usize;
    for a in &header.arrays {
        if a.dtype != "f32" {
            return Err(Error::Checkpoint(format!("array '{}': unsupported dtype {}", a.name, a.dtype)));
        }
        if a.offset != expected {
            return Err(Error::Checkpoint(format!(
                "array '{}': offset {} does not follow the previous array (expected {expected})",
                a.name, a.offset
            )));
        }
        let end = a.offset + 4 * a.shape.iter().product::<usize>();
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated in array '{}': needs bytes {}..{end}, file has {}",
                a.name,
                a.offset,
                data.len()
            )));
        }
        expected = end;
    }
    if expected != data.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last array", data.len() - expected)));
    }
    Ok((header, data))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, ExperimentConfig)> {
    let (header, data) = decode_header(bytes)?;
    let mut model = skeleton(&header)?;
    let mut arrays = header.arrays.iter().peekable();
    for (prefix, store) in model.stores_mut() {
        let mut named = Vec::new();
        while let Some(a) = arrays.next_if(|a| a.name.starts_with(prefix)) {
            let values = data[a.offset..a.offset + 4 * a.shape.iter().product::<usize>()]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            named.push((a.name[prefix.len()..].to_string(), Tensor::new(&a.shape, values)?));
        }
        store.load(named)?;
    }
    if let Some(a) = arrays.next() {
        return Err(Error::Checkpoint(format!("unexpected array '{}'", a.name)));
    }
    if let Model::Rnn(t) = &mut model {
        t.map = crate::rnn::IndicatorMap::from_models(&t.source, &t.target)?;
    }
    Ok((model, header.config))
}

pub fn save_checkpoint(model: &Model, config: &ExperimentConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ExperimentConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Human-readable manifest.
pub fn describe(header: &Header) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "format_version\t{}", header.format_version);
    let _ = writeln!(out, "model\t{}", header.config.model.name());
    let _ = writeln!(out, "seed\t{}", header.config.seed);
    for a in &header.alphabets {
        let _ = writeln!(
            out,
            "alphabet\t{}\t{}\t{} symbols",
            a.role,
            a.alphabet.language_id(),
            a.alphabet.len()
        );
    }
    let mut total = 0;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        total += n;
        let _ = writeln!(out, "array\t{}\t{:?}\t{}\t{}", a.name, a.shape, a.dtype, a.offset);
    }
    let _ = writeln!(out, "parameters\t{total}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::rng::{self, Stream};
    use crate::text::build_alphabet;

    fn s2s() -> (Model, ExperimentConfig) {
        let src = build_alphabet(&["שלום", "כלב"], "he").unwrap();
        let tgt = build_alphabet(&["hello", "dog"], "en").unwrap();
        let cfg = crate::seq2seq::Seq2SeqConfig {
            emb_dim: 4,
            hidden: 6,
            ..Default::default()
        };
        let m = Seq2SeqModel::new(src, tgt, cfg, &mut rng::stream(1, Stream::Init));
        let mut m = Model::Seq2Seq(m);
        for (_, st) in m.stores_mut() {
            st.round_to_f32();
        }
        (m, ExperimentConfig::new(ModelKind::Seq2seq, DataConfig::default()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, c) = s2s();
        let bytes = encode_checkpoint(&m, &c).unwrap();
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        let again = encode_checkpoint(&back, &c).unwrap();
        assert_eq!(bytes, again);
        let (Model::Seq2Seq(a), Model::Seq2Seq(b)) = (&m, &back) else { panic!() };
        assert_eq!(a.params().tensors(), b.params().tensors());
        for w in ["שלום", "כלב", "םו"] {
            assert_eq!(a.translate_greedy(w).unwrap().0, b.translate_greedy(w).unwrap().0);
        }
    }

    #[test]
    fn truncation_names_the_array() {
        let (m, c) = s2s();
        let bytes = encode_checkpoint(&m, &c).unwrap();
        let (header, _) = decode_header(&bytes).unwrap();
        let last = header.arrays.last().unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains(&last.name), "{err}");
        assert!(decode_checkpoint(&bytes[..6]).is_err());
    }

    #[test]
    fn version_and_magic_are_checked() {
        let (m, c) = s2s();
        let bytes = encode_checkpoint(&m, &c).unwrap();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap().replacen("\"format_version\":1", "\"format_version\":7", 1);
        let mut bad = bytes[..4].to_vec();
        bad.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bad.extend_from_slice(header.as_bytes());
        bad.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 7, .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).unwrap_err().to_string().contains("magic"));
    }
}
