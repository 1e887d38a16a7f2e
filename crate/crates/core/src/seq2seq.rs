//! GRU encoder/decoder with additive attention, trained with teacher forcing.
//!
//! At decode step `t` the previous decoder state `s` attends over encoder
//! outputs `h_i` with `score(s, h_i) = vᵀ tanh(W_k h_i + W_q s)`, masked over
//! PAD positions. The decoder consumes `[emb(y_{t-1}); context]` and predicts
//! from `[s_t; context]`. Its initial state is `tanh(W_b h_T + b)` of the final
//! encoder state.

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nn::{argmax_allowed, zeros_state, Gru, Linear};
use crate::params::{clip_grad_norm, Bound, ParamId, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{batch_order, build_alphabet, encode_word, Alphabet, Batch, TrainView, BOS, EOS, MAX_WORD_LEN, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    /// Attention projection width; 0 means "same as hidden".
    pub attn_dim: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub max_len: usize,
    /// Abort when a batch loss exceeds this multiple of the first batch loss.
    pub divergence_factor: f64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            emb_dim: 32,
            hidden: 128,
            attn_dim: 0,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 400,
            max_steps: None,
            clip_norm: 5.0,
            max_len: MAX_WORD_LEN,
            divergence_factor: 10.0,
        }
    }
}

impl Seq2SeqConfig {
    fn attn(&self) -> usize {
        if self.attn_dim == 0 {
            self.hidden
        } else {
            self.attn_dim
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: Gru,
    attn_key: ParamId,
    attn_query: ParamId,
    attn_v: ParamId,
    bridge: Linear,
    dec: Gru,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: Seq2SeqConfig,
    source: Alphabet,
    target: Alphabet,
    params: ParamStore,
    layout: Layout,
}

/// Attention weights per decode step, each over the encoded source positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub steps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Seq2SeqTrace {
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

struct Encoded {
    outputs: Var,
    keys: Var,
    last: Var,
    keep: Vec<bool>,
}

/// Per-position teacher-forced predictions for a batch.
pub struct ForcedOutput {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Seq2SeqModel {
    pub fn new(source: Alphabet, target: Alphabet, config: Seq2SeqConfig, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let (d, h, a) = (config.emb_dim, config.hidden, config.attn());
        let layout = Layout {
            src_emb: params.table("src_emb", source.len(), d, rng),
            tgt_emb: params.table("tgt_emb", target.len(), d, rng),
            enc: Gru::new(&mut params, "enc", d, h, rng),
            attn_key: params.matrix("attn.key", h, a, rng),
            attn_query: params.matrix("attn.query", h, a, rng),
            attn_v: params.matrix("attn.v", a, 1, rng),
            bridge: Linear::new(&mut params, "bridge", h, h, rng),
            dec: Gru::new(&mut params, "dec", d + h, h, rng),
            out: Linear::new(&mut params, "out", 2 * h, target.len(), rng),
        };
        Seq2SeqModel {
            config,
            source,
            target,
            params,
            layout,
        }
    }

    /// Model with the deterministic default initialization, for loading stored parameters.
    pub fn skeleton(source: Alphabet, target: Alphabet, config: Seq2SeqConfig) -> Self {
        let mut rng = rng::stream(0, Stream::Init);
        Self::new(source, target, config, &mut rng)
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn source_alphabet(&self) -> &Alphabet {
        &self.source
    }

    pub fn target_alphabet(&self) -> &Alphabet {
        &self.target
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, src: &Batch) -> Result<Encoded> {
        let l = &self.layout;
        let (b, hdim) = (src.rows, self.config.hidden);
        let mut h = zeros_state(tape, b, hdim);
        let mut outs = Vec::with_capacity(src.len);
        for t in 0..src.len {
            let x = tape.embedding(p[l.src_emb], &src.column(t))?;
            h = l.enc.step_masked(tape, p, x, h, &src.active(t))?;
            outs.push(tape.reshape(h, &[b, 1, hdim])?);
        }
        let outputs = tape.concat(&outs, 1)?;
        let keys = tape.matmul(outputs, p[l.attn_key])?;
        Ok(Encoded {
            outputs,
            keys,
            last: h,
            keep: src.mask(),
        })
    }

    /// Context vector `[b, h]` and attention weights `[b, T]` for decoder state `s`.
    fn attend(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, s: Var) -> Result<(Var, Var)> {
        let l = &self.layout;
        let b = tape.shape(s)[0];
        let t_len = tape.shape(enc.outputs)[1];
        let q = tape.matmul(s, p[l.attn_query])?;
        let q = tape.reshape(q, &[b, 1, self.config.attn()])?;
        let e = tape.add(enc.keys, q)?;
        let e = tape.tanh(e);
        let scores = tape.matmul(e, p[l.attn_v])?;
        let scores = tape.reshape(scores, &[b, t_len])?;
        let w = tape.masked_softmax(scores, &enc.keep)?;
        let w3 = tape.reshape(w, &[b, t_len, 1])?;
        let weighted = tape.mul(w3, enc.outputs)?;
        let ctx = tape.sum_axis(weighted, 1)?;
        Ok((ctx, w))
    }

    fn init_decoder(&self, tape: &mut Tape, p: &Bound, enc: &Encoded) -> Result<Var> {
        let s = self.layout.bridge.forward(tape, p, enc.last)?;
        Ok(tape.tanh(s))
    }

    /// One decoder step; returns the new state and the `[s; ctx]` readout input.
    fn decode_step(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, prev: &[usize], s: Var) -> Result<(Var, Var, Var)> {
        let l = &self.layout;
        let y = tape.embedding(p[l.tgt_emb], prev)?;
        let (ctx, w) = self.attend(tape, p, enc, s)?;
        let x = tape.concat(&[y, ctx], 1)?;
        let s = l.dec.step(tape, p, x, s)?;
        let readout = tape.concat(&[s, ctx], 1)?;
        Ok((s, readout, w))
    }

    /// Teacher-forced predictions: decoder input at step `t` is the true symbol at `t - 1`.
    pub fn forced(&self, tape: &mut Tape, p: &Bound, src: &Batch, tgt: &Batch) -> Result<ForcedOutput> {
        if src.rows != tgt.rows {
            return Err(Error::Shape {
                op: "teacher_forced_loss",
                lhs: vec![src.rows],
                rhs: vec![tgt.rows],
            });
        }
        let enc = self.encode(tape, p, src)?;
        let mut s = self.init_decoder(tape, p, &enc)?;
        let mut readouts = Vec::with_capacity(tgt.len);
        let mut targets = Vec::with_capacity(tgt.rows * tgt.len);
        for t in 0..tgt.len - 1 {
            let (ns, r, _) = self.decode_step(tape, p, &enc, &tgt.column(t), s)?;
            s = ns;
            readouts.push(r);
            targets.extend(tgt.column(t + 1));
        }
        let rs = tape.concat(&readouts, 0)?;
        let logits = self.layout.out.forward(tape, p, rs)?;
        let weights: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
        let loss = tape.cross_entropy(logits, &targets, &weights)?;
        Ok(ForcedOutput {
            loss,
            logits,
            targets,
            weights,
        })
    }

    fn encode_pairs(&self, pairs: &[(String, String)]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        pairs
            .iter()
            .map(|(s, t)| (encode_word(s, &self.source).ids, encode_word(t, &self.target).ids))
            .unzip()
    }

    /// Mean next-symbol cross-entropy over non-PAD target positions.
    pub fn teacher_forced_loss(&self, src: &Batch, tgt: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let out = self.forced(&mut tape, &p, src, tgt)?;
        let v = tape.value(out.loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "teacher-forced loss".into(),
            });
        }
        Ok(v)
    }

    /// Pair batch with optional fixed padding lengths.
    pub fn batch(&self, pairs: &[(String, String)], pad: Option<(usize, usize)>) -> (Batch, Batch) {
        let (s, t) = self.encode_pairs(pairs);
        let idx: Vec<usize> = (0..pairs.len()).collect();
        (
            Batch::gather(&s, &idx, pad.map(|p| p.0)),
            Batch::gather(&t, &idx, pad.map(|p| p.1)),
        )
    }

    /// Fraction of non-PAD target positions whose argmax equals the true next symbol.
    pub fn teacher_forced_accuracy(&self, pairs: &[(String, String)]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in pairs.chunks(self.config.batch_size.max(1)) {
            let (src, tgt) = self.batch(chunk, None);
            let mut tape = Tape::new();
            let p = self.params.attach(&mut tape, false);
            let out = self.forced(&mut tape, &p, &src, &tgt)?;
            let c = self.target.len();
            let logits = tape.value(out.logits).data();
            for (r, (&t, &w)) in out.targets.iter().zip(&out.weights).enumerate() {
                if w > 0.0 {
                    total += 1;
                    if argmax_allowed(&logits[r * c..(r + 1) * c], |_| true) == t {
                        hit += 1;
                    }
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    /// Attention weights for one decoder state over `encoder_outputs [T, h]`;
    /// `keep[i] == false` marks PAD.
    pub fn attention_weights(&self, decoder_state: &[f64], encoder_outputs: &Tensor, keep: &[bool]) -> Result<Vec<f64>> {
        let h = self.config.hidden;
        if encoder_outputs.rank() != 2 || encoder_outputs.shape()[1] != h || decoder_state.len() != h {
            return Err(Error::Shape {
                op: "attention_weights",
                lhs: vec![decoder_state.len()],
                rhs: encoder_outputs.shape().to_vec(),
            });
        }
        let t_len = encoder_outputs.shape()[0];
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let outputs = tape.constant(encoder_outputs.clone().reshaped(&[1, t_len, h])?);
        let keys = tape.matmul(outputs, p[self.layout.attn_key])?;
        let enc = Encoded {
            outputs,
            keys,
            last: outputs,
            keep: keep.to_vec(),
        };
        let s = tape.constant(Tensor::new(&[1, h], decoder_state.to_vec())?);
        let (_, w) = self.attend(&mut tape, &p, &enc, s)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// Argmax decoding from BOS until EOS or `max_len` symbols.
    pub fn translate_greedy(&self, source_word: &str) -> Result<(String, AttentionTrace)> {
        self.translate_padded(source_word, None)
    }

    /// Greedy translation with the source padded to `pad_len` encoded positions.
    pub fn translate_padded(&self, source_word: &str, pad_len: Option<usize>) -> Result<(String, AttentionTrace)> {
        let enc_src = vec![encode_word(source_word, &self.source).ids];
        let src = Batch::gather(&enc_src, &[0], pad_len);
        let mut tape = Tape::new();
        let p = self.params.attach(&mut tape, false);
        let enc = self.encode(&mut tape, &p, &src)?;
        let mut s = self.init_decoder(&mut tape, &p, &enc)?;
        let mut prev = BOS;
        let mut word = String::new();
        let mut trace = AttentionTrace::default();
        for _ in 0..self.config.max_len {
            let (ns, r, w) = self.decode_step(&mut tape, &p, &enc, &[prev], s)?;
            s = ns;
            trace.steps.push(tape.value(w).data().to_vec());
            let logits = self.layout.out.forward(&mut tape, &p, r)?;
            let next = argmax_allowed(tape.value(logits).data(), |i| i == EOS || self.target.is_regular(i));
            if next == EOS {
                break;
            }
            word.push(self.target.symbol(next).unwrap());
            prev = next;
        }
        Ok((word, trace))
    }
}

/// Trains on the parallel pairs of `view`.
pub fn train_seq2seq(
    view: &TrainView,
    source_language: &str,
    target_language: &str,
    config: &Seq2SeqConfig,
    seed: u64,
) -> Result<(Seq2SeqModel, Seq2SeqTrace)> {
    let pairs = view.pairs();
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("seq2seq training needs at least 2 pairs".into()));
    }
    let src_words: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let tgt_words: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let source = build_alphabet(&src_words, source_language)?;
    let target = build_alphabet(&tgt_words, target_language)?;
    let mut init = rng::stream(seed, Stream::Init);
    let model = Seq2SeqModel::new(source, target, config.clone(), &mut init);
    fit_seq2seq(model, pairs, seed)
}

pub fn fit_seq2seq(mut model: Seq2SeqModel, pairs: &[(String, String)], seed: u64) -> Result<(Seq2SeqModel, Seq2SeqTrace)> {
    let config = model.config.clone();
    let (src_enc, tgt_enc) = model.encode_pairs(pairs);
    let mut adam = AdamState::for_store(config.adam, &model.params);
    let mut trace = Seq2SeqTrace::default();
    let mut initial: Option<f64> = None;
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let (mut sum, mut count, mut hit) = (0.0, 0usize, 0usize);
        for idx in batch_order(pairs.len(), config.batch_size, seed, epoch as u64, true) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let src = Batch::gather(&src_enc, &idx, None);
            let tgt = Batch::gather(&tgt_enc, &idx, None);
            let mut tape = Tape::new();
            let p = model.params.attach(&mut tape, true);
            let out = model.forced(&mut tape, &p, &src, &tgt)?;
            let value = tape.value(out.loss).item()?;
            let first = *initial.get_or_insert(value);
            if !value.is_finite() || value > config.divergence_factor * first {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let c = model.target.len();
            let logits = tape.value(out.logits).data();
            let scored = out.weights.iter().filter(|&&w| w > 0.0).count();
            for (r, (&t, &w)) in out.targets.iter().zip(&out.weights).enumerate() {
                if w > 0.0 && argmax_allowed(&logits[r * c..(r + 1) * c], |_| true) == t {
                    hit += 1;
                }
            }
            let mut grads = tape.backward(out.loss)?;
            let mut g = p.gradients(&mut grads);
            drop(tape);
            clip_grad_norm(&mut g, config.clip_norm);
            adam.step_store(&mut model.params, &g)?;
            trace.step_loss.push(value);
            sum += value * scored as f64;
            count += scored;
            step += 1;
        }
        if count > 0 {
            trace.epoch_loss.push(sum / count as f64);
            trace.epoch_accuracy.push(hit as f64 / count as f64);
        }
    }
    model.params.round_to_f32();
    Ok((model, trace))
}
