//! Cross-aligned autoencoder for word-level style transfer between two
//! non-parallel vocabularies.
//!
//! A shared encoder maps a word, conditioned on its style, to a content code
//! `z`; a shared generator re-renders `z` under either style. Two
//! convolutional discriminators over generator hidden-state sequences push the
//! free-running transfers into style `y` towards the teacher-forced
//! reconstructions of real `y` words.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nn::{argmax_allowed, Gru, Linear};
use crate::params::{clip_grad_norm, Bound, ParamId, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{batch_order, build_alphabet, encode_word, Alphabet, Batch, BOS, EOS, MAX_WORD_LEN, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleLabel {
    Y1,
    Y2,
}

impl StyleLabel {
    pub fn index(self) -> usize {
        match self {
            StyleLabel::Y1 => 0,
            StyleLabel::Y2 => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            StyleLabel::Y1 => StyleLabel::Y2,
            StyleLabel::Y2 => StyleLabel::Y1,
        }
    }
}

/// Content code produced by [`TransferModel::encode_content`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode(Vec<f64>);

impl ContentCode {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &ContentCode) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    pub emb_dim: usize,
    pub z_dim: usize,
    pub style_dim: usize,
    pub hidden: usize,
    pub filters: usize,
    pub widths: Vec<usize>,
    /// Weight of the adversarial term in the generator loss.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub max_len: usize,
    /// Softmax temperature of the fed-back distribution in free-run mode.
    pub temperature: f64,
    /// Real-label smoothing for the discriminators (target `1 - s`).
    pub label_smoothing: f64,
    /// Free-run steps beyond the longest source word during training.
    pub free_run_slack: usize,
    /// Leading epochs trained on reconstruction only.
    pub pretrain_epochs: usize,
    /// The adversarial term reaches the generator only while every
    /// discriminator loss is below this value (chance level is 2 ln 2).
    pub disc_gate: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            emb_dim: 32,
            z_dim: 64,
            style_dim: 16,
            hidden: 128,
            filters: 32,
            widths: vec![2, 3, 4],
            lambda: 1.0,
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            batch_size: 64,
            epochs: 300,
            max_steps: None,
            clip_norm: 5.0,
            max_len: MAX_WORD_LEN,
            temperature: 0.1,
            label_smoothing: 0.1,
            free_run_slack: 4,
            pretrain_epochs: 10,
            disc_gate: 1.2,
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    width: usize,
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Discriminator {
    convs: Vec<Conv>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    emb: ParamId,
    style: ParamId,
    enc_init: Linear,
    enc: Gru,
    to_z: Linear,
    gen_init: Linear,
    gen: Gru,
    out: Linear,
    disc: [Discriminator; 2],
}

#[derive(Debug, Clone)]
pub struct TransferModel {
    config: StyleConfig,
    alphabet: Alphabet,
    languages: [String; 2],
    generator: ParamStore,
    discriminators: ParamStore,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenMode<'a> {
    TeacherForced(&'a str),
    FreeRun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Hard argmax word (free run) or the provided target (teacher forced).
    pub word: String,
    /// Next-symbol distribution per step.
    pub distributions: Vec<Vec<f64>>,
    /// Generator hidden states `[T, h]`, initial state included.
    pub hidden: Tensor,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_rec: Vec<f64>,
    pub epoch_adv: Vec<[f64; 2]>,
    pub epoch_disc_acc: Vec<[f64; 2]>,
    pub step_rec: Vec<f64>,
}

/// Training stopped early; `stats` covers the completed steps.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainAbort {
    #[source]
    pub source: Error,
    pub stats: TrainStats,
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Error {
        a.source
    }
}

/// Hidden sequences `[b, T, h]` with the valid length of each row.
struct Hidden {
    seq: Var,
    lengths: Vec<usize>,
}

struct FreeRun {
    hidden: Hidden,
    words: Vec<Vec<usize>>,
    probs: Vec<Var>,
    truncated: Vec<bool>,
}

impl TransferModel {
    pub fn new(alphabet: Alphabet, languages: [String; 2], config: StyleConfig, rng: &mut Rng) -> Self {
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        let c = &config;
        let a = alphabet.len();
        let emb = g.table("emb", a, c.emb_dim, rng);
        let style = g.table("style", 2, c.style_dim, rng);
        let enc_init = Linear::new(&mut g, "enc_init", c.style_dim, c.hidden, rng);
        let enc = Gru::new(&mut g, "enc", c.emb_dim, c.hidden, rng);
        let to_z = Linear::new(&mut g, "to_z", c.hidden, c.z_dim, rng);
        let gen_init = Linear::new(&mut g, "gen_init", c.z_dim + c.style_dim, c.hidden, rng);
        let gen = Gru::new(&mut g, "gen", c.emb_dim, c.hidden, rng);
        let out = Linear::new(&mut g, "out", c.hidden, a, rng);
        let mut disc = |name: &str| Discriminator {
            convs: c
                .widths
                .iter()
                .map(|&k| Conv {
                    width: k,
                    w: d.matrix(format!("{name}.conv{k}.w"), k * c.hidden, c.filters, rng),
                    b: d.bias(format!("{name}.conv{k}.b"), c.filters),
                })
                .collect(),
            head: Linear::new(&mut d, &format!("{name}.head"), c.widths.len() * c.filters, 1, rng),
        };
        let disc = [disc("d1"), disc("d2")];
        let layout = Layout {
            emb,
            style,
            enc_init,
            enc,
            to_z,
            gen_init,
            gen,
            out,
            disc,
        };
        TransferModel {
            config,
            alphabet,
            languages,
            generator: g,
            discriminators: d,
            layout,
        }
    }

    /// Model with the deterministic default initialization, for loading stored parameters.
    pub fn skeleton(alphabet: Alphabet, languages: [String; 2], config: StyleConfig) -> Self {
        let mut rng = rng::stream(0, Stream::Init);
        Self::new(alphabet, languages, config, &mut rng)
    }

    pub fn config(&self) -> &StyleConfig {
        &self.config
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn language(&self, style: StyleLabel) -> &str {
        &self.languages[style.index()]
    }

    pub fn languages(&self) -> &[String; 2] {
        &self.languages
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.generator
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.generator
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.discriminators
    }

    pub fn discriminator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.discriminators
    }

    pub fn params_pair_mut(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (&mut self.generator, &mut self.discriminators)
    }

    fn min_width(&self) -> usize {
        self.config.widths.iter().copied().min().unwrap_or(1)
    }

    fn style_rows(&self, tape: &mut Tape, g: &Bound, style: StyleLabel, rows: usize) -> Result<Var> {
        tape.embedding(g[self.layout.style], &vec![style.index(); rows])
    }

    fn encode(&self, tape: &mut Tape, g: &Bound, batch: &Batch, style: StyleLabel) -> Result<Var> {
        let l = &self.layout;
        let sv = self.style_rows(tape, g, style, batch.rows)?;
        let h0 = l.enc_init.forward(tape, g, sv)?;
        let mut h = tape.tanh(h0);
        for t in 0..batch.len {
            let x = tape.embedding(g[l.emb], &batch.column(t))?;
            h = l.enc.step_masked(tape, g, x, h, &batch.active(t))?;
        }
        let z = l.to_z.forward(tape, g, h)?;
        Ok(tape.tanh(z))
    }

    fn gen_init(&self, tape: &mut Tape, g: &Bound, z: Var, style: StyleLabel) -> Result<Var> {
        let rows = tape.shape(z)[0];
        let sv = self.style_rows(tape, g, style, rows)?;
        let x = tape.concat(&[z, sv], 1)?;
        let s = self.layout.gen_init.forward(tape, g, x)?;
        Ok(tape.tanh(s))
    }

    fn stack(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let (b, h) = (tape.shape(states[0])[0], self.config.hidden);
        let parts = states
            .iter()
            .map(|&s| tape.reshape(s, &[b, 1, h]))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts, 1)
    }

    /// Teacher-forced pass; returns the hidden sequence and the `[(L-1)·b, A]`
    /// logits ordered step-major with their targets.
    fn teacher_forced(&self, tape: &mut Tape, g: &Bound, z: Var, style: StyleLabel, tgt: &Batch) -> Result<(Hidden, Var, Vec<usize>)> {
        let l = &self.layout;
        let mut s = self.gen_init(tape, g, z, style)?;
        let mut states = vec![s];
        let mut targets = Vec::with_capacity(tgt.rows * tgt.len);
        for t in 0..tgt.len - 1 {
            let x = tape.embedding(g[l.emb], &tgt.column(t))?;
            s = l.gen.step(tape, g, x, s)?;
            states.push(s);
            targets.extend(tgt.column(t + 1));
        }
        let flat = tape.concat(&states[1..], 0)?;
        let logits = l.out.forward(tape, g, flat)?;
        let seq = self.stack(tape, &states)?;
        Ok((
            Hidden {
                seq,
                lengths: tgt.lengths.clone(),
            },
            logits,
            targets,
        ))
    }

    /// Free-running generation feeding back `softmax(logits / τ) · E`.
    fn free_run(&self, tape: &mut Tape, g: &Bound, z: Var, style: StyleLabel, steps: usize, stop_early: bool) -> Result<FreeRun> {
        let l = &self.layout;
        let rows = tape.shape(z)[0];
        let mut s = self.gen_init(tape, g, z, style)?;
        let mut states = vec![s];
        let mut x = tape.embedding(g[l.emb], &vec![BOS; rows])?;
        let mut words = vec![Vec::new(); rows];
        let mut lengths = vec![0usize; rows];
        let mut probs = Vec::with_capacity(steps);
        let a = self.alphabet.len();
        for step in 0..steps {
            s = l.gen.step(tape, g, x, s)?;
            states.push(s);
            let logits = l.out.forward(tape, g, s)?;
            let values = tape.value(logits).data().to_vec();
            for r in 0..rows {
                if lengths[r] != 0 {
                    continue;
                }
                let next = argmax_allowed(&values[r * a..(r + 1) * a], |i| i == EOS || self.alphabet.is_regular(i));
                if next == EOS {
                    // States s_0..s_{step+1}: the last one emitted EOS.
                    lengths[r] = step + 2;
                } else if words[r].len() < self.config.max_len {
                    words[r].push(next);
                }
            }
            probs.push(tape.softmax(logits)?);
            if stop_early && lengths.iter().all(|&n| n != 0) {
                break;
            }
            let scaled = tape.scale(logits, 1.0 / self.config.temperature);
            let soft = tape.softmax(scaled)?;
            x = tape.matmul(soft, g[l.emb])?;
        }
        let total = states.len();
        let truncated = lengths.iter().map(|&n| n == 0).collect();
        for n in lengths.iter_mut().filter(|n| **n == 0) {
            *n = total;
        }
        let seq = self.stack(tape, &states)?;
        Ok(FreeRun {
            hidden: Hidden { seq, lengths },
            words,
            probs,
            truncated,
        })
    }

    /// Discriminator logits `[b, 1]` over hidden sequences.
    fn disc_logits(&self, tape: &mut Tape, d: &Bound, which: StyleLabel, hidden: &Hidden) -> Result<Var> {
        let net = &self.layout.disc[which.index()];
        let shape = tape.shape(hidden.seq).to_vec();
        let (b, t_len, h) = (shape[0], shape[1], shape[2]);
        if let Some(r) = hidden.lengths.iter().position(|&n| n < self.min_width()) {
            return Err(Error::InvalidArgument(format!(
                "hidden sequence {r} has length {} below the smallest window {}",
                hidden.lengths[r],
                self.min_width()
            )));
        }
        let mut feats = Vec::with_capacity(net.convs.len());
        for conv in &net.convs {
            let k = conv.width;
            if t_len < k {
                feats.push(tape.constant(Tensor::zeros(&[b, self.config.filters])));
                continue;
            }
            let span = t_len - k + 1;
            let slices = (0..k)
                .map(|j| tape.slice(hidden.seq, 1, j, span))
                .collect::<Result<Vec<_>>>()?;
            let windows = if k == 1 { slices[0] } else { tape.concat(&slices, 2)? };
            debug_assert_eq!(tape.shape(windows), &[b, span, k * h]);
            let y = tape.matmul(windows, d[conv.w])?;
            let y = tape.add(y, d[conv.b])?;
            let y = tape.relu(y);
            // Windows reaching past a row's end are zeroed; ReLU output is >= 0,
            // so the max over time is unchanged by them.
            let mask: Vec<f64> = hidden
                .lengths
                .iter()
                .flat_map(|&n| (0..span).map(move |i| if i + k <= n { 1.0 } else { 0.0 }))
                .collect();
            let mask = tape.constant(Tensor::new(&[b, span, 1], mask)?);
            let y = tape.mul(y, mask)?;
            feats.push(tape.max_axis(y, 1)?);
        }
        let f = if feats.len() == 1 { feats[0] } else { tape.concat(&feats, 1)? };
        net.head.forward(tape, d, f)
    }

    fn single_batch(&self, word: &str) -> Batch {
        Batch::gather(&[encode_word(word, &self.alphabet).ids], &[0], None)
    }

    pub fn encode_content(&self, word: &str, style: StyleLabel) -> Result<ContentCode> {
        let mut tape = Tape::new();
        let g = self.generator.attach(&mut tape, false);
        let z = self.encode(&mut tape, &g, &self.single_batch(word), style)?;
        Ok(ContentCode(tape.value(z).data().to_vec()))
    }

    pub fn generate_styled(&self, z: &ContentCode, style: StyleLabel, mode: GenMode) -> Result<Generation> {
        if z.dim() != self.config.z_dim {
            return Err(Error::Shape {
                op: "generate_styled",
                lhs: vec![z.dim()],
                rhs: vec![self.config.z_dim],
            });
        }
        let mut tape = Tape::new();
        let g = self.generator.attach(&mut tape, false);
        let zv = tape.constant(Tensor::new(&[1, z.dim()], z.0.clone())?);
        let h = self.config.hidden;
        match mode {
            GenMode::TeacherForced(target) => {
                let tgt = self.single_batch(target);
                let (hidden, logits, _) = self.teacher_forced(&mut tape, &g, zv, style, &tgt)?;
                let p = tape.softmax(logits)?;
                let a = self.alphabet.len();
                let distributions = tape.value(p).data().chunks(a).map(<[f64]>::to_vec).collect();
                let t_len = tape.shape(hidden.seq)[1];
                Ok(Generation {
                    word: target.to_string(),
                    distributions,
                    hidden: tape.value(hidden.seq).clone().reshaped(&[t_len, h])?,
                    truncated: false,
                })
            }
            GenMode::FreeRun => {
                let run = self.free_run(&mut tape, &g, zv, style, self.config.max_len + 1, true)?;
                let word = run.words[0].iter().map(|&i| self.alphabet.symbol(i).unwrap()).collect();
                let distributions = run.probs.iter().map(|&p| tape.value(p).data().to_vec()).collect();
                let t_len = tape.shape(run.hidden.seq)[1];
                Ok(Generation {
                    word,
                    distributions,
                    hidden: tape.value(run.hidden.seq).clone().reshaped(&[t_len, h])?,
                    truncated: run.truncated[0],
                })
            }
        }
    }

    /// Encodes under `from` and free-runs the generator under `to`.
    pub fn transfer(&self, word: &str, from: StyleLabel, to: StyleLabel) -> Result<String> {
        let z = self.encode_content(word, from)?;
        Ok(self.generate_styled(&z, to, GenMode::FreeRun)?.word)
    }

    pub fn reconstruct(&self, word: &str, style: StyleLabel) -> Result<String> {
        self.transfer(word, style, style)
    }

    /// Probability that `hidden_sequence [T, h]` is a real rendering in style `which`.
    pub fn discriminate(&self, which: StyleLabel, hidden_sequence: &Tensor) -> Result<f64> {
        let logit = self.disc_logit_values(which, std::slice::from_ref(hidden_sequence))?[0];
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    fn hidden_batch(&self, tape: &mut Tape, seqs: &[Tensor]) -> Result<Hidden> {
        let h = self.config.hidden;
        let longest = seqs.iter().map(|s| s.shape()[0]).max().unwrap_or(0);
        let mut data = Vec::with_capacity(seqs.len() * longest * h);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.rank() != 2 || s.shape()[1] != h {
                return Err(Error::Shape {
                    op: "discriminate",
                    lhs: s.shape().to_vec(),
                    rhs: vec![h],
                });
            }
            data.extend_from_slice(s.data());
            data.resize(data.len() + (longest - s.shape()[0]) * h, 0.0);
            lengths.push(s.shape()[0]);
        }
        let seq = tape.constant(Tensor::new(&[seqs.len(), longest, h], data)?);
        Ok(Hidden { seq, lengths })
    }

    fn disc_logit_values(&self, which: StyleLabel, seqs: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let d = self.discriminators.attach(&mut tape, false);
        let hidden = self.hidden_batch(&mut tape, seqs)?;
        let logits = self.disc_logits(&mut tape, &d, which, &hidden)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Fraction of `real` judged real (p > 0.5) and `fake` judged fake.
    pub fn discriminator_accuracy(&self, which: StyleLabel, real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
        let r = self.disc_logit_values(which, real)?;
        let f = self.disc_logit_values(which, fake)?;
        let hits = r.iter().filter(|&&x| x > 0.0).count() + f.iter().filter(|&&x| x <= 0.0).count();
        Ok(hits as f64 / (r.len() + f.len()).max(1) as f64)
    }

    /// Trains discriminator `which` alone on fixed hidden sequences.
    pub fn fit_discriminator(&mut self, which: StyleLabel, real: &[Tensor], fake: &[Tensor], steps: usize) -> Result<()> {
        let mut adam = AdamState::for_store(self.config.adam, &self.discriminators);
        let smooth = self.config.label_smoothing;
        let mut seqs = real.to_vec();
        seqs.extend_from_slice(fake);
        let targets: Vec<f64> = (0..seqs.len()).map(|i| if i < real.len() { 1.0 - smooth } else { 0.0 }).collect();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let d = self.discriminators.attach(&mut tape, true);
            let hidden = self.hidden_batch(&mut tape, &seqs)?;
            let logits = self.disc_logits(&mut tape, &d, which, &hidden)?;
            let loss = tape.bce_with_logits(logits, &targets)?;
            let mut grads = tape.backward(loss)?;
            let mut g = d.gradients(&mut grads);
            clip_grad_norm(&mut g, self.config.clip_norm);
            adam.step_store(&mut self.discriminators, &g)?;
        }
        Ok(())
    }

    fn free_steps(&self, b: &Batch) -> usize {
        // Encoded length includes BOS and EOS; symbols + EOS + slack.
        let longest = b.lengths.iter().copied().max().unwrap_or(2) - 1;
        (longest + self.config.free_run_slack).min(self.config.max_len + 1)
    }

    /// Forward pass shared by both players on a pair of style batches.
    fn forward(&self, tape: &mut Tape, g: &Bound, d: &Bound, b1: &Batch, b2: &Batch, adversarial: bool) -> Result<Losses> {
        use StyleLabel::{Y1, Y2};
        let z1 = self.encode(tape, g, b1, Y1)?;
        let z2 = self.encode(tape, g, b2, Y2)?;
        let (real1, logits1, t1) = self.teacher_forced(tape, g, z1, Y1, b1)?;
        let (real2, logits2, t2) = self.teacher_forced(tape, g, z2, Y2, b2)?;
        // Summed over the symbols of each word, averaged over words.
        let mut word_loss = |logits: Var, targets: &[usize], rows: usize| -> Result<Var> {
            let w: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
            let scored = w.iter().sum::<f64>();
            let l = tape.cross_entropy(logits, targets, &w)?;
            Ok(tape.scale(l, scored / rows as f64))
        };
        let l1 = word_loss(logits1, &t1, b1.rows)?;
        let l2 = word_loss(logits2, &t2, b2.rows)?;
        let rec = tape.add(l1, l2)?;
        if !adversarial {
            return Ok(Losses { rec, judged: None });
        }
        let fake12 = self.free_run(tape, g, z1, Y2, self.free_steps(b1), false)?;
        let fake21 = self.free_run(tape, g, z2, Y1, self.free_steps(b2), false)?;
        let judged = [
            (self.disc_logits(tape, d, Y1, &real1)?, self.disc_logits(tape, d, Y1, &fake21.hidden)?),
            (self.disc_logits(tape, d, Y2, &real2)?, self.disc_logits(tape, d, Y2, &fake12.hidden)?),
        ];
        Ok(Losses {
            rec,
            judged: Some(judged),
        })
    }

    /// Discriminator loss per discriminator: BCE on real (smoothed target)
    /// plus BCE on fake (target 0). Returns the summed loss, per-discriminator
    /// values and accuracies.
    fn disc_loss(&self, tape: &mut Tape, judged: &[(Var, Var); 2]) -> Result<(Var, [f64; 2], [f64; 2])> {
        let mut total = None;
        let (mut values, mut acc) = ([0.0; 2], [0.0; 2]);
        for (i, &(real, fake)) in judged.iter().enumerate() {
            let (nr, nf) = (tape.value(real).len(), tape.value(fake).len());
            let hits = tape.value(real).data().iter().filter(|&&x| x > 0.0).count()
                + tape.value(fake).data().iter().filter(|&&x| x <= 0.0).count();
            acc[i] = hits as f64 / (nr + nf) as f64;
            let lr = tape.bce_with_logits(real, &vec![1.0 - self.config.label_smoothing; nr])?;
            let lf = tape.bce_with_logits(fake, &vec![0.0; nf])?;
            let l = tape.add(lr, lf)?;
            values[i] = tape.value(l).item()?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok((total.unwrap(), values, acc))
    }

    /// Non-saturating generator loss: each discriminator should call the transfers real.
    fn adv_loss(&self, tape: &mut Tape, judged: &[(Var, Var); 2]) -> Result<(Var, [f64; 2])> {
        let mut parts = [0.0; 2];
        let mut total = None;
        for (i, &(_, fake)) in judged.iter().enumerate() {
            let n = tape.value(fake).len();
            let l = tape.bce_with_logits(fake, &vec![1.0; n])?;
            parts[i] = tape.value(l).item()?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok((total.unwrap(), parts))
    }

    /// Generator objective `L_rec + λ·L_adv` with the discriminators held fixed.
    pub fn generator_loss(&self, tape: &mut Tape, g: &Bound, d: &Bound, b1: &Batch, b2: &Batch) -> Result<Var> {
        let losses = self.forward(tape, g, d, b1, b2, self.config.lambda != 0.0)?;
        match losses.judged {
            None => Ok(losses.rec),
            Some(j) => {
                let (adv, _) = self.adv_loss(tape, &j)?;
                let adv = tape.scale(adv, self.config.lambda);
                tape.add(losses.rec, adv)
            }
        }
    }

    /// Summed discriminator objective with the generator `g` attached as given.
    pub fn discriminator_loss(&self, tape: &mut Tape, g: &Bound, d: &Bound, b1: &Batch, b2: &Batch) -> Result<Var> {
        let losses = self.forward(tape, g, d, b1, b2, true)?;
        Ok(self.disc_loss(tape, &losses.judged.expect("adversarial forward"))?.0)
    }

    /// Style batches built from raw words, for loss evaluation and gradient checks.
    pub fn batches(&self, y1: &[&str], y2: &[&str]) -> (Batch, Batch) {
        let enc = |ws: &[&str]| -> Vec<Vec<usize>> { ws.iter().map(|w| encode_word(w, &self.alphabet).ids).collect() };
        let (e1, e2) = (enc(y1), enc(y2));
        (
            Batch::gather(&e1, &(0..e1.len()).collect::<Vec<_>>(), None),
            Batch::gather(&e2, &(0..e2.len()).collect::<Vec<_>>(), None),
        )
    }
}

struct Losses {
    rec: Var,
    /// (real, fake) logits for D1 and D2.
    judged: Option<[(Var, Var); 2]>,
}

/// Index groups for one epoch: the larger corpus is shuffled, the smaller one
/// is resampled with replacement up to the same size.
fn epoch_pairs(n1: usize, n2: usize, batch: usize, seed: u64, epoch: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = n1.max(n2);
    let draw = |size: usize, salt: u64| -> Vec<Vec<usize>> {
        if size == n {
            return batch_order(size, n, seed.wrapping_add(salt), epoch, true).concat().chunks(batch).map(<[usize]>::to_vec).collect();
        }
        let mut r = rng::indexed(seed.wrapping_add(salt), Stream::Resample, epoch);
        let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..size)).collect();
        idx.chunks(batch).map(<[usize]>::to_vec).collect()
    };
    draw(n1, 0).into_iter().zip(draw(n2, 1)).collect()
}

/// Trains on two non-parallel word lists rendered as styles y1 and y2.
pub fn train_cross_aligned(
    y1: &[String],
    y2: &[String],
    languages: [&str; 2],
    config: &StyleConfig,
    seed: u64,
) -> std::result::Result<(TransferModel, TrainStats), TrainAbort> {
    let abort = |source: Error| TrainAbort {
        source,
        stats: TrainStats::default(),
    };
    if y1.is_empty() || y2.is_empty() {
        return Err(abort(Error::InvalidArgument("both style corpora must be non-empty".into())));
    }
    if config.widths.is_empty() || config.temperature <= 0.0 {
        return Err(abort(Error::InvalidArgument(
            "style transfer needs at least one conv width and a positive temperature".into(),
        )));
    }
    let a1 = build_alphabet(y1, &languages[0]).map_err(abort)?;
    let a2 = build_alphabet(y2, &languages[1]).map_err(abort)?;
    let union = Alphabet::union(format!("{}+{}", languages[0], languages[1]), &a1, &a2);
    let mut init = rng::stream(seed, Stream::Init);
    let model = TransferModel::new(
        union,
        [languages[0].to_string(), languages[1].to_string()],
        config.clone(),
        &mut init,
    );
    fit_cross_aligned(model, y1, y2, seed)
}

pub fn fit_cross_aligned(
    mut model: TransferModel,
    y1: &[String],
    y2: &[String],
    seed: u64,
) -> std::result::Result<(TransferModel, TrainStats), TrainAbort> {
    let config = model.config.clone();
    let enc = |ws: &[String]| -> Vec<Vec<usize>> { ws.iter().map(|w| encode_word(w, &model.alphabet).ids).collect() };
    let (e1, e2) = (enc(y1), enc(y2));
    let mut adam_g = AdamState::for_store(config.adam, &model.generator);
    let mut adam_d = AdamState::for_store(config.adam, &model.discriminators);
    let mut stats = TrainStats::default();
    let mut step = 0usize;
    let mut run = || -> Result<()> {
        'epochs: for epoch in 0..config.epochs {
            let (mut rec_sum, mut adv_sum, mut acc_sum, mut n) = (0.0, [0.0; 2], [0.0; 2], 0usize);
            for (i1, i2) in epoch_pairs(e1.len(), e2.len(), config.batch_size, seed, epoch as u64) {
                if config.max_steps.is_some_and(|m| step >= m) {
                    break 'epochs;
                }
                let b1 = Batch::gather(&e1, &i1, None);
                let b2 = Batch::gather(&e2, &i2, None);

                // Discriminator step against the current generator.
                let (disc_values, acc) = {
                    let mut tape = Tape::new();
                    let g = model.generator.attach(&mut tape, false);
                    let d = model.discriminators.attach(&mut tape, true);
                    let losses = model.forward(&mut tape, &g, &d, &b1, &b2, true)?;
                    let (loss, values, acc) = model.disc_loss(&mut tape, losses.judged.as_ref().unwrap())?;
                    let value = tape.value(loss).item()?;
                    if !value.is_finite() {
                        return Err(Error::Diverged { epoch, step, loss: value });
                    }
                    let mut grads = tape.backward(loss)?;
                    let mut gd = d.gradients(&mut grads);
                    clip_grad_norm(&mut gd, config.clip_norm);
                    adam_d.step_store(&mut model.discriminators, &gd)?;
                    (values, acc)
                };
                let adversarial = config.lambda != 0.0
                    && epoch >= config.pretrain_epochs
                    && disc_values.iter().all(|&v| v < config.disc_gate);

                // Encoder/generator step against the updated discriminators.
                let mut tape = Tape::new();
                let g = model.generator.attach(&mut tape, true);
                let d = model.discriminators.attach(&mut tape, false);
                let losses = model.forward(&mut tape, &g, &d, &b1, &b2, adversarial)?;
                let rec = tape.value(losses.rec).item()?;
                let (total, adv) = match &losses.judged {
                    Some(j) => {
                        let (adv, parts) = model.adv_loss(&mut tape, j)?;
                        let adv = tape.scale(adv, config.lambda);
                        (tape.add(losses.rec, adv)?, parts)
                    }
                    None => (losses.rec, [0.0; 2]),
                };
                let value = tape.value(total).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                let mut grads = tape.backward(total)?;
                let mut gg = g.gradients(&mut grads);
                drop(tape);
                clip_grad_norm(&mut gg, config.clip_norm);
                adam_g.step_store(&mut model.generator, &gg)?;

                stats.step_rec.push(rec);
                rec_sum += rec;
                for k in 0..2 {
                    adv_sum[k] += adv[k];
                    acc_sum[k] += acc[k];
                }
                n += 1;
                step += 1;
            }
            if n > 0 {
                let m = n as f64;
                stats.epoch_rec.push(rec_sum / m);
                stats.epoch_adv.push([adv_sum[0] / m, adv_sum[1] / m]);
                stats.epoch_disc_acc.push([acc_sum[0] / m, acc_sum[1] / m]);
            }
        }
        Ok(())
    };
    let outcome = run();
    match outcome {
        Ok(()) => {
            model.generator.round_to_f32();
            model.discriminators.round_to_f32();
            Ok((model, stats))
        }
        Err(source) => Err(TrainAbort { source, stats }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use StyleLabel::{Y1, Y2};

    fn small() -> StyleConfig {
        StyleConfig {
            emb_dim: 8,
            z_dim: 8,
            style_dim: 4,
            hidden: 16,
            filters: 4,
            ..StyleConfig::default()
        }
    }

    fn untrained(cfg: StyleConfig) -> TransferModel {
        let a1 = build_alphabet(&["ab"], "s1").unwrap();
        let a2 = build_alphabet(&["xy"], "s2").unwrap();
        let u = Alphabet::union("s1+s2", &a1, &a2);
        TransferModel::new(u, ["s1".into(), "s2".into()], cfg, &mut rng::stream(3, Stream::Init))
    }

    fn words(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn encode_is_deterministic_with_configured_dim() {
        let m = untrained(small());
        let a = m.encode_content("abba", Y1).unwrap();
        assert_eq!(a, m.encode_content("abba", Y1).unwrap());
        assert_eq!(a.dim(), 8);
        assert_ne!(a, m.encode_content("abba", Y2).unwrap());
    }

    #[test]
    fn untrained_outputs_are_well_formed() {
        let m = untrained(small());
        for w in ["a", "abab", "xyyx", "q"] {
            for (from, to) in [(Y1, Y1), (Y1, Y2), (Y2, Y1)] {
                let out = m.transfer(w, from, to).unwrap();
                assert!(out.chars().count() <= m.config.max_len);
                assert!(out.chars().all(|c| m.alphabet.index_of(c).is_some()));
            }
            assert_eq!(m.transfer(w, Y2, Y2).unwrap(), m.reconstruct(w, Y2).unwrap());
        }
    }

    #[test]
    fn teacher_forced_distributions_sum_to_one() {
        let m = untrained(small());
        let z = m.encode_content("ab", Y1).unwrap();
        let g = m.generate_styled(&z, Y1, GenMode::TeacherForced("abb")).unwrap();
        assert_eq!(g.distributions.len(), 4);
        for d in &g.distributions {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(g.hidden.shape(), &[5, 16]);
        let f = m.generate_styled(&z, Y1, GenMode::FreeRun).unwrap();
        for d in &f.distributions {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(f.hidden.shape()[0], f.distributions.len() + 1);
    }

    #[test]
    fn discriminate_range_and_short_sequence_error() {
        let m = untrained(small());
        let mut r = rng::stream(1, Stream::Probe);
        for len in [2, 3, 7] {
            let p = m.discriminate(Y1, &Tensor::randn(&[len, 16], &mut r)).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        assert!(m.discriminate(Y2, &Tensor::randn(&[1, 16], &mut r)).is_err());
    }

    #[test]
    fn discriminator_cannot_separate_identical_distributions() {
        let mut m = untrained(small());
        let mut r = rng::stream(2, Stream::Probe);
        let mut sample = |n: usize| -> Vec<Tensor> { (0..n).map(|i| Tensor::randn(&[3 + i % 5, 16], &mut r)).collect() };
        let (real, fake) = (sample(64), sample(64));
        m.fit_discriminator(Y1, &real, &fake, 30).unwrap();
        let (hr, hf) = (sample(200), sample(200));
        let acc = m.discriminator_accuracy(Y1, &hr, &hf).unwrap();
        assert!((0.4..=0.6).contains(&acc), "held-out accuracy {acc}");
    }

    #[test]
    fn gradient_check_generator_loss() {
        let cfg = StyleConfig {
            emb_dim: 3,
            z_dim: 3,
            style_dim: 2,
            hidden: 4,
            filters: 2,
            temperature: 0.5,
            ..StyleConfig::default()
        };
        let m = untrained(cfg);
        let (b1, b2) = m.batches(&["ab", "b"], &["xyx", "y"]);
        let dstore = m.discriminators.clone();
        let r = crate::gradcheck::gradient_check(m.generator.tensors(), |tape, vars| {
            let g = Bound::from_vars(vars.to_vec());
            let d = dstore.attach(tape, false);
            m.generator_loss(tape, &g, &d, &b1, &b2)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn resampling_matches_larger_corpus() {
        let pairs = epoch_pairs(3, 10, 4, 5, 0);
        assert_eq!(pairs.len(), 3);
        let total1: usize = pairs.iter().map(|p| p.0.len()).sum();
        let mut seen2: Vec<usize> = pairs.iter().flat_map(|p| p.1.clone()).collect();
        assert_eq!(total1, 10);
        seen2.sort();
        assert_eq!(seen2, (0..10).collect::<Vec<_>>());
        assert!(pairs.iter().flat_map(|p| &p.0).all(|&i| i < 3));
        assert_eq!(pairs, epoch_pairs(3, 10, 4, 5, 0));
    }

    #[test]
    fn separable_toy_styles_and_reconstruction() {
        let ab = words(&["ab", "ba", "aab", "abb", "bab", "aba", "bba", "baa", "abab", "bbaa", "aabb", "baba"]);
        let xy = words(&["xy", "yx", "xxy", "xyy", "yxy", "xyx", "yyx", "yxx", "xyxy", "yyxx", "xxyy", "yxyx"]);
        let cfg = StyleConfig {
            epochs: 300,
            batch_size: 12,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..small()
        };
        let (m, stats) = train_cross_aligned(&ab, &xy, ["s1", "s2"], &cfg, 11).unwrap();
        let clean = ab
            .iter()
            .filter(|w| {
                let t = m.transfer(w, Y1, Y2).unwrap();
                !t.is_empty() && t.chars().all(|c| c == 'x' || c == 'y')
            })
            .count();
        assert!(clean as f64 >= 0.9 * ab.len() as f64, "{clean}/{}", ab.len());
        let exact = ab.iter().filter(|w| &m.reconstruct(w, Y1).unwrap() == *w).count();
        assert!(exact as f64 >= 0.8 * ab.len() as f64, "{exact}");
        let z1 = m.encode_content("ab", Y1).unwrap();
        let z2 = m.encode_content("abb", Y1).unwrap();
        assert!(z1.distance(&z2) > 1e-6);
        assert_eq!(stats.epoch_rec.len(), 300);
        let windows: Vec<f64> = stats.step_rec.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-3, "{windows:?}");
        }
        assert!(stats.epoch_disc_acc.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
        assert!(stats.epoch_rec.last().unwrap() < &stats.epoch_rec[0]);
    }

    #[test]
    fn lambda_zero_still_autoencodes() {
        let ab = words(&["ab", "ba", "aab", "abb", "bba"]);
        let xy = words(&["xy", "yx"]);
        let cfg = StyleConfig {
            lambda: 0.0,
            epochs: 300,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..small()
        };
        let (m, stats) = train_cross_aligned(&ab, &xy, ["s1", "s2"], &cfg, 4).unwrap();
        let exact = ab.iter().filter(|w| &m.reconstruct(w, Y1).unwrap() == *w).count();
        assert!(exact >= 4, "{exact}/5");
        assert!(stats.epoch_adv.iter().all(|a| a == &[0.0, 0.0]));
    }

    #[test]
    fn training_is_deterministic() {
        let ab = words(&["ab", "ba", "aab"]);
        let xy = words(&["xy", "yx"]);
        let cfg = StyleConfig {
            epochs: 3,
            ..small()
        };
        let (m1, s1) = train_cross_aligned(&ab, &xy, ["s1", "s2"], &cfg, 9).unwrap();
        let (m2, s2) = train_cross_aligned(&ab, &xy, ["s1", "s2"], &cfg, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(m1.generator.tensors(), m2.generator.tensors());
        assert!(train_cross_aligned(&[], &xy, ["s1", "s2"], &cfg, 9).is_err());
    }
}
