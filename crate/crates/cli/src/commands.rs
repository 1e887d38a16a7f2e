use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lexiforge::checkpoint::{self, Model};
use lexiforge::config::{ExperimentConfig, ModelKind};
use lexiforge::eval::{self, Grouping, MetricsRow, Provenance, VowelSet};
use lexiforge::rng::{self, Stream};
use lexiforge::rnn::train_rnn_baseline;
use lexiforge::seq2seq::train_seq2seq;
use lexiforge::style::{train_cross_aligned, StyleLabel};
use lexiforge::text::{normalize_word, read_utf8, split_holdout, Split};

use crate::{Common, Direction};

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .context("no output directory: pass --out or set output_dir in the config")?;
    fs::create_dir_all(&dir).map_err(|e| lexiforge::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| lexiforge::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Non-empty, non-comment lines, normalized. With `target_column`, lines
/// containing a TAB contribute their second field.
fn read_words(path: &Path, target_column: bool) -> Result<Vec<String>> {
    let text = read_utf8(path)?;
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| match (target_column, l.split_once('\t')) {
            (true, Some((_, t))) => normalize_word(t),
            _ => normalize_word(l),
        })
        .filter(|w| !w.is_empty())
        .collect())
}

pub fn split(common: &Common, holdout: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(h) = holdout {
        cfg.holdout = h;
    }
    let dir = out_dir(common, Some(&cfg))?;
    let ds = cfg.load_dataset()?;
    if !ds.is_parallel() {
        bail!(lexiforge::Error::InvalidArgument("split needs a parallel pairs file (data.pairs)".into()));
    }
    let ds = split_holdout(&ds, cfg.holdout, cfg.seed)?;
    write(&dir.join("train.tsv"), ds.pairs_tsv(Split::Train))?;
    write(&dir.join("holdout.tsv"), ds.pairs_tsv(Split::Holdout))?;
    write(&dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, Some(&cfg))?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let ds = cfg.load_dataset()?;
    let ds = if ds.is_parallel() && cfg.holdout > 0 {
        split_holdout(&ds, cfg.holdout, cfg.seed)?
    } else {
        ds
    };
    let holdout: String = ds.holdout_pairs().map(|p| format!("{}\n", p.source)).collect();
    write(&dir.join("holdout.txt"), holdout)?;
    let view = ds.train_view();
    let (src, tgt) = (cfg.data.source_language.as_str(), cfg.data.target_language.as_str());
    let (model, trace) = match cfg.model {
        ModelKind::Rnn => {
            let (t, traces) = train_rnn_baseline(&view, src, tgt, &cfg.rnn, cfg.seed)?;
            (Model::Rnn(t), serde_json::to_string_pretty(&traces)?)
        }
        ModelKind::Seq2seq => {
            let (m, trace) = train_seq2seq(&view, src, tgt, &cfg.seq2seq, cfg.seed)?;
            (Model::Seq2Seq(m), serde_json::to_string_pretty(&trace)?)
        }
        ModelKind::Styletransfer => {
            match train_cross_aligned(&view.source_words(), &view.target_words(), [src, tgt], &cfg.style, cfg.seed) {
                Ok((m, stats)) => (Model::Style(m), serde_json::to_string_pretty(&stats)?),
                Err(abort) => {
                    write(&dir.join("loss_trace.json"), serde_json::to_string_pretty(&abort.stats)? + "\n")?;
                    return Err(abort.source.into());
                }
            }
        }
    };
    write(&dir.join("loss_trace.json"), trace + "\n")?;
    checkpoint::save_checkpoint(&model, &cfg, &dir.join("model.cwf"))?;
    Ok(())
}

pub fn generate(common: &Common, ckpt: &Path, input: &Path, count: Option<usize>, direction: Direction) -> Result<()> {
    let (model, stored) = checkpoint::load_checkpoint(ckpt)?;
    let cfg = match &common.config {
        Some(_) => Some(load_config(common)?),
        None => None,
    };
    let dir = out_dir(common, cfg.as_ref())?;
    let seed = common.seed.unwrap_or(stored.seed);
    let words = read_words(input, false)?;
    if words.is_empty() {
        bail!(lexiforge::Error::InvalidArgument(format!("{}: no input words", input.display())));
    }
    let n = count.unwrap_or(words.len());
    let mut rng = rng::stream(seed, Stream::Sample);
    let decode = cfg.as_ref().map_or(stored.decode, |c| c.decode).into();
    let (from, to) = match direction {
        Direction::Forward => (StyleLabel::Y1, StyleLabel::Y2),
        Direction::Reverse => (StyleLabel::Y2, StyleLabel::Y1),
    };
    if direction == Direction::Reverse && !matches!(model, Model::Style(_)) {
        bail!(lexiforge::Error::InvalidArgument("--direction reverse needs a style-transfer checkpoint".into()));
    }
    let mut out = String::new();
    for i in 0..n {
        let w = &words[i % words.len()];
        let proposal = match &model {
            Model::Rnn(t) => t.translate(w, decode, &mut rng)?.word,
            Model::Seq2Seq(m) => m.translate_greedy(w)?.0,
            Model::Style(m) => m.transfer(w, from, to)?,
        };
        out.push_str(&proposal);
        out.push('\n');
    }
    write(&dir.join("proposals.txt"), out)?;
    Ok(())
}

pub struct EvalArgs {
    pub proposals: PathBuf,
    pub training: PathBuf,
    pub reference: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub families: Option<PathBuf>,
    pub model_id: Option<String>,
    pub dataset_id: Option<String>,
    pub trials: usize,
}

pub fn evaluate(common: &Common, args: EvalArgs) -> Result<()> {
    let cfg = match &common.config {
        Some(_) => Some(load_config(common)?),
        None => None,
    };
    let dir = out_dir(common, cfg.as_ref())?;
    let reference_path = args
        .reference
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.data.reference.clone()))
        .context("no reference vocabulary: pass --reference or set data.reference")?;
    let generated = read_words(&args.proposals, false)?;
    let training: HashSet<String> = read_words(&args.training, true)?.into_iter().collect();
    let reference: HashSet<String> = read_words(&reference_path, false)?.into_iter().collect();

    let mut report = eval::compute_vocab_metrics(&generated, &training, &reference);
    report.shape = eval::word_shape_stats(&generated, VowelSet::default_for(&generated).as_ref());
    report.provenance = Provenance {
        model_id: args
            .model_id
            .or_else(|| cfg.as_ref().map(|c| c.model.name().to_string()))
            .unwrap_or_else(|| "model".into()),
        dataset_id: args
            .dataset_id
            .or_else(|| cfg.as_ref().map(|c| c.data.dataset_id.clone()))
            .unwrap_or_default(),
        seed: common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
    };

    let ratings = match &args.ratings {
        Some(p) => eval::summarize_ratings(&eval::parse_ratings(&read_utf8(p)?, p)?, Grouping::Group)?,
        None => Vec::new(),
    };
    let own = ratings.iter().find(|r| r.key == report.provenance.model_id);
    let table = eval::render_metrics_table(&[MetricsRow::from_report(&report, own)]);

    let root = match &args.families {
        Some(p) => {
            let families = eval::parse_root_families(&read_utf8(p)?, p)?;
            Some(eval::root_consistency(&families, &generated, args.trials, report.provenance.seed)?)
        }
        None => None,
    };

    let mut text = eval::render_report(&report);
    if let Some(r) = &root {
        text.push_str(&format!(
            "root_score\t{:.4}\nroot_baseline\t{:.4}\nroot_gap\t{:.4}\n",
            r.score, r.baseline, r.gap
        ));
    }
    write(&dir.join("report.txt"), text)?;
    write(&dir.join("table.txt"), table)?;
    let json = serde_json::json!({ "report": report, "ratings": ratings, "root_consistency": root });
    write(&dir.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(())
}

pub fn inspect(ckpt: &Path) -> Result<()> {
    let bytes = fs::read(ckpt).map_err(|e| lexiforge::Error::Io {
        path: ckpt.to_path_buf(),
        source: e,
    })?;
    let (header, _) = checkpoint::decode_header(&bytes)?;
    print!("{}", checkpoint::describe(&header));
    Ok(())
}
