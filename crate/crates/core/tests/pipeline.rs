use std::collections::HashSet;
use std::fs;

use lexiforge::adam::AdamConfig;
use lexiforge::checkpoint::{load_checkpoint, save_checkpoint, Model};
use lexiforge::config::{DataConfig, ExperimentConfig, ModelKind};
use lexiforge::eval::compute_vocab_metrics;
use lexiforge::seq2seq::{train_seq2seq, Seq2SeqConfig};
use lexiforge::text::{load_dataset, split_holdout};

const PAIRS: &str = "# toy lexicon\n\
שלום\thello\n\
כלב\tdog\n\
חתול\tcat\n\
בית\thouse\n\
מים\twater\n\
אש\tfire\n\
עץ\ttree\n\
ספר\tbook\n\
יד\thand\n\
עין\teye\n\
לב\theart\n\
ים\tsea\n";

fn small() -> Seq2SeqConfig {
    Seq2SeqConfig {
        emb_dim: 8,
        hidden: 16,
        batch_size: 4,
        epochs: 5,
        adam: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        ..Seq2SeqConfig::default()
    }
}

#[test]
fn file_to_metrics_with_checkpoint_reload() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    fs::write(&pairs, PAIRS).unwrap();

    let ds = split_holdout(&load_dataset(Some(&pairs), None, None).unwrap(), 3, 7).unwrap();
    assert_eq!(ds.holdout_pairs().count(), 3);
    assert_eq!(ds.train_pairs().count(), 9);
    let view = ds.train_view();

    let (model, trace) = train_seq2seq(&view, "he", "en", &small(), 7).unwrap();
    assert_eq!(trace.epoch_loss.len(), 5);
    assert!(trace.epoch_loss.iter().all(|l| l.is_finite()));

    let holdout: Vec<String> = ds.holdout_pairs().map(|p| p.source.clone()).collect();
    let outputs: Vec<String> = holdout.iter().map(|w| model.translate_greedy(w).unwrap().0).collect();

    let config = ExperimentConfig::new(ModelKind::Seq2seq, DataConfig::default());
    let path = dir.path().join("model.cwf");
    save_checkpoint(&Model::Seq2Seq(model), &config, &path).unwrap();
    let (reloaded, reloaded_config) = load_checkpoint(&path).unwrap();
    // The stored config carries the hyperparameters the model was trained with.
    assert_eq!(reloaded_config.seq2seq, small());
    assert_eq!(reloaded_config.model, ModelKind::Seq2seq);
    let Model::Seq2Seq(reloaded) = reloaded else {
        panic!("expected a seq2seq checkpoint");
    };
    let again: Vec<String> = holdout.iter().map(|w| reloaded.translate_greedy(w).unwrap().0).collect();
    assert_eq!(outputs, again);

    let training: HashSet<String> = view.target_words().into_iter().collect();
    let reference: HashSet<String> = ["hello", "dog", "cat", "fire"].iter().map(|s| s.to_string()).collect();
    let report = compute_vocab_metrics(&outputs, &training, &reference);
    assert_eq!(report.tuw, report.ewns + report.pnw);
    assert!(report.tuw <= outputs.len());
}

#[test]
fn same_seed_trains_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    fs::write(&pairs, PAIRS).unwrap();
    let ds = load_dataset(Some(&pairs), None, None).unwrap();
    let view = ds.train_view();
    let (_, a) = train_seq2seq(&view, "he", "en", &small(), 3).unwrap();
    let (_, b) = train_seq2seq(&view, "he", "en", &small(), 3).unwrap();
    assert_eq!(a.epoch_loss, b.epoch_loss);
}
