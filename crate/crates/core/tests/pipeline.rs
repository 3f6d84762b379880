use std::path::Path;

use unisep::pipeline::{
    cmd_eval, cmd_mix, cmd_train_sep, cmd_train_sod, load_sep_checkpoint, load_sod_checkpoint, load_split, process_batch,
    process_stream, save_sep_checkpoint, EvalOptions, ExperimentConfig, SodMode, Split,
};
use unisep::Error;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(5);
    cfg.data.train_scenes = 6;
    cfg.data.valid_scenes = 1;
    cfg.data.test_scenes = 6;
    cfg.data.duration_s = 0.75;
    cfg.model.encoder_dim = 8;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 3;
    cfg.train.crop_frames = 30;
    cfg.sod.hidden = 4;
    cfg.sod.epochs = 1;
    cfg
}

fn trained(out: &Path) -> ExperimentConfig {
    let cfg = small();
    cmd_mix(&cfg, out).unwrap();
    cmd_train_sep(&cfg, out, false).unwrap();
    cmd_train_sod(&cfg, out).unwrap();
    cfg
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let run = cfg.run_dir(dir.path());
    let a = load_sep_checkpoint(&run.join("sep.ckpt.json")).unwrap();
    assert_eq!(a.epoch, 1);
    let copy = dir.path().join("copy.json");
    save_sep_checkpoint(&copy, &a.model, a.optimizer.as_ref(), a.epoch).unwrap();
    let b = load_sep_checkpoint(&copy).unwrap();
    for (x, y) in a.model.params.tensors.iter().zip(&b.model.params.tensors) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let sod = load_sod_checkpoint(&run.join("sod.ckpt.json")).unwrap();
    assert_eq!(sod.model.input_dim, 2 * cfg.model.encoder_dim);
}

#[test]
fn trained_models_stream_like_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let run = cfg.run_dir(dir.path());
    let sep = load_sep_checkpoint(&run.join("sep.ckpt.json")).unwrap().model;
    let sod = load_sod_checkpoint(&run.join("sod.ckpt.json")).unwrap().model;
    let test = load_split(&cfg.data_dir(dir.path()), Split::Test).unwrap();
    for (_, b) in test.iter().take(2) {
        let x = process_batch(&sep, Some(&sod), &b.mixture, SodMode::Masking).unwrap();
        let y = process_stream(&sep, Some(&sod), &b.mixture, SodMode::Masking).unwrap();
        for c in 0..2 {
            let worst = x.estimates[c].samples.iter().zip(&y.estimates[c].samples).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(worst < 1e-9, "{worst}");
        }
    }
}

#[test]
fn eval_scores_every_test_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let r = cmd_eval(&cfg, dir.path(), EvalOptions { sod_masking: true, oracle_sod: false }).unwrap();
    assert_eq!(r.records.len(), cfg.data.test_scenes);
    let jsonl = std::fs::read_to_string(cfg.run_dir(dir.path()).join("eval_masked.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), cfg.data.test_scenes);
    let n: usize = ["single all", "dual all"].iter().filter_map(|c| r.report.row(c)).map(|row| row.n).sum();
    assert_eq!(n, cfg.data.test_scenes);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_mix(&cfg, dir.path()).unwrap();
    let path = cmd_train_sep(&cfg, dir.path(), false).unwrap().checkpoint;
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"separator\"", "\"sod\"")).unwrap();
    assert!(matches!(load_sep_checkpoint(&path), Err(Error::Data(_))));
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    let e = load_sep_checkpoint(&path).unwrap_err();
    assert_eq!(e.class().exit_code(), 3);
}
