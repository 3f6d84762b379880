use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_sep_checkpoint, load_sod_checkpoint, save_sep_checkpoint, save_sod_checkpoint};
use super::manifest::{load_split, write_manifest, ManifestEntry, Split, MANIFEST};
use super::process::{process_batch, process_stream, SodMode};
use super::{scene_seed, ExperimentConfig};
use crate::audio::{read_wav, write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_buffers, EvalRecord, Report};
use crate::scene::{ratio_db, render_scene, SceneBundle};
use crate::sepnet::{train_epoch, TrainState};
use crate::sod::{read_mask_file, sod_train_epoch, write_mask_file, SodExample, SodModel, SodTrainState};

pub const SEP_CHECKPOINT: &str = "sep.ckpt.json";
pub const SOD_CHECKPOINT: &str = "sod.ckpt.json";
pub const SEP_LOG: &str = "train_sep.csv";
pub const SOD_LOG: &str = "train_sod.csv";
const MASK_DIR: &str = "masks";
const MASK_INDEX: &str = "index.jsonl";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSummary {
    pub manifest: PathBuf,
    /// `(split, single-talker scenes, dual-talker scenes, mean SNR)`.
    pub splits: Vec<(Split, usize, usize, f64)>,
}

impl fmt::Display for MixSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (split, single, dual, snr) in &self.splits {
            writeln!(f, "{:<6} {:>5} scenes ({single} single, {dual} dual), mean SNR {snr:.2} dB", split.name(), single + dual)?;
        }
        write!(f, "manifest: {}", self.manifest.display())
    }
}

fn write_scene(dir: &Path, b: &SceneBundle) -> Result<()> {
    create_dir(dir)?;
    write_wav(&dir.join("mix.wav"), &b.mixture)?;
    write_wav(&dir.join("s1.wav"), &b.targets.sources[0])?;
    write_wav(&dir.join("s2.wav"), &b.targets.sources[1])?;
    write_wav(&dir.join("noise.wav"), &b.noise)
}

/// Renders every configured scene and writes WAV files plus `manifest.jsonl`.
pub fn cmd_mix(cfg: &ExperimentConfig, out: &Path) -> Result<MixSummary> {
    cfg.validate()?;
    let data_dir = cfg.data_dir(out);
    create_dir(&data_dir)?;
    let d = &cfg.data;
    let jobs: Vec<(Split, usize)> = [(Split::Train, d.train_scenes), (Split::Valid, d.valid_scenes), (Split::Test, d.test_scenes)]
        .into_iter()
        .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(split, i)| {
            let b = render_scene(scene_seed(cfg.seed, split, i), d.duration_s)?;
            let id = format!("{}-{i:05}", split.name());
            let rel = format!("{}/{id}", split.name());
            write_scene(&data_dir.join(&rel), &b)?;
            let (s1, s2) = (&b.targets.sources[0].samples, &b.targets.sources[1].samples);
            let speech: Vec<f64> = s1.iter().zip(s2).map(|(a, c)| a + c).collect();
            Ok(ManifestEntry {
                id,
                split,
                dir: rel,
                talker_count: b.targets.talker_count,
                snr_db: ratio_db(&speech, &b.noise.samples),
                sir_db: (b.targets.talker_count == 2).then(|| ratio_db(s1, s2)),
                spec: b.spec,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = data_dir.join(MANIFEST);
    write_manifest(&manifest, &entries)?;
    let splits = Split::ALL
        .iter()
        .filter_map(|&s| {
            let e: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == s).collect();
            let single = e.iter().filter(|e| e.talker_count == 1).count();
            (!e.is_empty()).then(|| (s, single, e.len() - single, e.iter().map(|e| e.snr_db).sum::<f64>() / e.len() as f64))
        })
        .collect();
    Ok(MixSummary { manifest, splits })
}

fn load_split_nonempty(cfg: &ExperimentConfig, out: &Path, split: Split) -> Result<Vec<(ManifestEntry, SceneBundle)>> {
    let data = load_split(&cfg.data_dir(out), split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no {} scenes in {}", split.name(), cfg.data_dir(out).display())));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSepOutcome {
    pub checkpoint: PathBuf,
    /// Mean training loss per epoch run by this call.
    pub epoch_losses: Vec<f64>,
    pub epochs_completed: usize,
}

/// Keeps the header and rows whose first column (epoch) is below `epoch`.
fn truncate_log(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let kept: Vec<String> = match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
            .map(str::to_owned)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut text = format!("{header}\n");
    kept.iter().for_each(|l| {
        text.push_str(l);
        text.push('\n');
    });
    std::fs::write(path, text)?;
    Ok(())
}

fn append(path: &Path, text: &str) -> Result<()> {
    std::fs::OpenOptions::new().append(true).open(path)?.write_all(text.as_bytes())?;
    Ok(())
}

/// Trains the separator for `cfg.train.epochs`, checkpointing after every epoch.
/// With `resume`, continues from an existing checkpoint in the run directory.
pub fn cmd_train_sep(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<TrainSepOutcome> {
    cfg.validate()?;
    let data: Vec<SceneBundle> = load_split_nonempty(cfg, out, Split::Train)?.into_iter().map(|(_, b)| b).collect();
    if let Some(b) = data.iter().find(|b| !cfg.loss.objective.accepts(b.targets.talker_count)) {
        return Err(Error::Config(format!(
            "objective {} cannot train on {}-talker scenes (scene seed {})",
            cfg.loss.objective.name(),
            b.targets.talker_count,
            b.spec.seed
        )));
    }
    let run = cfg.run_dir(out);
    create_dir(&run)?;
    let ckpt = run.join(SEP_CHECKPOINT);
    let mut state = if resume && ckpt.exists() {
        let c = load_sep_checkpoint(&ckpt)?;
        if c.model.config != cfg.model {
            return Err(Error::Config(format!("{} was trained with a different [model] section", ckpt.display())));
        }
        let adam = c.optimizer.unwrap_or_else(|| crate::nn::Adam::new(&c.model.params));
        TrainState { model: c.model, adam, epoch: c.epoch }
    } else {
        TrainState::new(crate::sepnet::SepModel::new(cfg.model.clone())?)
    };
    let log = run.join(SEP_LOG);
    truncate_log(&log, "epoch,step,loss,lr", state.epoch)?;
    let mut losses = Vec::new();
    while state.epoch < cfg.train.epochs {
        let t0 = Instant::now();
        let report = train_epoch(&mut state, &data, &cfg.loss, &cfg.train)?;
        let rows: String = report.steps.iter().map(|(s, l, lr)| format!("{},{s},{l},{lr}\n", report.epoch)).collect();
        append(&log, &rows)?;
        save_sep_checkpoint(&ckpt, &state.model, Some(&state.adam), state.epoch)?;
        log::info!("separator epoch {} loss {:.4} ({:.1} s)", report.epoch, report.mean_loss, t0.elapsed().as_secs_f64());
        losses.push(report.mean_loss);
    }
    if !ckpt.exists() {
        save_sep_checkpoint(&ckpt, &state.model, Some(&state.adam), state.epoch)?;
    }
    Ok(TrainSepOutcome { checkpoint: ckpt, epoch_losses: losses, epochs_completed: state.epoch })
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("missing file(s): {}", missing.join(", "))))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskIndexEntry {
    id: String,
    file: String,
    frames: usize,
    label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSodOutcome {
    pub checkpoint: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub cached_masks: usize,
}

/// Caches frozen-separator masks over the training split, then trains the SOD model.
pub fn cmd_train_sod(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSodOutcome> {
    cfg.validate()?;
    let run = cfg.run_dir(out);
    let sep_path = run.join(SEP_CHECKPOINT);
    require(&[&sep_path])?;
    let sep = load_sep_checkpoint(&sep_path)?.model;
    let data = load_split_nonempty(cfg, out, Split::Train)?;
    let mask_dir = run.join(MASK_DIR);
    create_dir(&mask_dir)?;
    let index: Vec<MaskIndexEntry> = data
        .par_iter()
        .map(|(e, b)| {
            let masks = sep.forward(&b.mixture)?.masks;
            let file = format!("{}.bin", e.id);
            write_mask_file(&mask_dir.join(&file), &masks)?;
            Ok(MaskIndexEntry { id: e.id.clone(), file, frames: masks.shape()[0], label: (b.targets.talker_count == 2) as u8 })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for e in &index {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    std::fs::write(mask_dir.join(MASK_INDEX), text)?;

    let examples: Vec<SodExample> = index
        .iter()
        .map(|e| Ok(SodExample { masks: read_mask_file(&mask_dir.join(&e.file))?, label: e.label as f64 }))
        .collect::<Result<_>>()?;
    let mut state = SodTrainState::new(SodModel::new(cfg.sod.clone(), 2 * sep.encoder_dim())?);
    let log = run.join(SOD_LOG);
    std::fs::write(&log, "epoch,loss\n")?;
    let ckpt = run.join(SOD_CHECKPOINT);
    let mut losses = Vec::new();
    for _ in 0..cfg.sod.epochs {
        let loss = sod_train_epoch(&mut state, &examples)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("SOD epoch {}: non-finite loss", state.epoch)));
        }
        append(&log, &format!("{},{loss}\n", state.epoch - 1))?;
        save_sod_checkpoint(&ckpt, &state.model, Some(&state.adam), state.epoch)?;
        log::info!("SOD epoch {} BCE {:.4}", state.epoch - 1, loss);
        losses.push(loss);
    }
    if !ckpt.exists() {
        save_sod_checkpoint(&ckpt, &state.model, Some(&state.adam), state.epoch)?;
    }
    Ok(TrainSodOutcome { checkpoint: ckpt, epoch_losses: losses, cached_masks: index.len() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub sod_masking: bool,
    /// Use ground-truth talker counts in place of SOD decisions.
    pub oracle_sod: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: Report,
    pub records: Vec<EvalRecord>,
    pub report_path: PathBuf,
}

/// Scores the test split and writes text, CSV and per-scene JSONL reports.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, opts: EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    let run = cfg.run_dir(out);
    let (sep_path, sod_path) = (run.join(SEP_CHECKPOINT), run.join(SOD_CHECKPOINT));
    let test_manifest = cfg.data_dir(out).join(MANIFEST);
    if opts.oracle_sod {
        require(&[&test_manifest, &sep_path])?;
    } else {
        require(&[&test_manifest, &sep_path, &sod_path])?;
    }
    let sep = load_sep_checkpoint(&sep_path)?.model;
    let sod = if sod_path.exists() { Some(load_sod_checkpoint(&sod_path)?.model) } else { None };
    let data = load_split_nonempty(cfg, out, Split::Test)?;
    let warmup = cfg.sod.warmup_frames(sep.config.hop(), SAMPLE_RATE);
    let threshold = sod.as_ref().map_or(cfg.sod.threshold, |m| m.config.threshold);
    let records: Vec<EvalRecord> = data
        .par_iter()
        .map(|(_, b)| {
            let dual = b.targets.talker_count == 2;
            let mode = match (opts.sod_masking, opts.oracle_sod) {
                (false, _) => SodMode::Off,
                (true, false) => SodMode::Masking,
                (true, true) => SodMode::Oracle { dual },
            };
            let p = process_batch(&sep, sod.as_ref(), &b.mixture, mode)?;
            let decisions: Vec<bool> = if opts.oracle_sod {
                vec![dual; crate::sepnet::frame_count(b.mixture.len(), sep.config.hop())]
            } else {
                p.sod.iter().map(|v| *v >= threshold).collect()
            };
            score_buffers(b, &p.estimates, Some((&decisions, warmup)))
        })
        .collect::<Result<_>>()?;
    let report = aggregate(&records)?;
    let suffix = match (opts.sod_masking, opts.oracle_sod) {
        (false, false) => "",
        (true, false) => "_masked",
        (false, true) => "_oracle",
        (true, true) => "_oracle_masked",
    };
    create_dir(&run)?;
    let report_path = run.join(format!("eval{suffix}.txt"));
    std::fs::write(&report_path, report.to_text())?;
    std::fs::write(run.join(format!("eval{suffix}.csv")), report.to_csv())?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    std::fs::write(run.join(format!("eval{suffix}.jsonl")), jsonl)?;
    Ok(EvalOutcome { report, records, report_path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub out_dir: PathBuf,
    pub frames: usize,
    /// Processed frames per second divided by the frame rate of the input.
    pub real_time_factor: f64,
}

/// Runs the frame-by-frame pipeline with SOD masking on one WAV file.
pub fn cmd_stream(cfg: &ExperimentConfig, out: &Path, input: &Path) -> Result<StreamOutcome> {
    cfg.validate()?;
    let run = cfg.run_dir(out);
    let (sep_path, sod_path) = (run.join(SEP_CHECKPOINT), run.join(SOD_CHECKPOINT));
    require(&[input, &sep_path, &sod_path])?;
    let mixture = read_wav(input)?;
    let sep = load_sep_checkpoint(&sep_path)?.model;
    let sod = load_sod_checkpoint(&sod_path)?.model;
    let t0 = Instant::now();
    let p = process_stream(&sep, Some(&sod), &mixture, SodMode::Masking)?;
    let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
    let frames = p.sod.len();
    let frame_rate = SAMPLE_RATE as f64 / sep.config.hop() as f64;
    let real_time_factor = frames as f64 / elapsed / frame_rate;

    let dir = run.join("stream");
    create_dir(&dir)?;
    write_wav(&dir.join("ch1.wav"), &p.estimates[0])?;
    write_wav(&dir.join("ch2.wav"), &p.estimates[1])?;
    let mut trace = String::from("frame,time_s,sod,overlap\n");
    for (t, v) in p.sod.iter().enumerate() {
        let time = (t * sep.config.hop() + sep.config.frame()) as f64 / SAMPLE_RATE as f64;
        trace.push_str(&format!("{t},{time},{v},{}\n", (*v >= sod.config.threshold) as u8));
    }
    std::fs::write(dir.join("sod_trace.csv"), trace)?;
    Ok(StreamOutcome { out_dir: dir, frames, real_time_factor })
}
