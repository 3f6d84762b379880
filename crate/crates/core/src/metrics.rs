//! Evaluation scores and per-condition report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::{energy, AudioBuffer, ZERO_ENERGY};
use crate::error::{Error, Result};
use crate::scene::SceneBundle;

pub const EVAL_EPSILON: f64 = 1e-8;

/// SNR bucket edges in dB: `[5, 10)`, `[10, 15)`, `[15, 20]`.
pub const SNR_BUCKETS: [(f64, f64); 3] = [(5.0, 10.0), (10.0, 15.0), (15.0, 20.0)];

/// SI-SDR of `s_hat` against `s`, in dB.
pub fn eval_si_sdr(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::shape("eval_si_sdr", format!("target {} vs estimate {} samples", s.len(), s_hat.len())));
    }
    let e = energy(s);
    if e < ZERO_ENERGY {
        return Err(Error::ZeroEnergy("SI-SDR is undefined for a zero-energy target".into()));
    }
    let alpha = s.iter().zip(s_hat).map(|(a, b)| a * b).sum::<f64>() / e;
    let distortion: f64 = s.iter().zip(s_hat).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    Ok(10.0 * ((alpha * alpha * e) / (distortion + EVAL_EPSILON) + EVAL_EPSILON).log10())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl DetectionCounts {
    pub fn record(&mut self, decision: bool, label: bool) {
        match (decision, label) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &DetectionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let d = self.total();
        (d > 0).then(|| (self.tp + self.tn) as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_seed: u64,
    pub talker_count: usize,
    /// SI-SDR per talker, in target order.
    pub si_sdr: Vec<f64>,
    /// SI-SDR of the unprocessed mixture per talker.
    pub si_sdr_input: Vec<f64>,
    pub si_sdri: f64,
    /// Single-talker only: the weaker channel's SI-SDR against the talker.
    pub si_sdr_worse_channel: Option<f64>,
    pub snr_db: f64,
    pub detection: DetectionCounts,
}

impl EvalRecord {
    pub fn mean_si_sdr(&self) -> f64 {
        self.si_sdr.iter().sum::<f64>() / self.si_sdr.len() as f64
    }
}

/// Scores two output channels against `bundle`. Dual-talker scenes use the
/// better channel assignment; single-talker scenes keep the better channel.
/// `sod` holds per-frame overlap decisions and the number of warm-up frames to skip.
pub fn score_scene(bundle: &SceneBundle, estimates: [&[f64]; 2], sod: Option<(&[bool], usize)>) -> Result<EvalRecord> {
    let y = &bundle.mixture.samples;
    let talkers = bundle.targets.talker_count;
    let src = |i: usize| bundle.targets.sources[i].samples.as_slice();
    let (si_sdr, si_sdr_input, worse) = match talkers {
        1 => {
            let a = eval_si_sdr(src(0), estimates[0])?;
            let b = eval_si_sdr(src(0), estimates[1])?;
            (vec![a.max(b)], vec![eval_si_sdr(src(0), y)?], Some(a.min(b)))
        }
        2 => {
            let direct = [eval_si_sdr(src(0), estimates[0])?, eval_si_sdr(src(1), estimates[1])?];
            let swapped = [eval_si_sdr(src(0), estimates[1])?, eval_si_sdr(src(1), estimates[0])?];
            let best = if swapped[0] + swapped[1] > direct[0] + direct[1] { swapped } else { direct };
            (best.to_vec(), vec![eval_si_sdr(src(0), y)?, eval_si_sdr(src(1), y)?], None)
        }
        n => return Err(Error::InvalidArgument(format!("cannot score a {n}-talker scene"))),
    };
    let si_sdri = si_sdr.iter().zip(&si_sdr_input).map(|(a, b)| a - b).sum::<f64>() / si_sdr.len() as f64;
    let mut detection = DetectionCounts::default();
    if let Some((decisions, warmup)) = sod {
        for &d in decisions.iter().skip(warmup) {
            detection.record(d, talkers == 2);
        }
    }
    Ok(EvalRecord {
        scene_seed: bundle.spec.seed,
        talker_count: talkers,
        si_sdr,
        si_sdr_input,
        si_sdri,
        si_sdr_worse_channel: worse,
        snr_db: bundle.spec.snr_db,
        detection,
    })
}

/// Scores a separated `AudioBuffer` pair.
pub fn score_buffers(bundle: &SceneBundle, estimates: &[AudioBuffer; 2], sod: Option<(&[bool], usize)>) -> Result<EvalRecord> {
    score_scene(bundle, [&estimates[0].samples, &estimates[1].samples], sod)
}

pub fn snr_bucket(snr_db: f64) -> Option<usize> {
    SNR_BUCKETS.iter().position(|&(lo, hi)| snr_db >= lo && (snr_db < hi || (hi == SNR_BUCKETS[2].1 && snr_db <= hi)))
}

fn bucket_label(i: usize) -> String {
    format!("{}-{} dB", SNR_BUCKETS[i].0, SNR_BUCKETS[i].1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub n: usize,
    pub si_sdr: f64,
    pub si_sdri: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Conditions whose mean SI-SDRi dropped relative to the next-lower SNR bucket.
    pub non_monotone: Vec<String>,
}

fn summarise(condition: String, group: &[&EvalRecord]) -> ReportRow {
    let n = group.len();
    let mut det = DetectionCounts::default();
    group.iter().for_each(|r| det.merge(&r.detection));
    ReportRow {
        condition,
        n,
        si_sdr: group.iter().map(|r| r.mean_si_sdr()).sum::<f64>() / n as f64,
        si_sdri: group.iter().map(|r| r.si_sdri).sum::<f64>() / n as f64,
        tpr: det.tpr(),
        tnr: det.tnr(),
    }
}

/// Means per talker count and SNR bucket, plus per-talker-count totals.
pub fn aggregate(records: &[EvalRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Data("no evaluation records to aggregate".into()));
    }
    let mut rows = Vec::new();
    let mut non_monotone = Vec::new();
    for (talkers, name) in [(1, "single"), (2, "dual")] {
        let mut prev: Option<(String, f64)> = None;
        for b in 0..SNR_BUCKETS.len() {
            let condition = format!("{name} {}", bucket_label(b));
            let group: Vec<&EvalRecord> =
                records.iter().filter(|r| r.talker_count == talkers && snr_bucket(r.snr_db) == Some(b)).collect();
            if group.is_empty() {
                log::warn!("no records for {condition}; row omitted");
                continue;
            }
            let row = summarise(condition.clone(), &group);
            if let Some((p, v)) = &prev {
                if row.si_sdri < *v {
                    non_monotone.push(format!("{condition} < {p}"));
                }
            }
            prev = Some((condition, row.si_sdri));
            rows.push(row);
        }
        let all: Vec<&EvalRecord> = records.iter().filter(|r| r.talker_count == talkers).collect();
        if all.is_empty() {
            log::warn!("no {name}-talker records; row omitted");
        } else {
            rows.push(summarise(format!("{name} all"), &all));
        }
    }
    Ok(Report { rows, non_monotone })
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl Report {
    pub fn row(&self, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<18} {:>5} {:>9} {:>9} {:>7} {:>7}\n", "condition", "n", "SI-SDR", "SI-SDRi", "TPR%", "TNR%");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:>5} {:>9.2} {:>9.2} {:>7} {:>7}",
                r.condition,
                r.n,
                r.si_sdr,
                r.si_sdri,
                opt_pct(r.tpr),
                opt_pct(r.tnr)
            );
        }
        for f in &self.non_monotone {
            let _ = writeln!(out, "note: SI-SDRi not increasing with SNR: {f}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,n,si_sdr,si_sdri,tpr,tnr\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{},{}", r.condition, r.n, r.si_sdr, r.si_sdri, opt(r.tpr), opt(r.tnr));
        }
        out
    }
}
