//! Synthetic dry sources standing in for speech and noise recordings.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SpeechLike,
    NoiseLike,
}

pub const F0_MIN: f64 = 90.0;
pub const F0_MAX: f64 = 300.0;

const RAMP_SECS: f64 = 0.015;
const TOP_HARMONIC_HZ: f64 = 7000.0;

/// Deterministic dry source of `duration` seconds at `fs`, peak-normalised to 1.
pub fn generate_source(kind: SourceKind, seed: u64, duration: f64, fs: u32) -> Result<AudioBuffer> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    let len = (duration * fs as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidArgument("duration shorter than one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match kind {
        SourceKind::SpeechLike => speech_like(&mut rng, len, fs as f64),
        SourceKind::NoiseLike => noise_like(&mut rng, len, fs as f64),
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(AudioBuffer::new(fs, x))
}

/// Base fundamental drawn for a speech-like source with this seed.
pub fn speech_fundamental(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).gen_range(F0_MIN..F0_MAX)
}

/// Magnitude of a second-order resonance centred on `fc` with bandwidth `bw`.
fn resonance(f: f64, fc: f64, bw: f64) -> f64 {
    let u = f / fc;
    1.0 / ((1.0 - u * u).powi(2) + (f * bw / (fc * fc)).powi(2)).sqrt()
}

/// Cosine-phase harmonic complex (a band-limited glottal pulse train) shaped by
/// talker-specific formants that shift slightly from syllable to syllable.
fn speech_like(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let f0 = rng.gen_range(F0_MIN..F0_MAX);
    let tilt = rng.gen_range(0.8..1.4);
    let vib_rate = rng.gen_range(0.5..3.0);
    let vib_depth = rng.gen_range(0.02..0.08);
    let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2500.0), rng.gen_range(2500.0..3500.0)];
    let bandwidths = [rng.gen_range(60.0..120.0), rng.gen_range(80.0..160.0), rng.gen_range(120.0..250.0)];
    let n_harm = (TOP_HARMONIC_HZ / F0_MIN).floor() as usize;

    let (env, syllables) = syllable_envelope(rng, len, fs);
    let mut amps = vec![0.0; n_harm];
    let mut phase = 0.0;
    let mut out = vec![0.0; len];
    let mut next = 0;
    for (i, o) in out.iter_mut().enumerate() {
        if next < syllables.len() && i == syllables[next] {
            // New syllable, new vowel: formants jitter around the talker's means.
            let shift: Vec<f64> = formants.iter().map(|f| f * rng.gen_range(0.85..1.15)).collect();
            for (k, a) in amps.iter_mut().enumerate() {
                let f = (k + 1) as f64 * f0;
                let shape: f64 = shift.iter().zip(&bandwidths).map(|(fc, bw)| resonance(f, *fc, *bw)).sum();
                *a = shape * ((k + 1) as f64).powf(-tilt);
            }
            next += 1;
        }
        let t = i as f64 / fs;
        let f = (f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin())).clamp(F0_MIN, F0_MAX);
        phase = (phase + 2.0 * PI * f / fs) % (2.0 * PI);
        if env[i] == 0.0 {
            continue;
        }
        let top = (TOP_HARMONIC_HZ / f).floor() as usize;
        let mut s = 0.0;
        for (k, a) in amps.iter().enumerate().take(top) {
            s += a * ((k + 1) as f64 * phase).cos();
        }
        *o = env[i] * s;
    }
    out
}

/// Random on/off syllable gating with raised-cosine edges. Redraws until the
/// voiced fraction lies in [0.35, 0.85]. Also returns syllable start samples.
fn syllable_envelope(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> (Vec<f64>, Vec<usize>) {
    let ramp = ((RAMP_SECS * fs) as usize).max(1);
    loop {
        let rate: f64 = rng.gen_range(2.0..8.0);
        let mut env = vec![0.0; len];
        let mut pos = (rng.gen_range(0.0..0.3) * fs) as usize;
        let mut starts = Vec::new();
        while pos < len {
            starts.push(pos);
            let on = (rng.gen_range(0.6..1.4) / rate * fs) as usize;
            let amp = rng.gen_range(0.5..1.0);
            let end = (pos + on).min(len);
            for (j, e) in env[pos..end].iter_mut().enumerate() {
                let edge = j.min(on - 1 - j);
                let w = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
                *e = amp * w;
            }
            let gap = if rng.gen_bool(0.8) { rng.gen_range(0.2..0.6) / rate } else { rng.gen_range(0.3..0.8) };
            pos = end + (gap * fs) as usize;
        }
        let active = env.iter().filter(|v| **v > 0.0).count() as f64 / len as f64;
        if (0.35..=0.85).contains(&active) {
            return (env, starts);
        }
    }
}

fn noise_like(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let cutoff = rng.gen_range(500.0..4000.0);
    let a = (-2.0 * PI * cutoff / fs).exp();
    let white_mix = rng.gen_range(0.05..0.3);
    let mod_rate = rng.gen_range(0.2..1.5);
    let mod_depth = rng.gen_range(0.0..0.4);
    let mod_phase = rng.gen_range(0.0..2.0 * PI);
    let mut lp = 0.0;
    (0..len)
        .map(|i| {
            let w: f64 = rng.sample(rand_distr::StandardNormal);
            lp = a * lp + (1.0 - a) * w;
            let t = i as f64 / fs;
            let m = 1.0 + mod_depth * (2.0 * PI * mod_rate * t + mod_phase).sin();
            m * (lp * 3.0 + white_mix * w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::magnitude_spectrum;

    const FS: u32 = 16_000;

    fn active_fraction(x: &[f64]) -> f64 {
        // 20 ms frames, active when within 30 dB of the loudest frame.
        let frame = 320;
        let energies: Vec<f64> = x.chunks(frame).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let max = energies.iter().cloned().fold(0.0, f64::max);
        energies.iter().filter(|e| **e > max * 1e-3).count() as f64 / energies.len() as f64
    }

    fn lowest_peak_hz(x: &[f64]) -> f64 {
        let n = 1 << 16;
        let mag = magnitude_spectrum(x, n);
        let bin_hz = FS as f64 / n as f64;
        let max = mag.iter().cloned().fold(0.0, f64::max);
        let lo = (60.0 / bin_hz) as usize;
        (lo..mag.len() - 1)
            .find(|&i| mag[i] > 0.3 * max && mag[i] >= mag[i - 1] && mag[i] >= mag[i + 1])
            .map(|i| i as f64 * bin_hz)
            .unwrap()
    }

    #[test]
    fn deterministic_and_unit_peak() {
        for kind in [SourceKind::SpeechLike, SourceKind::NoiseLike] {
            let a = generate_source(kind, 3, 1.0, FS).unwrap();
            let b = generate_source(kind, 3, 1.0, FS).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 16_000);
            assert!((a.peak() - 1.0).abs() < 1e-12);
            assert_ne!(a, generate_source(kind, 4, 1.0, FS).unwrap());
        }
    }

    #[test]
    fn speech_like_activity_in_range() {
        for seed in 0..40 {
            let x = generate_source(SourceKind::SpeechLike, seed, 4.0, FS).unwrap();
            let f = active_fraction(&x.samples);
            assert!((0.3..=0.9).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn fundamentals_are_resolved_spectrally() {
        let mut seeds: Vec<(u64, f64)> = (0..50).map(|s| (s, speech_fundamental(s))).collect();
        seeds.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (seeds[0], seeds[seeds.len() - 1]);
        let p1 = lowest_peak_hz(&generate_source(SourceKind::SpeechLike, lo.0, 4.0, FS).unwrap().samples);
        let p2 = lowest_peak_hz(&generate_source(SourceKind::SpeechLike, hi.0, 4.0, FS).unwrap().samples);
        assert!((p1 - lo.1).abs() < 0.15 * lo.1, "{p1} vs {}", lo.1);
        assert!((p2 - p1).abs() > 20.0, "{p1} {p2}");
    }

    #[test]
    fn rejects_non_positive_duration() {
        assert!(generate_source(SourceKind::NoiseLike, 0, 0.0, FS).is_err());
    }
}
