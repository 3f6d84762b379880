//! Reverberant single- and dual-talker scene synthesis.

mod rir;
mod source;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use rir::{energy_decay_curve_db, image_method_rir, measure_rt60, Rir, RirOptions, MAX_ORDER_PER_AXIS, SPEED_OF_SOUND};
pub use source::{generate_source, speech_fundamental, SourceKind, F0_MAX, F0_MIN};

use crate::audio::{energy, AudioBuffer, SAMPLE_RATE, ZERO_ENERGY};
use crate::dsp::{convolve, derive_seed};
use crate::error::{Error, Result};
use crate::objectives::TargetSet;

pub const ROOM_LEN_RANGE: (f64, f64) = (5.0, 10.0);
pub const ROOM_HEIGHT_RANGE: (f64, f64) = (2.0, 5.0);
pub const RT60_RANGE: (f64, f64) = (0.1, 0.5);
pub const SIR_RANGE_DB: (f64, f64) = (-5.0, 5.0);
pub const SNR_RANGE_DB: (f64, f64) = (5.0, 20.0);
pub const WALL_MARGIN: f64 = 0.5;
/// Sources closer than this to the microphone are redrawn.
pub const MIN_MIC_DISTANCE: f64 = 0.3;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Peak level of the rendered mixture.
pub const MIXTURE_PEAK: f64 = 0.9;

const NOISE_STREAM: u64 = 100;

/// Room and mixing parameters of one scene.
///
/// `source_positions` holds one entry per talker followed by the noise source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_dims: [f64; 3],
    pub rt60: f64,
    pub source_positions: Vec<[f64; 3]>,
    pub mic_position: [f64; 3],
    pub talker_count: usize,
    pub sir_db: Option<f64>,
    pub snr_db: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn noise_position(&self) -> [f64; 3] {
        self.source_positions[self.source_positions.len() - 1]
    }

    /// Smallest distance from any source to any wall.
    pub fn min_wall_distance(&self) -> f64 {
        self.source_positions
            .iter()
            .flat_map(|p| (0..3).flat_map(move |a| [p[a], self.room_dims[a] - p[a]]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let [l, w, h] = self.room_dims;
        let mut problems = Vec::new();
        if !in_range(l, ROOM_LEN_RANGE) || !in_range(w, ROOM_LEN_RANGE) || !in_range(h, ROOM_HEIGHT_RANGE) {
            problems.push(format!("room {:?}", self.room_dims));
        }
        if !in_range(self.rt60, RT60_RANGE) {
            problems.push(format!("rt60 {}", self.rt60));
        }
        if !(1..=2).contains(&self.talker_count) || self.source_positions.len() != self.talker_count + 1 {
            problems.push(format!("talker count {} with {} positions", self.talker_count, self.source_positions.len()));
        }
        match (self.talker_count, self.sir_db) {
            (2, Some(s)) if in_range(s, SIR_RANGE_DB) => {}
            (1, None) => {}
            _ => problems.push(format!("sir {:?} for {} talkers", self.sir_db, self.talker_count)),
        }
        if !in_range(self.snr_db, SNR_RANGE_DB) {
            problems.push(format!("snr {}", self.snr_db));
        }
        if self.mic_position != [l / 2.0, w / 2.0, h / 2.0] {
            problems.push("microphone off centre".into());
        }
        if self.min_wall_distance() < WALL_MARGIN {
            problems.push(format!("source {:.3} m from a wall", self.min_wall_distance()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene {}: {}", self.seed, problems.join("; "))))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Draws a scene deterministically from `seed`.
pub fn sample_scene(seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [uniform(&mut rng, ROOM_LEN_RANGE), uniform(&mut rng, ROOM_LEN_RANGE), uniform(&mut rng, ROOM_HEIGHT_RANGE)];
    let rt60 = uniform(&mut rng, RT60_RANGE);
    let talker_count = if rng.gen_bool(0.5) { 2 } else { 1 };
    let sir = uniform(&mut rng, SIR_RANGE_DB);
    let snr_db = uniform(&mut rng, SNR_RANGE_DB);
    let mic = [room[0] / 2.0, room[1] / 2.0, room[2] / 2.0];

    let mut source_positions = Vec::with_capacity(talker_count + 1);
    for _ in 0..=talker_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let p = [0, 1, 2].map(|a| rng.gen_range(WALL_MARGIN..=room[a] - WALL_MARGIN));
            let d: f64 = (0..3).map(|a| (p[a] - mic[a]).powi(2)).sum::<f64>().sqrt();
            if d >= MIN_MIC_DISTANCE {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or_else(|| {
            Error::Numerical(format!("scene {seed}: no valid source position after {MAX_PLACEMENT_ATTEMPTS} attempts"))
        })?;
        source_positions.push(p);
    }

    Ok(SceneSpec {
        room_dims: room,
        rt60,
        source_positions,
        mic_position: mic,
        talker_count,
        sir_db: (talker_count == 2).then_some(sir),
        snr_db,
        seed,
    })
}

/// RIR from source `index` of `spec` (talkers first, then noise) to the microphone.
pub fn scene_rir(spec: &SceneSpec, index: usize) -> Result<Rir> {
    let pos = *spec
        .source_positions
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("source index {index} out of range")))?;
    image_method_rir(spec.room_dims, pos, spec.mic_position, spec.rt60, SAMPLE_RATE, RirOptions::default())
}

/// Gain for `other` such that `10 log10(E_ref / E(gain * other)) == ratio_db`.
pub fn scale_to_ratio(reference: &[f64], other: &[f64], ratio_db: f64) -> Result<f64> {
    let (er, eo) = (energy(reference), energy(other));
    if er < ZERO_ENERGY || eo < ZERO_ENERGY {
        return Err(Error::ZeroEnergy("cannot set an energy ratio against a silent signal".into()));
    }
    Ok((er / (eo * 10f64.powf(ratio_db / 10.0))).sqrt())
}

/// Energy ratio `10 log10(E_a / E_b)` in dB.
pub fn ratio_db(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (energy(a) / energy(b)).log10()
}

/// Rendered scene. Targets are the reverberant talker images; for single-talker
/// scenes the second target is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub mixture: AudioBuffer,
    pub targets: TargetSet,
    pub noise: AudioBuffer,
    pub spec: SceneSpec,
}

/// Reverberates and mixes dry talkers and noise according to `spec`.
pub fn synthesize_scene(spec: &SceneSpec, dry_sources: &[AudioBuffer], dry_noise: &AudioBuffer) -> Result<SceneBundle> {
    spec.validate()?;
    if dry_sources.len() != spec.talker_count {
        return Err(Error::InvalidArgument(format!(
            "{} dry sources for a {}-talker scene",
            dry_sources.len(),
            spec.talker_count
        )));
    }
    let len = dry_noise.len();
    if dry_sources.iter().any(|s| s.len() != len) || len == 0 {
        return Err(Error::InvalidArgument("dry sources and noise must share a non-zero length".into()));
    }
    if dry_sources.iter().chain([dry_noise]).any(|s| s.sample_rate != SAMPLE_RATE) {
        return Err(Error::InvalidArgument(format!("dry signals must be sampled at {SAMPLE_RATE} Hz")));
    }

    let mut wet: Vec<Vec<f64>> = Vec::with_capacity(2);
    for (i, dry) in dry_sources.iter().enumerate() {
        let rir = scene_rir(spec, i)?;
        wet.push(convolve(&dry.samples, &rir.taps.samples, len));
    }
    let noise_rir = scene_rir(spec, spec.talker_count)?;
    let mut noise = convolve(&dry_noise.samples, &noise_rir.taps.samples, len);

    if let Some(sir) = spec.sir_db {
        let g = scale_to_ratio(&wet[0], &wet[1], sir)?;
        wet[1].iter_mut().for_each(|v| *v *= g);
    } else {
        wet.push(vec![0.0; len]);
    }
    let speech: Vec<f64> = wet[0].iter().zip(&wet[1]).map(|(a, b)| a + b).collect();
    let g = scale_to_ratio(&speech, &noise, spec.snr_db)?;
    noise.iter_mut().for_each(|v| *v *= g);

    let raw_peak = speech.iter().zip(&noise).fold(0.0f64, |m, (s, v)| m.max((s + v).abs()));
    let norm = MIXTURE_PEAK / raw_peak;
    for x in wet.iter_mut().chain([&mut noise]) {
        x.iter_mut().for_each(|v| *v *= norm);
    }
    let mixture: Vec<f64> = (0..len).map(|i| wet[0][i] + wet[1][i] + noise[i]).collect();

    let targets = TargetSet::new(wet.into_iter().map(|w| AudioBuffer::new(SAMPLE_RATE, w)).collect(), spec.talker_count)?;
    Ok(SceneBundle {
        mixture: AudioBuffer::new(SAMPLE_RATE, mixture),
        targets,
        noise: AudioBuffer::new(SAMPLE_RATE, noise),
        spec: spec.clone(),
    })
}

/// Dry talkers and noise for `spec`, derived from its seed.
pub fn dry_signals(spec: &SceneSpec, duration: f64) -> Result<(Vec<AudioBuffer>, AudioBuffer)> {
    let talkers = (0..spec.talker_count)
        .map(|i| generate_source(SourceKind::SpeechLike, derive_seed(spec.seed, 1 + i as u64), duration, SAMPLE_RATE))
        .collect::<Result<Vec<_>>>()?;
    let noise = generate_source(SourceKind::NoiseLike, derive_seed(spec.seed, NOISE_STREAM), duration, SAMPLE_RATE)?;
    Ok((talkers, noise))
}

/// Samples and renders the scene for `seed`.
pub fn render_scene(seed: u64, duration: f64) -> Result<SceneBundle> {
    let spec = sample_scene(seed)?;
    let (talkers, noise) = dry_signals(&spec, duration)?;
    synthesize_scene(&spec, &talkers, &noise)
}

#[cfg(test)]
mod tests;
