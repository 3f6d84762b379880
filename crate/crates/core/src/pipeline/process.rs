//! Separator + SOD inference, batch and frame-by-frame.

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::sepnet::{frame_count, overlap_add, OverlapAdd, SepModel, SepStreamer};
use crate::sod::{sod_masking, SodModel};

/// How the second channel is gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SodMode {
    /// Second channel untouched; SOD still runs if a model is given.
    Off,
    /// Zero second-channel frames whose SOD value is below threshold.
    Masking,
    /// Replace SOD values with the ground-truth label (1 dual, 0 single) and mask.
    Oracle { dual: bool },
}

#[derive(Debug, Clone)]
pub struct Processed {
    pub estimates: [AudioBuffer; 2],
    /// Per-frame SOD values; empty when no SOD model ran.
    pub sod: Vec<f64>,
}

fn check_models(sep: &SepModel, sod: Option<&SodModel>, mode: SodMode) -> Result<()> {
    if let Some(s) = sod {
        if s.input_dim != 2 * sep.encoder_dim() {
            return Err(Error::Config(format!(
                "SOD expects {}-wide masks but the separator produces {}",
                s.input_dim,
                2 * sep.encoder_dim()
            )));
        }
    } else if mode == SodMode::Masking {
        return Err(Error::Config("SOD masking needs a SOD model".into()));
    }
    Ok(())
}

/// Whole-utterance inference.
pub fn process_batch(sep: &SepModel, sod: Option<&SodModel>, mixture: &AudioBuffer, mode: SodMode) -> Result<Processed> {
    check_models(sep, sod, mode)?;
    let out = sep.forward(mixture)?;
    let values = match sod {
        Some(m) => m.forward(&out.masks)?.into_iter().map(|o| o.value).collect(),
        None => Vec::new(),
    };
    let [e1, e2] = out.estimates;
    let e2 = match mode {
        SodMode::Off => e2,
        SodMode::Masking | SodMode::Oracle { .. } => {
            let (gate, threshold) = match mode {
                SodMode::Oracle { dual } => (vec![if dual { 1.0 } else { 0.0 }; out.masks.shape()[0]], 0.5),
                _ => (values.clone(), sod.map_or(0.5, |m| m.config.threshold)),
            };
            let masked = sod_masking(&out.frames[1], &gate, threshold)?;
            AudioBuffer::new(mixture.sample_rate, overlap_add(masked.data(), sep.config.hop(), mixture.len()))
        }
    };
    Ok(Processed { estimates: [e1, e2], sod: values })
}

/// Collects hop-sized input blocks into overlapping analysis frames.
#[derive(Debug, Clone)]
pub struct FrameAssembler {
    buf: Vec<f64>,
    hop: usize,
}

impl FrameAssembler {
    pub fn new(frame: usize, hop: usize) -> Self {
        FrameAssembler { buf: Vec::with_capacity(frame + hop), hop }
    }

    /// Appends one block of `hop` samples; returns a full frame once enough input has arrived.
    pub fn push(&mut self, block: &[f64], frame: usize) -> Option<Vec<f64>> {
        debug_assert_eq!(block.len(), self.hop);
        self.buf.extend_from_slice(block);
        if self.buf.len() < frame {
            return None;
        }
        let out = self.buf[..frame].to_vec();
        self.buf.drain(..self.hop);
        Some(out)
    }
}

/// Frame-by-frame inference with constant state, matching [`process_batch`].
pub fn process_stream(sep: &SepModel, sod: Option<&SodModel>, mixture: &AudioBuffer, mode: SodMode) -> Result<Processed> {
    check_models(sep, sod, mode)?;
    let (frame, hop) = (sep.config.frame(), sep.config.hop());
    let n = mixture.len();
    if n < frame {
        return Err(Error::InvalidArgument(format!("input of {n} samples is shorter than one frame")));
    }
    let frames = frame_count(n, hop);
    let mut sep_state = SepStreamer::new(sep);
    let mut sod_state = sod.map(SodModel::streamer);
    let mut asm = FrameAssembler::new(frame, hop);
    let mut ola = [OverlapAdd::new(hop), OverlapAdd::new(hop)];
    let mut out = [Vec::with_capacity(n + frame), Vec::with_capacity(n + frame)];
    let mut values = Vec::with_capacity(frames);
    // Input is fed in hop-sized blocks, zero-padded past the end until every frame is emitted.
    let mut block = vec![0.0; hop];
    let mut emitted = 0;
    let mut pos = 0;
    while emitted < frames {
        block.iter_mut().enumerate().for_each(|(i, b)| *b = mixture.samples.get(pos + i).copied().unwrap_or(0.0));
        pos += hop;
        let Some(input) = asm.push(&block, frame) else { continue };
        let mut f = sep_state.step(&input)?;
        let value = match &mut sod_state {
            Some(s) => {
                let v = s.step(&f.mask)?.value;
                values.push(v);
                v
            }
            None => 1.0,
        };
        let gate = match mode {
            SodMode::Off => true,
            SodMode::Masking => value >= sod.map_or(0.5, |m| m.config.threshold),
            SodMode::Oracle { dual } => dual,
        };
        if !gate {
            f.frames[1].iter_mut().for_each(|v| *v = 0.0);
        }
        for c in 0..2 {
            out[c].extend(ola[c].push(&f.frames[c]));
        }
        emitted += 1;
    }
    let [a, b] = out.map(|mut o| {
        o.truncate(n);
        AudioBuffer::new(mixture.sample_rate, o)
    });
    Ok(Processed { estimates: [a, b], sod: values })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::sepnet::ModelConfig;
    use crate::sod::SodConfig;

    fn models() -> (SepModel, SodModel) {
        let sep = SepModel::new(ModelConfig { encoder_dim: 16, seed: 4, ..ModelConfig::default() }).unwrap();
        let mut sod = SodModel::new(SodConfig { hidden: 8, seed: 1, ..SodConfig::default() }, 32).unwrap();
        // Threshold at the median SOD value of a probe signal so both gate states occur.
        let mut v: Vec<f64> = sod.forward(&sep.forward(&noise(9, 3000)).unwrap().masks).unwrap().iter().map(|o| o.value).collect();
        v.sort_by(f64::total_cmp);
        sod.config.threshold = v[v.len() / 2];
        (sep, sod)
    }

    fn noise(seed: u64, n: usize) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new(SAMPLE_RATE, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn streaming_matches_batch_in_every_mode() {
        let (sep, sod) = models();
        let x = noise(1, 3000);
        for mode in [SodMode::Off, SodMode::Masking, SodMode::Oracle { dual: false }, SodMode::Oracle { dual: true }] {
            let b = process_batch(&sep, Some(&sod), &x, mode).unwrap();
            let s = process_stream(&sep, Some(&sod), &x, mode).unwrap();
            assert_eq!(b.sod.len(), s.sod.len());
            assert!(b.sod.iter().zip(&s.sod).all(|(a, c)| (a - c).abs() < 1e-9));
            for c in 0..2 {
                let worst = b.estimates[c].samples.iter().zip(&s.estimates[c].samples).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
                assert!(worst < 1e-9, "{mode:?} ch{c}: {worst}");
            }
        }
    }

    #[test]
    fn masking_only_touches_channel_two() {
        let (sep, sod) = models();
        let x = noise(2, 2000);
        let off = process_batch(&sep, Some(&sod), &x, SodMode::Off).unwrap();
        let on = process_batch(&sep, Some(&sod), &x, SodMode::Masking).unwrap();
        assert_eq!(off.estimates[0], on.estimates[0]);
        let t = sod.config.threshold;
        assert!(off.sod.iter().any(|v| *v < t) && off.sod.iter().any(|v| *v >= t));
        assert_ne!(off.estimates[1], on.estimates[1]);
        let plain = sep.forward(&x).unwrap();
        assert_eq!(off.estimates[1], plain.estimates[1]);
        let silent = process_batch(&sep, None, &x, SodMode::Oracle { dual: false }).unwrap();
        assert!(silent.estimates[1].samples.iter().all(|v| *v == 0.0));
        assert!(process_batch(&sep, None, &x, SodMode::Masking).is_err());
    }
}
