//! Image-source room impulse responses for shoebox rooms.

use std::f64::consts::PI;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Most wall reflections an image may accumulate along one axis.
pub const MAX_ORDER_PER_AXIS: u32 = 30;

/// Room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: AudioBuffer,
    pub direct_delay_samples: usize,
    /// Uniform wall pressure-reflection coefficient used for the taps.
    pub reflection: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirOptions {
    /// Per-axis reflection cap. `0` keeps the direct path only.
    pub max_order: u32,
    /// Refine the reflection coefficient until the measured T20 decay matches
    /// the requested RT60.
    pub calibrate: bool,
}

impl Default for RirOptions {
    fn default() -> Self {
        RirOptions { max_order: MAX_ORDER_PER_AXIS, calibrate: true }
    }
}

/// One image source: arrival tap, number of wall reflections, spherical gain.
struct Image {
    tap: usize,
    reflections: u32,
    gain: f64,
}

fn enumerate_images(room: [f64; 3], source: [f64; 3], mic: [f64; 3], fs: f64, len: usize, cap: u32) -> Vec<Image> {
    let reach = len as f64 / fs * SPEED_OF_SOUND;
    let orders: Vec<i64> = (0..3)
        .map(|a| (reach / (2.0 * room[a])).ceil() as i64 + 1)
        .collect();
    // Per-axis candidate offsets (signed distance to the mic, reflection count).
    let axis = |a: usize| -> Vec<(f64, u32)> {
        let mut out = Vec::new();
        for n in -orders[a]..=orders[a] {
            for q in 0..2i64 {
                let pos = (1 - 2 * q) as f64 * source[a] + 2.0 * n as f64 * room[a];
                let refl = ((n - q).abs() + n.abs()) as u32;
                if refl > cap {
                    continue;
                }
                out.push((pos - mic[a], refl));
            }
        }
        out
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let limit = len as f64 / fs * SPEED_OF_SOUND;
    let mut images = Vec::new();
    for &(dx, rx) in &xs {
        if dx.abs() > limit {
            continue;
        }
        for &(dy, ry) in &ys {
            let dxy = dx * dx + dy * dy;
            if dxy > limit * limit {
                continue;
            }
            for &(dz, rz) in &zs {
                let dist = (dxy + dz * dz).sqrt();
                let tap = (dist / SPEED_OF_SOUND * fs).round() as usize;
                if tap >= len {
                    continue;
                }
                images.push(Image { tap, reflections: rx + ry + rz, gain: 1.0 / (4.0 * PI * dist) });
            }
        }
    }
    images
}

fn render(images: &[Image], beta: f64, len: usize) -> Vec<f64> {
    let max_refl = images.iter().map(|i| i.reflections).max().unwrap_or(0) as usize;
    let mut powers = Vec::with_capacity(max_refl + 1);
    let mut p = 1.0;
    for _ in 0..=max_refl {
        powers.push(p);
        p *= beta;
    }
    let mut taps = vec![0.0; len];
    for img in images {
        taps[img.tap] += powers[img.reflections as usize] * img.gain;
    }
    taps
}

/// Image-method RIR between `source` and `mic` in a `room` (L, W, H metres).
///
/// The RIR spans the direct-path delay plus `rt60 * fs` samples. Arrival
/// times are rounded to the nearest sample.
pub fn image_method_rir(
    room: [f64; 3],
    source: [f64; 3],
    mic: [f64; 3],
    rt60: f64,
    fs: u32,
    opts: RirOptions,
) -> Result<Rir> {
    if !(rt60 > 0.0) {
        return Err(Error::InvalidArgument(format!("rt60 must be positive, got {rt60}")));
    }
    for a in 0..3 {
        let inside = |p: [f64; 3]| p[a] > 0.0 && p[a] < room[a];
        if !inside(source) || !inside(mic) {
            return Err(Error::InvalidArgument("source and microphone must lie inside the room".into()));
        }
    }
    let direct: f64 = (0..3).map(|a| (source[a] - mic[a]).powi(2)).sum::<f64>().sqrt();
    if direct < 1e-3 {
        return Err(Error::InvalidArgument(format!("degenerate geometry: source {direct:.1e} m from the microphone")));
    }
    let fs_f = fs as f64;
    let direct_delay = (direct / SPEED_OF_SOUND * fs_f).round() as usize;
    let len = direct_delay + (rt60 * fs_f).ceil() as usize + 1;
    let images = enumerate_images(room, source, mic, fs_f, len, opts.max_order);

    // Eyring: RT60 = 0.161 V / (-S ln β²).
    let [l, w, h] = room;
    let volume = l * w * h;
    let surface = 2.0 * (l * w + l * h + w * h);
    let mut log_beta = -0.161 * volume / (2.0 * surface * rt60);
    let mut beta = log_beta.exp();
    let mut taps = render(&images, beta, len);

    if opts.calibrate && opts.max_order > 0 {
        let mut best = (f64::INFINITY, beta, taps.clone());
        for _ in 0..12 {
            let Some(measured) = measure_rt60(&taps, fs) else { break };
            let miss = (measured / rt60 - 1.0).abs();
            if miss < best.0 {
                best = (miss, beta, taps.clone());
            }
            if miss < 0.02 {
                break;
            }
            // Decay time scales roughly with 1 / -ln β.
            log_beta = (log_beta * measured / rt60).clamp(-20.0, -1e-4);
            beta = log_beta.exp();
            taps = render(&images, beta, len);
        }
        beta = best.1;
        taps = best.2;
    }

    Ok(Rir { taps: AudioBuffer::new(fs, taps), direct_delay_samples: direct_delay, reflection: beta })
}

/// Schroeder backward-integrated energy decay curve in dB re. total energy.
pub fn energy_decay_curve_db(taps: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| if e > 0.0 && total > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}

/// RT60 extrapolated from a least-squares fit of the -5 dB to -25 dB span of the
/// decay curve (T20). `None` when the span has fewer than three samples.
pub fn measure_rt60(taps: &[f64], fs: u32) -> Option<f64> {
    let edc = energy_decay_curve_db(taps);
    let start = edc.iter().position(|&d| d <= -5.0)?;
    let end = edc.iter().position(|&d| d <= -25.0)?;
    if end < start + 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = (start..=end)
        .filter(|&i| edc[i].is_finite())
        .map(|i| (i as f64 / fs as f64, edc[i]))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}
