use super::*;

const DUR: f64 = 1.0;

#[test]
fn sampling_is_deterministic() {
    assert_eq!(sample_scene(42).unwrap(), sample_scene(42).unwrap());
    assert_ne!(sample_scene(42).unwrap(), sample_scene(43).unwrap());
}

#[test]
fn ten_thousand_samples_respect_ranges() {
    let n = 10_000;
    let mut dual = 0;
    let mut min_wall = f64::INFINITY;
    for seed in 0..n {
        let s = sample_scene(seed).unwrap();
        s.validate().unwrap();
        min_wall = min_wall.min(s.min_wall_distance());
        if s.talker_count == 2 {
            dual += 1;
        }
    }
    assert!(min_wall >= WALL_MARGIN);
    let frac = dual as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn scale_to_ratio_closed_forms() {
    let a = vec![1.0, -1.0, 0.5];
    let b = vec![-0.5, 1.0, 1.0];
    assert!((scale_to_ratio(&a, &b, 20.0).unwrap() - 0.1).abs() < 1e-15);
    assert!((scale_to_ratio(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-15);
    for r in [-7.3, 0.0, 3.3, 18.0] {
        let other = [0.3, 0.1, -2.0];
        let g = scale_to_ratio(&a, &other, r).unwrap();
        let scaled: Vec<f64> = other.iter().map(|v| v * g).collect();
        assert!((ratio_db(&a, &scaled) - r).abs() < 1e-9);
    }
    assert!(matches!(scale_to_ratio(&a, &[0.0; 3], 0.0), Err(Error::ZeroEnergy(_))));
}

fn find_seed(talkers: usize) -> u64 {
    (0..).find(|&s| sample_scene(s).unwrap().talker_count == talkers).unwrap()
}

#[test]
fn dual_talker_scene_hits_sir_and_snr() {
    let b = render_scene(find_seed(2), DUR).unwrap();
    let s = &b.targets.sources;
    assert!((ratio_db(&s[0].samples, &s[1].samples) - b.spec.sir_db.unwrap()).abs() < 1e-6);
    let speech: Vec<f64> = s[0].samples.iter().zip(&s[1].samples).map(|(a, c)| a + c).collect();
    assert!((ratio_db(&speech, &b.noise.samples) - b.spec.snr_db).abs() < 1e-6);
    for i in 0..b.mixture.len() {
        assert_eq!(b.mixture.samples[i], s[0].samples[i] + s[1].samples[i] + b.noise.samples[i]);
    }
    assert!((b.mixture.peak() - MIXTURE_PEAK).abs() < 1e-9);
}

#[test]
fn single_talker_scene_has_silent_second_target() {
    let b = render_scene(find_seed(1), DUR).unwrap();
    assert_eq!(b.targets.talker_count, 1);
    assert!(b.targets.sources[1].samples.iter().all(|v| *v == 0.0));
    assert!((ratio_db(&b.targets.sources[0].samples, &b.noise.samples) - b.spec.snr_db).abs() < 1e-6);
    let residual = b
        .mixture
        .samples
        .iter()
        .zip(&b.targets.sources[0].samples)
        .zip(&b.noise.samples)
        .map(|((m, s), v)| m - (s + 0.0 + v))
        .fold(0.0f64, |a, r| a.max(r.abs()));
    assert_eq!(residual, 0.0);
}

#[test]
fn rendering_is_bit_reproducible() {
    let a = render_scene(7, 0.5).unwrap();
    let b = render_scene(7, 0.5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scene_rirs_match_rt60_and_delay() {
    for seed in 0..5 {
        let spec = sample_scene(seed).unwrap();
        for i in 0..spec.source_positions.len() {
            let rir = scene_rir(&spec, i).unwrap();
            let measured = measure_rt60(&rir.taps.samples, SAMPLE_RATE).unwrap();
            assert!((measured / spec.rt60 - 1.0).abs() <= 0.25, "seed {seed} src {i}: {measured} vs {}", spec.rt60);
            let p = spec.source_positions[i];
            let d: f64 = (0..3).map(|a| (p[a] - spec.mic_position[a]).powi(2)).sum::<f64>().sqrt();
            let expected = d / SPEED_OF_SOUND * SAMPLE_RATE as f64;
            assert!((rir.direct_delay_samples as f64 - expected).abs() <= 1.0);
        }
    }
}

#[test]
fn synthesis_rejects_mismatched_inputs() {
    let spec = sample_scene(find_seed(2)).unwrap();
    let (talkers, noise) = dry_signals(&spec, DUR).unwrap();
    assert!(synthesize_scene(&spec, &talkers[..1], &noise).is_err());
    let short = noise.segment(0, 100);
    assert!(synthesize_scene(&spec, &talkers, &short).is_err());
}
