//! Speaker-overlap detection on separator masks.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, Tensor};
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{affine, collect_grads, Adam, GruLayer, GruScratch, Init, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SodConfig {
    pub hidden: usize,
    pub threshold: f64,
    pub warmup_ms: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SodConfig {
    fn default() -> Self {
        SodConfig { hidden: 16, threshold: 0.5, warmup_ms: 500.0, epochs: 10, batch_size: 8, learning_rate: 1e-3, seed: 0 }
    }
}

impl SodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 4 {
            return Err(Error::Config(format!("sod hidden size must be at least 4, got {}", self.hidden)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("sod threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.warmup_ms >= 0.0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("sod warmup, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of leading frames excluded from evaluation.
    pub fn warmup_frames(&self, hop: usize, sample_rate: u32) -> usize {
        let samples = (self.warmup_ms * sample_rate as f64 / 1000.0).round() as usize;
        samples.div_ceil(hop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SodFrameOutput {
    pub frame_index: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
struct Layout {
    ff1_w: usize,
    ff1_b: usize,
    grus: [GruLayer; 2],
    ff2_w: usize,
    ff2_b: usize,
}

/// `sigmoid(FF(relu(GRU(GRU(relu(FF(m)))))))` per frame.
#[derive(Debug, Clone)]
pub struct SodModel {
    pub config: SodConfig,
    pub input_dim: usize,
    pub params: ParamSet,
    layout: Layout,
}

impl SodModel {
    pub fn new(config: SodConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || input_dim % 2 != 0 {
            return Err(Error::Config(format!("sod input must be 2K wide, got {input_dim}")));
        }
        let h = config.hidden;
        let mut init = Init::new(config.seed);
        let mut params = ParamSet::default();
        let ff1_w = params.push("ff1.w", init.uniform(&[input_dim, h], input_dim));
        let ff1_b = params.push("ff1.b", init.uniform(&[h], input_dim));
        let grus = [
            GruLayer::register(&mut params, &mut init, "gru.0", h, h),
            GruLayer::register(&mut params, &mut init, "gru.1", h, h),
        ];
        let ff2_w = params.push("ff2.w", init.uniform(&[h, 1], h));
        let ff2_b = params.push("ff2.b", init.uniform(&[1], h));
        Ok(SodModel { config, input_dim, params, layout: Layout { ff1_w, ff1_b, grus, ff2_w, ff2_b } })
    }

    pub fn from_params(config: SodConfig, input_dim: usize, params: ParamSet) -> Result<Self> {
        let mut m = SodModel::new(config, input_dim)?;
        m.params.check_layout(&params)?;
        m.params = params;
        Ok(m)
    }

    /// Frame probabilities `[steps * batch, 1]` for time-major mask rows.
    pub fn forward_graph(&self, g: &mut Graph, p: &[NodeId], masks: NodeId, batch: usize) -> Result<NodeId> {
        let width = g.shape(masks).get(1).copied().unwrap_or(0);
        if width != self.input_dim {
            return Err(Error::shape("sod", format!("mask width {width}, model expects {}", self.input_dim)));
        }
        let l = &self.layout;
        let x = g.matmul(masks, p[l.ff1_w])?;
        let x = g.add(x, p[l.ff1_b])?;
        let mut h = g.relu(x)?;
        for gru in &l.grus {
            h = gru.graph(g, p, h, batch)?;
        }
        let h = g.relu(h)?;
        let y = g.matmul(h, p[l.ff2_w])?;
        let y = g.add(y, p[l.ff2_b])?;
        g.sigmoid(y)
    }

    /// Batch evaluation over one utterance's `[frames, 2K]` masks.
    pub fn forward(&self, masks: &Tensor) -> Result<Vec<SodFrameOutput>> {
        if masks.rank() != 2 || masks.shape()[1] != self.input_dim {
            return Err(Error::shape("sod", format!("masks {:?}, model expects width {}", masks.shape(), self.input_dim)));
        }
        if masks.shape()[0] == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.params.tensors.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
        let m = g.constant(masks.clone())?;
        let y = self.forward_graph(&mut g, &p, m, 1)?;
        Ok(g.value(y).data().iter().enumerate().map(|(frame_index, &value)| SodFrameOutput { frame_index, value }).collect())
    }

    pub fn streamer(&self) -> SodStreamer<'_> {
        SodStreamer { model: self, hidden: [vec![0.0; self.config.hidden], vec![0.0; self.config.hidden]], frame: 0, scratch: GruScratch::default() }
    }
}

/// Frame-wise SOD with carried GRU state.
#[derive(Debug, Clone)]
pub struct SodStreamer<'a> {
    model: &'a SodModel,
    hidden: [Vec<f64>; 2],
    frame: usize,
    scratch: GruScratch,
}

impl SodStreamer<'_> {
    pub fn step(&mut self, mask: &[f64]) -> Result<SodFrameOutput> {
        let m = self.model;
        if mask.len() != m.input_dim {
            return Err(Error::shape("sod", format!("mask of {} values, expected {}", mask.len(), m.input_dim)));
        }
        let l = &m.layout;
        let mut x = Vec::new();
        affine(mask, &m.params.tensors[l.ff1_w], Some(&m.params.tensors[l.ff1_b]), &mut x);
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        for (gru, h) in l.grus.iter().zip(self.hidden.iter_mut()) {
            gru.step(&m.params, &x, h, &mut self.scratch);
            x.clone_from(h);
        }
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut y = Vec::new();
        affine(&x, &m.params.tensors[l.ff2_w], Some(&m.params.tensors[l.ff2_b]), &mut y);
        let out = SodFrameOutput { frame_index: self.frame, value: sigmoid(y[0]) };
        self.frame += 1;
        Ok(out)
    }
}

/// Binary cross-entropy in nats of a mean probability against a 0/1 label.
pub fn utterance_bce(p_mean: f64, label: f64) -> f64 {
    -(label * p_mean.ln() + (1.0 - label) * (1.0 - p_mean).ln())
}

/// One cached training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SodExample {
    pub masks: Tensor,
    /// 1 for dual-talker, 0 for single-talker.
    pub label: f64,
}

/// Graph BCE for `probs` rows of one item inside a time-major batch.
fn item_bce(g: &mut Graph, probs: NodeId, steps: usize, batch: usize, b: usize, label: f64) -> Result<NodeId> {
    let grid = g.reshape(probs, steps, batch)?;
    let col = g.slice(grid, 1, b, b + 1)?;
    let p = g.mean(col)?;
    let p = g.clamp_min(p, 1e-12)?;
    let log_p = g.log10(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let q = g.clamp_min(q, 1e-12)?;
    let log_q = g.log10(q)?;
    let a = g.scale(log_p, -label * std::f64::consts::LN_10)?;
    let c = g.scale(log_q, -(1.0 - label) * std::f64::consts::LN_10)?;
    g.add(a, c)
}

/// Mean batch BCE graph over `examples`; items are grouped by length.
pub fn sod_batch_loss(model: &SodModel, g: &mut Graph, p: &[NodeId], examples: &[&SodExample]) -> Result<NodeId> {
    let mut lengths: Vec<usize> = examples.iter().map(|e| e.masks.shape()[0]).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let w = model.input_dim;
    let mut losses = Vec::new();
    for steps in lengths {
        let group: Vec<&SodExample> = examples.iter().copied().filter(|e| e.masks.shape()[0] == steps).collect();
        let batch = group.len();
        let mut data = Vec::with_capacity(steps * batch * w);
        for t in 0..steps {
            for e in &group {
                data.extend_from_slice(&e.masks.data()[t * w..(t + 1) * w]);
            }
        }
        let m = g.constant(Tensor::new(vec![steps * batch, w], data)?)?;
        let probs = model.forward_graph(g, p, m, batch)?;
        for (b, e) in group.iter().enumerate() {
            losses.push(item_bce(g, probs, steps, batch, b, e.label)?);
        }
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / losses.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SodTrainState {
    pub model: SodModel,
    pub adam: Adam,
    pub epoch: usize,
}

impl SodTrainState {
    pub fn new(model: SodModel) -> Self {
        let adam = Adam::new(&model.params);
        SodTrainState { model, adam, epoch: 0 }
    }
}

/// One shuffled pass of utterance-level BCE training. Returns the mean batch loss.
pub fn sod_train_epoch(state: &mut SodTrainState, data: &[SodExample]) -> Result<f64> {
    let cfg = state.model.config.clone();
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let keep = data[i].masks.shape()[0] > 0;
            if !keep {
                log::warn!("skipping empty mask sequence {i}");
            }
            keep
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Data("no non-empty mask sequences to train on".into()));
    }
    let mut order = usable;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, state.epoch as u64)));
    let mut total = 0.0;
    let mut count = 0;
    for batch in order.chunks(cfg.batch_size) {
        let items: Vec<&SodExample> = batch.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new();
        let leaves = state.model.params.leaves(&mut g)?;
        let loss = sod_batch_loss(&state.model, &mut g, &leaves, &items)?;
        g.backward(loss)?;
        let grads = collect_grads(&g, &leaves);
        state.adam.update(&mut state.model.params, &grads, cfg.learning_rate)?;
        total += g.value(loss).item()?;
        count += 1;
    }
    state.epoch += 1;
    Ok(total / count as f64)
}

/// Zeroes frame `t` of `frames` (`[T, frame]`) wherever `sod[t] < threshold`.
pub fn sod_masking(frames: &Tensor, sod: &[f64], threshold: f64) -> Result<Tensor> {
    if frames.rank() != 2 || frames.shape()[0] != sod.len() {
        return Err(Error::shape("sod_masking", format!("{:?} frames vs {} SOD values", frames.shape(), sod.len())));
    }
    let width = frames.shape()[1];
    let mut out = frames.clone();
    for (row, &v) in out.data_mut().chunks_mut(width).zip(sod) {
        if v < threshold {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}

const MASK_MAGIC: &[u8; 4] = b"USMK";
const MASK_VERSION: u32 = 1;

/// Writes `[frames, 2K]` masks as little-endian f32 with a small header
/// (magic, version, K, frame count).
pub fn write_mask_file(path: &Path, masks: &Tensor) -> Result<()> {
    if masks.rank() != 2 || masks.shape()[1] % 2 != 0 {
        return Err(Error::shape("mask file", format!("{:?}", masks.shape())));
    }
    let mut buf = Vec::with_capacity(16 + masks.numel() * 4);
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&MASK_VERSION.to_le_bytes());
    buf.extend_from_slice(&((masks.shape()[1] / 2) as u32).to_le_bytes());
    buf.extend_from_slice(&(masks.shape()[0] as u32).to_le_bytes());
    for &v in masks.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_mask_file(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    if buf.len() < 16 || &buf[..4] != MASK_MAGIC {
        return Err(bad("not a mask file"));
    }
    let word = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]) as usize;
    if word(4) != MASK_VERSION as usize {
        return Err(bad("unsupported mask file version"));
    }
    let (k, frames) = (word(8), word(12));
    if buf.len() != 16 + frames * 2 * k * 4 {
        return Err(bad("truncated mask file"));
    }
    let data = buf[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(vec![frames, 2 * k], data)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::finite_diff_check_normwise;

    fn random_masks(seed: u64, frames: usize, width: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![frames, width], (0..frames * width).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn model(k: usize) -> SodModel {
        SodModel::new(SodConfig { hidden: 8, seed: 2, ..SodConfig::default() }, 2 * k).unwrap()
    }

    #[test]
    fn outputs_are_probabilities_and_stream_matches_batch() {
        let m = model(8);
        let masks = random_masks(1, 300, 16);
        let batch = m.forward(&masks).unwrap();
        assert_eq!(batch.len(), 300);
        let mut st = m.streamer();
        for (row, b) in masks.data().chunks(16).zip(&batch) {
            let s = st.step(row).unwrap();
            assert!(s.value > 0.0 && s.value < 1.0);
            assert_eq!(s.frame_index, b.frame_index);
            assert!((s.value - b.value).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model(8);
        assert!(m.forward(&random_masks(1, 4, 12)).is_err());
        assert!(m.streamer().step(&[0.5; 3]).is_err());
    }

    #[test]
    fn swapping_mask_blocks_changes_output() {
        let m = model(8);
        let masks = random_masks(3, 20, 16);
        let swapped: Vec<f64> = masks.data().chunks(16).flat_map(|r| [&r[8..], &r[..8]].concat()).collect();
        let a = m.forward(&masks).unwrap();
        let b = m.forward(&Tensor::new(vec![20, 16], swapped).unwrap()).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x.value != y.value));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        assert!((utterance_bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((utterance_bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_closed_form() {
        let m = model(4);
        let ex = SodExample { masks: random_masks(4, 30, 8), label: 1.0 };
        let p_mean = m.forward(&ex.masks).unwrap().iter().map(|o| o.value).sum::<f64>() / 30.0;
        let mut g = Graph::new();
        let p = m.params.leaves(&mut g).unwrap();
        let l = sod_batch_loss(&m, &mut g, &p, &[&ex]).unwrap();
        assert!((g.value(l).item().unwrap() - utterance_bce(p_mean, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = model(4);
        let data = [
            SodExample { masks: random_masks(5, 6, 8), label: 1.0 },
            SodExample { masks: random_masks(6, 6, 8), label: 0.0 },
            SodExample { masks: random_masks(7, 4, 8), label: 1.0 },
        ];
        let refs: Vec<&SodExample> = data.iter().collect();
        for (i, name) in m.params.names.iter().enumerate() {
            let err = finite_diff_check_normwise(
                |g, x| {
                    let mut p: Vec<NodeId> = m.params.tensors.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
                    p[i] = x;
                    sod_batch_loss(&m, g, &p, &refs)
                },
                &m.params.tensors[i],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn overfits_eight_utterances() {
        let k = 8;
        let data: Vec<SodExample> = (0..8)
            .map(|i| {
                let label = (i % 2) as f64;
                // Dual-talker masks keep both channels open; single-talker ones close channel two.
                let mut masks = random_masks(10 + i, 50, 2 * k);
                for row in masks.data_mut().chunks_mut(2 * k) {
                    for v in &mut row[k..] {
                        *v *= if label > 0.5 { 1.0 } else { 0.2 };
                    }
                }
                SodExample { masks, label }
            })
            .collect();
        let mut st = SodTrainState::new(SodModel::new(SodConfig { learning_rate: 1e-2, ..SodConfig::default() }, 2 * k).unwrap());
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = sod_train_epoch(&mut st, &data).unwrap();
        }
        assert!(last < 0.05, "{last}");
    }

    #[test]
    fn masking_rule() {
        let frames = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(sod_masking(&frames, &[0.9; 4], 0.5).unwrap(), frames);
        assert!(sod_masking(&frames, &[0.1; 4], 0.5).unwrap().data().iter().all(|v| *v == 0.0));
        let alt = sod_masking(&frames, &[0.9, 0.1, 0.9, 0.1], 0.5).unwrap();
        assert_eq!(alt.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);
        assert!(sod_masking(&frames, &[0.9; 3], 0.5).is_err());
    }

    #[test]
    fn parameter_count_is_independent_of_length() {
        let m = SodModel::new(SodConfig { hidden: 64, ..SodConfig::default() }, 512).unwrap();
        let h = 64;
        let expected = 512 * h + h + 2 * (3 * h * h * 2 + 6 * h) + h + 1;
        assert_eq!(m.params.count(), expected);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let masks = random_masks(9, 7, 6).map(|v| v as f32 as f64);
        write_mask_file(&path, &masks).unwrap();
        assert_eq!(read_mask_file(&path).unwrap(), masks);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_mask_file(&path), Err(Error::Data(_))));
    }
}
