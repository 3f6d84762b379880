//! Mini-batch training of the separator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SepModel;
use crate::audio::{energy, AudioBuffer};
use crate::autodiff::Graph;
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{collect_grads, Adam};
use crate::objectives::{objective_dispatch, LossConfig, TargetSet};
use crate::scene::SceneBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training excerpt length in frames; `0` trains on whole utterances.
    pub crop_frames: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, batch_size: 8, crop_frames: 1000, learning_rate: 1e-3, lr_decay: 0.98, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "learning_rate {} / lr_decay {} out of range",
                self.learning_rate, self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SepModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: SepModel) -> Self {
        let adam = Adam::new(&model.params);
        TrainState { model, adam, epoch: 0 }
    }

    /// `learning_rate · lr_decay^epoch`.
    pub fn learning_rate(&self, cfg: &TrainConfig) -> f64 {
        cfg.learning_rate * cfg.lr_decay.powi(self.epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    /// `(global step, loss, learning rate)` per update.
    pub steps: Vec<(u64, f64, f64)>,
}

/// Picks a training excerpt `[start, start + len)` of `bundle` for `epoch`.
/// Draws a few candidates and keeps the first in which every talker carries at
/// least a tenth of its average energy share; falls back to the best candidate.
pub fn crop_window(bundle: &SceneBundle, len: usize, seed: u64, epoch: usize) -> (usize, usize) {
    let n = bundle.mixture.len();
    if len == 0 || len >= n {
        return (0, n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, bundle.spec.seed), epoch as u64));
    let talkers = &bundle.targets.sources[..bundle.targets.talker_count];
    let share = len as f64 / n as f64;
    let mut best = (f64::NEG_INFINITY, 0);
    for _ in 0..16 {
        let start = rng.gen_range(0..=n - len);
        let worst = talkers
            .iter()
            .map(|s| energy(&s.samples[start..start + len]) / (s.energy() * share))
            .fold(f64::INFINITY, f64::min);
        if worst >= 0.1 {
            return (start, len);
        }
        if worst > best.0 {
            best = (worst, start);
        }
    }
    (best.1, len)
}

fn cropped_targets(bundle: &SceneBundle, start: usize, len: usize) -> Result<TargetSet> {
    let sources = bundle
        .targets
        .sources
        .iter()
        .map(|s| AudioBuffer::new(s.sample_rate, s.samples[start..start + len].to_vec()))
        .collect();
    TargetSet::new(sources, bundle.targets.talker_count)
}

/// One pass over `data` in a seeded order. Each batch is forwarded jointly, the
/// batch-mean objective is back-propagated, gradients are clipped element-wise
/// and Adam takes one step. The epoch counter advances at the end, which decays
/// the learning rate.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[SceneBundle],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(b) = data.iter().find(|b| !loss_cfg.objective.accepts(b.targets.talker_count)) {
        return Err(Error::Config(format!(
            "objective {} cannot train on {}-talker scene {}",
            loss_cfg.objective.name(),
            b.targets.talker_count,
            b.spec.seed
        )));
    }
    let lr = state.learning_rate(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1_000_000 + state.epoch as u64)));
    let crop = cfg.crop_frames * state.model.config.hop();
    let mut steps = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));

    for batch in order.chunks(cfg.batch_size) {
        // Items are cropped to a common length so the batch shares one graph.
        let len = batch.iter().map(|&i| data[i].mixture.len()).min().unwrap_or(0).min(if crop == 0 { usize::MAX } else { crop });
        let mut mixtures = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &i in batch {
            let (start, len) = crop_window(&data[i], len, cfg.seed, state.epoch);
            mixtures.push(data[i].mixture.samples[start..start + len].to_vec());
            targets.push(cropped_targets(&data[i], start, len)?);
        }
        let mut g = Graph::new();
        let leaves = state.model.params.leaves(&mut g)?;
        let refs: Vec<&[f64]> = mixtures.iter().map(Vec::as_slice).collect();
        let out = state.model.forward_graph(&mut g, &leaves, &refs)?;
        let mut losses = Vec::with_capacity(batch.len());
        for (est, tgt) in out.estimates.iter().zip(&targets) {
            losses.push(objective_dispatch(&mut g, loss_cfg, tgt, est).map_err(|e| {
                log::error!("epoch {} step {}: loss failed: {e}", state.epoch, state.adam.step + 1);
                e
            })?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("epoch {} step {}: non-finite loss", state.epoch, state.adam.step + 1)));
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, &leaves);
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "epoch {} step {}: non-finite gradient for `{}`",
                state.epoch,
                state.adam.step + 1,
                state.model.params.names[i]
            )));
        }
        state.adam.update(&mut state.model.params, &grads, lr)?;
        log::debug!("epoch {} step {} loss {:.4}", state.epoch, state.adam.step, value);
        steps.push((state.adam.step, value, lr));
    }
    let mean_loss = steps.iter().map(|s| s.1).sum::<f64>() / steps.len() as f64;
    state.epoch += 1;
    Ok(EpochReport { epoch: state.epoch - 1, mean_loss, steps })
}
