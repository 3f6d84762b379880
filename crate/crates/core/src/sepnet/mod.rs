//! Causal encoder / recurrent separator / decoder network with two masked channels.

mod stream;
mod train;

use serde::{Deserialize, Serialize};

pub use stream::{overlap_add, OverlapAdd, SepStreamer, StreamFrame};
pub use train::{crop_window, train_epoch, EpochReport, TrainConfig, TrainState};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dsp::sqrt_hann;
use crate::error::{Error, Result};
use crate::nn::{GruLayer, Init, ParamSet};

/// Network and framing hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_ms: f64,
    /// Latent size K.
    pub encoder_dim: usize,
    pub separator_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { frame_ms: 2.0, encoder_dim: 64, separator_layers: 2, seed: 0 }
    }
}

impl ModelConfig {
    /// Frame length in samples.
    pub fn frame(&self) -> usize {
        (self.frame_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        self.frame() / 2
    }

    /// Algorithmic latency in samples: one frame plus one hop.
    pub fn latency(&self) -> usize {
        self.frame() + self.hop()
    }

    pub fn validate(&self) -> Result<()> {
        let frame = self.frame();
        if frame < 2 || frame % 2 != 0 {
            return Err(Error::Config(format!("frame_ms {} gives {} samples; need an even count ≥ 2", self.frame_ms, frame)));
        }
        if self.encoder_dim < 8 {
            return Err(Error::Config(format!("encoder_dim must be at least 8, got {}", self.encoder_dim)));
        }
        if self.separator_layers == 0 {
            return Err(Error::Config("separator_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of frames covering `len` samples at `hop`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Splits `x` into frames `x[t*hop .. t*hop + frame]`, zero-padding past the end.
/// Returns a `[frames, frame]` tensor.
pub fn frame_signal(x: &[f64], frame: usize, hop: usize) -> Result<Tensor> {
    if hop == 0 || frame < hop {
        return Err(Error::InvalidArgument(format!("invalid framing {frame}/{hop}")));
    }
    if x.len() < frame {
        return Err(Error::InvalidArgument(format!("signal of {} samples is shorter than one frame ({frame})", x.len())));
    }
    let t = frame_count(x.len(), hop);
    let mut data = vec![0.0; t * frame];
    for i in 0..t {
        let start = i * hop;
        let end = (start + frame).min(x.len());
        data[i * frame..i * frame + (end - start)].copy_from_slice(&x[start..end]);
    }
    Tensor::new(vec![t, frame], data)
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: usize,
    separator: Vec<GruLayer>,
    mask_w: usize,
    mask_b: usize,
    decoder: usize,
}

/// Separator network. Parameters are stored by name; `layout` indexes them.
#[derive(Debug, Clone)]
pub struct SepModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
    window: Vec<f64>,
}

/// Batch forward result on one mixture.
#[derive(Debug, Clone)]
pub struct Separation {
    pub estimates: [AudioBuffer; 2],
    /// Windowed decoder output per channel before overlap-add, `[frames, frame]`.
    pub frames: [Tensor; 2],
    /// Sigmoid masks `[frames, 2K]`, channel one first.
    pub masks: Tensor,
}

/// Graph nodes produced by [`SepModel::forward_graph`].
pub struct SepGraph {
    /// `estimates[b][c]`: channel `c` of batch item `b`, trimmed to the input length.
    pub estimates: Vec<[NodeId; 2]>,
    pub masks: NodeId,
}

impl SepModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (frame, k) = (config.frame(), config.encoder_dim);
        let mut init = Init::new(config.seed);
        let mut params = ParamSet::default();
        let encoder = params.push("encoder.w", init.uniform(&[frame, k], frame));
        let separator = (0..config.separator_layers)
            .map(|l| GruLayer::register(&mut params, &mut init, &format!("separator.{l}"), k, k))
            .collect();
        let mask_w = params.push("mask.w", init.uniform(&[k, 2 * k], k));
        let mask_b = params.push("mask.b", init.uniform(&[2 * k], k));
        let decoder = params.push("decoder.w", init.uniform(&[k, frame], k));
        let layout = Layout { encoder, separator, mask_w, mask_b, decoder };
        Ok(SepModel { window: sqrt_hann(frame), config, params, layout })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = SepModel::new(config)?;
        model.params.check_layout(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn encoder_dim(&self) -> usize {
        self.config.encoder_dim
    }

    /// Builds the batched forward pass. All mixtures must have the same length.
    /// `leaves` are the graph nodes of `self.params` (see [`ParamSet::leaves`]).
    pub fn forward_graph(&self, g: &mut Graph, leaves: &[NodeId], mixtures: &[&[f64]]) -> Result<SepGraph> {
        let (frame, hop, k) = (self.config.frame(), self.config.hop(), self.config.encoder_dim);
        let batch = mixtures.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = mixtures[0].len();
        if mixtures.iter().any(|m| m.len() != n) {
            return Err(Error::InvalidArgument("mixtures in a batch must share a length".into()));
        }
        let per_item: Vec<Tensor> = mixtures.iter().map(|m| frame_signal(m, frame, hop)).collect::<Result<_>>()?;
        let steps = per_item[0].shape()[0];
        // Time-major rows: row t * batch + b holds frame t of item b.
        let mut data = Vec::with_capacity(steps * batch * frame);
        for t in 0..steps {
            for item in &per_item {
                let row = &item.data()[t * frame..(t + 1) * frame];
                data.extend(row.iter().zip(&self.window).map(|(x, w)| x * w));
            }
        }
        let frames = g.constant(Tensor::new(vec![steps * batch, frame], data)?)?;
        let p = leaves;
        let lay = &self.layout;

        let e = g.matmul(frames, p[lay.encoder])?;
        let e = g.relu(e)?;
        let mut h = e;
        for layer in &lay.separator {
            h = layer.graph(g, p, h, batch)?;
        }
        let m = g.matmul(h, p[lay.mask_w])?;
        let m = g.add(m, p[lay.mask_b])?;
        let masks = g.sigmoid(m)?;

        let window = g.constant(Tensor::vector(self.window.clone()))?;
        let mut channels = Vec::with_capacity(2);
        for c in 0..2 {
            let mc = g.slice(masks, 1, c * k, (c + 1) * k)?;
            let latent = g.mul(mc, e)?;
            let y = g.matmul(latent, p[lay.decoder])?;
            let y = g.mul(y, window)?;
            let head = g.slice(y, 1, 0, hop)?;
            let tail = g.slice(y, 1, hop, frame)?;
            let ola = if steps > 1 {
                let zeros = g.constant(Tensor::zeros(&[batch, hop]))?;
                let prev = g.slice(tail, 0, 0, (steps - 1) * batch)?;
                let shifted = g.concat(&[zeros, prev], 0)?;
                g.add(head, shifted)?
            } else {
                head
            };
            channels.push(g.reshape(ola, steps, batch * hop)?);
        }
        let mut estimates = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut pair = Vec::with_capacity(2);
            for &ch in &channels {
                let s = g.slice(ch, 1, b * hop, (b + 1) * hop)?;
                let s = g.flatten(s)?;
                pair.push(g.slice(s, 0, 0, n)?);
            }
            estimates.push([pair[0], pair[1]]);
        }
        Ok(SepGraph { estimates, masks })
    }

    /// Batch (whole-signal) forward pass on one mixture.
    pub fn forward(&self, mixture: &AudioBuffer) -> Result<Separation> {
        let mut g = Graph::new();
        let consts: Vec<NodeId> = self.params.tensors.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
        let out = self.forward_graph(&mut g, &consts, &[&mixture.samples])?;
        let (frame, hop) = (self.config.frame(), self.config.hop());
        let steps = frame_count(mixture.len(), hop);
        let estimates = out.estimates[0].map(|id| AudioBuffer::new(mixture.sample_rate, g.value(id).data().to_vec()));
        let masks = g.value(out.masks).clone();
        // Decoder frames are recomputed from the masks so the graph stays lean.
        let frames = self.decode_frames(mixture, &masks, steps, frame)?;
        Ok(Separation { estimates, frames, masks })
    }

    fn decode_frames(&self, mixture: &AudioBuffer, masks: &Tensor, steps: usize, frame: usize) -> Result<[Tensor; 2]> {
        let k = self.config.encoder_dim;
        let framed = frame_signal(&mixture.samples, frame, self.config.hop())?;
        let mut out = [Vec::with_capacity(steps * frame), Vec::with_capacity(steps * frame)];
        let mut scratch = stream::Scratch::default();
        for t in 0..steps {
            let x = &framed.data()[t * frame..(t + 1) * frame];
            let e = self.encode(x, &mut scratch);
            let m = &masks.data()[t * 2 * k..(t + 1) * 2 * k];
            for (c, buf) in out.iter_mut().enumerate() {
                buf.extend(self.decode(&e, &m[c * k..(c + 1) * k], &mut scratch));
            }
        }
        let [a, b] = out;
        Ok([Tensor::new(vec![steps, frame], a)?, Tensor::new(vec![steps, frame], b)?])
    }

    pub(crate) fn window(&self) -> &[f64] {
        &self.window
    }

    pub(crate) fn layout_separator(&self) -> &[GruLayer] {
        &self.layout.separator
    }

    pub(crate) fn param(&self, which: ParamRole) -> &Tensor {
        let i = match which {
            ParamRole::Encoder => self.layout.encoder,
            ParamRole::MaskW => self.layout.mask_w,
            ParamRole::MaskB => self.layout.mask_b,
            ParamRole::Decoder => self.layout.decoder,
        };
        &self.params.tensors[i]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ParamRole {
    Encoder,
    MaskW,
    MaskB,
    Decoder,
}

#[cfg(test)]
mod tests;
