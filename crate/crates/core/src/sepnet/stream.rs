//! Frame-by-frame inference with constant-size state.

use super::{ParamRole, SepModel};
use crate::error::{Error, Result};
use crate::nn::{affine, GruScratch};

#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    windowed: Vec<f64>,
    latent: Vec<f64>,
    gru: GruScratch,
}

impl SepModel {
    /// `relu(window ⊙ x · W_enc)` for one frame.
    pub(crate) fn encode(&self, x: &[f64], s: &mut Scratch) -> Vec<f64> {
        s.windowed.clear();
        s.windowed.extend(x.iter().zip(self.window()).map(|(a, w)| a * w));
        let mut e = Vec::new();
        affine(&s.windowed, self.param(ParamRole::Encoder), None, &mut e);
        e.iter_mut().for_each(|v| *v = v.max(0.0));
        e
    }

    /// `window ⊙ ((m ⊙ e) · W_dec)` for one frame and channel.
    pub(crate) fn decode(&self, e: &[f64], m: &[f64], s: &mut Scratch) -> Vec<f64> {
        s.latent.clear();
        s.latent.extend(e.iter().zip(m).map(|(a, b)| a * b));
        let mut y = Vec::new();
        affine(&s.latent, self.param(ParamRole::Decoder), None, &mut y);
        y.iter_mut().zip(self.window()).for_each(|(v, w)| *v *= w);
        y
    }
}

/// Output of one streaming step.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    /// Windowed decoder frames per channel, ready for overlap-add.
    pub frames: [Vec<f64>; 2],
    /// Concatenated masks `[m1, m2]` of length 2K.
    pub mask: Vec<f64>,
}

/// Recurrent state of one stream.
#[derive(Debug, Clone)]
pub struct SepStreamer<'a> {
    model: &'a SepModel,
    hidden: Vec<Vec<f64>>,
    scratch: Scratch,
}

impl<'a> SepStreamer<'a> {
    pub fn new(model: &'a SepModel) -> Self {
        let k = model.encoder_dim();
        SepStreamer { model, hidden: vec![vec![0.0; k]; model.config.separator_layers], scratch: Scratch::default() }
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Consumes one input frame of `frame` samples.
    pub fn step(&mut self, input: &[f64]) -> Result<StreamFrame> {
        let model = self.model;
        if input.len() != model.config.frame() {
            return Err(Error::shape("stream", format!("frame of {} samples, expected {}", input.len(), model.config.frame())));
        }
        let k = model.encoder_dim();
        let e = model.encode(input, &mut self.scratch);
        let mut x = e.clone();
        for (layer, h) in model.layout_separator().iter().zip(self.hidden.iter_mut()) {
            layer.step(&model.params, &x, h, &mut self.scratch.gru);
            x.clone_from(h);
        }
        let mut mask = Vec::with_capacity(2 * k);
        affine(&x, model.param(ParamRole::MaskW), Some(model.param(ParamRole::MaskB)), &mut mask);
        mask.iter_mut().for_each(|v| *v = crate::autodiff::sigmoid(*v));
        let f1 = model.decode(&e, &mask[..k], &mut self.scratch);
        let f2 = model.decode(&e, &mask[k..], &mut self.scratch);
        Ok(StreamFrame { frames: [f1, f2], mask })
    }
}

/// Streaming overlap-add at 50% overlap: each pushed frame releases `hop` samples.
#[derive(Debug, Clone)]
pub struct OverlapAdd {
    pending: Vec<f64>,
}

impl OverlapAdd {
    pub fn new(hop: usize) -> Self {
        OverlapAdd { pending: vec![0.0; hop] }
    }

    pub fn push(&mut self, frame: &[f64]) -> Vec<f64> {
        let hop = self.pending.len();
        let out: Vec<f64> = frame[..hop].iter().zip(&self.pending).map(|(a, b)| a + b).collect();
        self.pending.copy_from_slice(&frame[hop..2 * hop]);
        out
    }
}

/// Overlap-adds `[frames, 2*hop]` rows and trims to `len` samples.
pub fn overlap_add(frames: &[f64], hop: usize, len: usize) -> Vec<f64> {
    let mut ola = OverlapAdd::new(hop);
    let mut out: Vec<f64> = frames.chunks(2 * hop).flat_map(|f| ola.push(f)).collect();
    out.resize(len, 0.0);
    out
}
