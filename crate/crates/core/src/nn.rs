//! Parameter storage, GRU layers and the Adam optimiser shared by both networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, sigmoid, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config(format!("parameter names differ: {:?} vs {:?}", self.names, other.names)));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!("parameter `{n}` has shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a graph leaf, in order.
    pub fn leaves(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect())
            .expect("numel matches shape")
    }
}

/// Parameter indices of one GRU layer. Gate blocks are ordered reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruLayer {
    pub w_in: usize,
    pub w_hid: usize,
    pub b_in: usize,
    pub b_hid: usize,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn register(params: &mut ParamSet, init: &mut Init, prefix: &str, input: usize, hidden: usize) -> Self {
        GruLayer {
            w_in: params.push(format!("{prefix}.w_in"), init.uniform(&[input, 3 * hidden], hidden)),
            w_hid: params.push(format!("{prefix}.w_hid"), init.uniform(&[hidden, 3 * hidden], hidden)),
            b_in: params.push(format!("{prefix}.b_in"), init.uniform(&[3 * hidden], hidden)),
            b_hid: params.push(format!("{prefix}.b_hid"), init.uniform(&[3 * hidden], hidden)),
            input,
            hidden,
        }
    }

    /// Runs the layer over a time-major sequence `x` of shape `[steps * batch, input]`
    /// from a zero state. Returns `[steps * batch, hidden]`.
    pub fn graph(&self, g: &mut Graph, p: &[NodeId], x: NodeId, batch: usize) -> Result<NodeId> {
        let rows = g.shape(x)[0];
        if rows % batch != 0 {
            return Err(Error::shape("gru", format!("{rows} rows not divisible by batch {batch}")));
        }
        let h_dim = self.hidden;
        let xw = g.matmul(x, p[self.w_in])?;
        let xw = g.add(xw, p[self.b_in])?;
        let mut h = g.constant(Tensor::zeros(&[batch, h_dim]))?;
        let mut outs = Vec::with_capacity(rows / batch);
        for t in 0..rows / batch {
            let xi = g.slice(xw, 0, t * batch, (t + 1) * batch)?;
            let hh = g.matmul(h, p[self.w_hid])?;
            let hh = g.add(hh, p[self.b_hid])?;
            let xr = g.slice(xi, 1, 0, 2 * h_dim)?;
            let hr = g.slice(hh, 1, 0, 2 * h_dim)?;
            let rz = g.add(xr, hr)?;
            let rz = g.sigmoid(rz)?;
            let r = g.slice(rz, 1, 0, h_dim)?;
            let z = g.slice(rz, 1, h_dim, 2 * h_dim)?;
            let xn = g.slice(xi, 1, 2 * h_dim, 3 * h_dim)?;
            let hn = g.slice(hh, 1, 2 * h_dim, 3 * h_dim)?;
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n)?;
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
            outs.push(h);
        }
        g.concat(&outs, 0)
    }

    /// One recurrence step on plain slices; `h` is updated in place.
    pub fn step(&self, params: &ParamSet, x: &[f64], h: &mut [f64], scratch: &mut GruScratch) {
        let hd = self.hidden;
        let (xw, hw) = (&mut scratch.xw, &mut scratch.hw);
        xw.clear();
        xw.extend_from_slice(params.tensors[self.b_in].data());
        hw.clear();
        hw.extend_from_slice(params.tensors[self.b_hid].data());
        gemm(1, self.input, 3 * hd, x, false, params.tensors[self.w_in].data(), false, xw, true);
        gemm(1, hd, 3 * hd, h, false, params.tensors[self.w_hid].data(), false, hw, true);
        for j in 0..hd {
            let r = sigmoid(xw[j] + hw[j]);
            let z = sigmoid(xw[hd + j] + hw[hd + j]);
            let n = (xw[2 * hd + j] + r * hw[2 * hd + j]).tanh();
            h[j] = n + z * (h[j] - n);
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct GruScratch {
    xw: Vec<f64>,
    hw: Vec<f64>,
}

/// `y = x W + b` on plain slices (single row).
pub fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>, out: &mut Vec<f64>) {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    out.clear();
    match b {
        Some(b) => out.extend_from_slice(b.data()),
        None => out.resize(n, 0.0),
    }
    gemm(1, k, n, x, false, w.data(), false, out, true);
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 5.0;

/// Adam moments for a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Clips each gradient element to `[-GRAD_CLIP, GRAD_CLIP]` and applies one update.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gr = grads[i].data()[j].clamp(-GRAD_CLIP, GRAD_CLIP);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gr;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gr * gr;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Gradients of `leaves` after a backward sweep; unused parameters get zeros.
pub fn collect_grads(g: &Graph, leaves: &[NodeId]) -> Vec<Tensor> {
    leaves
        .iter()
        .map(|&id| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_graph_matches_plain_steps() {
        let mut params = ParamSet::default();
        let mut init = Init::new(1);
        let layer = GruLayer::register(&mut params, &mut init, "gru", 3, 4);
        let (steps, batch) = (5, 2);
        let x = init.uniform(&[steps * batch, 3], 1);
        let mut g = Graph::new();
        let p = params.leaves(&mut g).unwrap();
        let xn = g.constant(x.clone()).unwrap();
        let y = layer.graph(&mut g, &p, xn, batch).unwrap();
        let mut scratch = GruScratch::default();
        for b in 0..batch {
            let mut h = vec![0.0; 4];
            for t in 0..steps {
                let row = t * batch + b;
                layer.step(&params, &x.data()[row * 3..row * 3 + 3], &mut h, &mut scratch);
                let got = &g.value(y).data()[row * 4..row * 4 + 4];
                for (a, c) in got.iter().zip(&h) {
                    assert!((a - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn clip_bounds_the_applied_gradient() {
        let mut params = ParamSet::default();
        params.push("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(&params);
        adam.update(&mut params, &[Tensor::vector(vec![100.0])], 1e-3).unwrap();
        assert_eq!(adam.m[0][0], (1.0 - ADAM_BETA1) * GRAD_CLIP);
        assert_eq!(adam.v[0][0], (1.0 - ADAM_BETA2) * GRAD_CLIP * GRAD_CLIP);
        // First Adam step moves by lr * sign(g).
        assert!((params.tensors[0].data()[0] + 1e-3).abs() < 1e-9);
    }
}
