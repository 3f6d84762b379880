//! Signal-level similarity measures and the multi-talker training objectives.
//!
//! Every function here builds nodes on a caller-owned [`Graph`]. Targets are
//! constants; estimates are graph nodes whose element count matches the target
//! length (any shape, compared in row-major order).

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, ZERO_ENERGY};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Sdr,
    SiSdr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Single-talker enhancement, first channel only.
    SeSingle,
    /// Classic PIT on dual-talker mixtures.
    SsPit,
    /// PIT with the thresholded SDR measure.
    EpsTsdr,
    /// Source-aggregated SDR.
    SaSdr,
    /// Multi-objective loss: measure on channel 1, log-MSE on the silent channel.
    Mol,
    /// PIT against duplicated targets for single-talker mixtures.
    Proposed,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::SeSingle,
        Objective::SsPit,
        Objective::EpsTsdr,
        Objective::SaSdr,
        Objective::Mol,
        Objective::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::SeSingle => "se-single",
            Objective::SsPit => "ss-pit",
            Objective::EpsTsdr => "eps-tsdr",
            Objective::SaSdr => "sa-sdr",
            Objective::Mol => "mol",
            Objective::Proposed => "proposed",
        }
    }

    /// Whether the objective accepts utterances with this many talkers.
    pub fn accepts(self, talker_count: usize) -> bool {
        match self {
            Objective::SeSingle => talker_count == 1,
            Objective::SsPit => talker_count == 2,
            _ => talker_count == 1 || talker_count == 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    /// Soft SDR ceiling of the thresholded measure, in dB.
    pub sdr_max: f64,
    /// Weight of the log-MSE term in the multi-objective loss.
    pub lambda: f64,
    pub measure: Measure,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-8,
            sdr_max: 30.0,
            lambda: 0.1,
            measure: Measure::SiSdr,
            objective: Objective::Proposed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("loss.epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sdr_max > 0.0) {
            return Err(Error::Config(format!("loss.sdr_max must be > 0, got {}", self.sdr_max)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `10^(-sdr_max / 10)`.
    pub fn tau(&self) -> f64 {
        10f64.powf(-self.sdr_max / 10.0)
    }
}

/// Reference signals for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub sources: Vec<AudioBuffer>,
    pub talker_count: usize,
}

impl TargetSet {
    pub fn new(sources: Vec<AudioBuffer>, talker_count: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("target set needs at least one source".into()));
        }
        let len = sources[0].len();
        if sources.iter().any(|s| s.len() != len) {
            return Err(Error::InvalidArgument("target sources differ in length".into()));
        }
        if talker_count == 0 || talker_count > sources.len() {
            return Err(Error::InvalidArgument(format!(
                "talker count {} invalid for {} sources",
                talker_count,
                sources.len()
            )));
        }
        Ok(TargetSet { sources, talker_count })
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.sources.iter().map(|s| s.samples.as_slice()).collect()
    }
}

/// Result of a permutation search. `permutation[n]` is the target index
/// assigned to estimate `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PitOutcome {
    pub loss: NodeId,
    pub permutation: Vec<usize>,
}

/// Pairwise measure used inside [`pit_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMeasure {
    Standard(Measure),
    EpsTsdr,
}

fn target_node(g: &mut Graph, s: &[f64], like: NodeId) -> Result<NodeId> {
    let shape = g.shape(like).to_vec();
    if shape.iter().product::<usize>() != s.len() {
        return Err(Error::shape(
            "objective",
            format!("target of length {} vs estimate of shape {:?}", s.len(), shape),
        ));
    }
    g.constant(Tensor::new(shape, s.to_vec())?)
}

/// SDR or SI-SDR in dB:
/// `10 log10(‖αs‖² / (‖ŝ − αs‖² + ε) + ε)` with `α = 1` (SDR) or
/// `α = ŝᵀs / ‖s‖²` (SI-SDR).
pub fn sdr_measure(g: &mut Graph, s: &[f64], s_hat: NodeId, measure: Measure, epsilon: f64) -> Result<NodeId> {
    let target = target_node(g, s, s_hat)?;
    let target_energy: f64 = s.iter().map(|v| v * v).sum();
    let (scaled, scaled_energy) = match measure {
        Measure::Sdr => (target, g.scalar_constant(target_energy)?),
        Measure::SiSdr => {
            if target_energy < ZERO_ENERGY {
                return Err(Error::ZeroEnergy("SI-SDR is undefined for a zero-energy target".into()));
            }
            let proj = g.dot(s_hat, target)?;
            let alpha = g.scale(proj, 1.0 / target_energy)?;
            let scaled = g.mul(alpha, target)?;
            let alpha_sq = g.square(alpha)?;
            (scaled, g.scale(alpha_sq, target_energy)?)
        }
    };
    let residual = g.sub(s_hat, scaled)?;
    let distortion = g.energy(residual)?;
    let distortion = g.add_scalar(distortion, epsilon)?;
    let ratio = g.div(scaled_energy, distortion)?;
    let ratio = g.add_scalar(ratio, epsilon)?;
    let log = g.log10(ratio)?;
    g.scale(log, 10.0)
}

/// Thresholded SDR, `10 log10((‖s‖²+ε) / (‖ŝ−s‖² + τ(‖s‖²+ε)))`, evaluated as
/// `−10 log10(‖ŝ−s‖²/(‖s‖²+ε) + τ)`. Defined for silent targets and bounded by `sdr_max`.
pub fn eps_tsdr_measure(g: &mut Graph, s: &[f64], s_hat: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let target = target_node(g, s, s_hat)?;
    let target_energy: f64 = s.iter().map(|v| v * v).sum::<f64>() + cfg.epsilon;
    let residual = g.sub(s_hat, target)?;
    let distortion = g.energy(residual)?;
    let relative = g.scale(distortion, 1.0 / target_energy)?;
    let shifted = g.add_scalar(relative, cfg.tau())?;
    let log = g.log10(shifted)?;
    g.scale(log, -10.0)
}

/// Log mean squared error, `−10 log10(‖ŝ − s‖² + ε)`.
pub fn log_mse_measure(g: &mut Graph, s: &[f64], s_hat: NodeId, epsilon: f64) -> Result<NodeId> {
    let target = target_node(g, s, s_hat)?;
    let residual = g.sub(s_hat, target)?;
    let distortion = g.energy(residual)?;
    let distortion = g.add_scalar(distortion, epsilon)?;
    let log = g.log10(distortion)?;
    g.scale(log, -10.0)
}

fn pair_measure(g: &mut Graph, s: &[f64], s_hat: NodeId, pair: PairMeasure, cfg: &LossConfig) -> Result<NodeId> {
    match pair {
        PairMeasure::Standard(m) => sdr_measure(g, s, s_hat, m, cfg.epsilon),
        PairMeasure::EpsTsdr => eps_tsdr_measure(g, s, s_hat, cfg),
    }
}

/// All permutations of `0..n` in lexicographic order; the identity comes first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    // Narayana's next-permutation.
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else { break };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
    out
}

/// Sums `matrix[target][estimate]` over the assignment in target order,
/// returning the chosen permutation. `better(a, b)` is true when `a` beats `b`.
fn best_assignment(matrix: &[Vec<f64>], better: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    let n = matrix.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let mut inverse = vec![0; n];
        for (est, &tgt) in perm.iter().enumerate() {
            inverse[tgt] = est;
        }
        let score: f64 = (0..n).map(|t| matrix[t][inverse[t]]).sum();
        if best.as_ref().map_or(true, |(b, _)| better(score, *b)) {
            best = Some((score, perm));
        }
    }
    best.expect("at least one permutation").1
}

fn check_counts(targets: &[&[f64]], estimates: &[NodeId]) -> Result<()> {
    if targets.is_empty() || targets.len() != estimates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets vs {} estimates",
            targets.len(),
            estimates.len()
        )));
    }
    Ok(())
}

/// Sum of `nodes[t][perm⁻¹(t)]` in target order.
fn sum_assigned(g: &mut Graph, nodes: &[Vec<NodeId>], permutation: &[usize]) -> Result<NodeId> {
    let mut inverse = vec![0; permutation.len()];
    for (est, &tgt) in permutation.iter().enumerate() {
        inverse[tgt] = est;
    }
    let mut total = nodes[0][inverse[0]];
    for t in 1..nodes.len() {
        total = g.add(total, nodes[t][inverse[t]])?;
    }
    Ok(total)
}

/// Permutation-invariant loss: `−(1/N) max_π Σ_n D(s_π(n), ŝ_n)`.
///
/// Ties between permutations resolve to the first in lexicographic order,
/// i.e. toward the identity.
pub fn pit_loss(
    g: &mut Graph,
    targets: &[&[f64]],
    estimates: &[NodeId],
    pair: PairMeasure,
    cfg: &LossConfig,
) -> Result<PitOutcome> {
    check_counts(targets, estimates)?;
    let n = targets.len();
    let mut nodes = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for s in targets {
        let row = estimates.iter().map(|&e| pair_measure(g, s, e, pair, cfg)).collect::<Result<Vec<_>>>()?;
        values.push(row.iter().map(|&id| g.value(id).data()[0]).collect::<Vec<_>>());
        nodes.push(row);
    }
    let permutation = best_assignment(&values, |a, b| a > b);
    let total = sum_assigned(g, &nodes, &permutation)?;
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok(PitOutcome { loss, permutation })
}

/// Source-aggregated SDR loss:
/// `−max_π 10 log10(Σ‖s_π(n)‖² / (Σ‖ŝ_n − s_π(n)‖² + ε) + ε)`.
pub fn sa_sdr_loss(g: &mut Graph, targets: &[&[f64]], estimates: &[NodeId], cfg: &LossConfig) -> Result<PitOutcome> {
    check_counts(targets, estimates)?;
    let total_energy: f64 = targets.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>()).sum();
    if total_energy < ZERO_ENERGY {
        return Err(Error::ZeroEnergy("SA-SDR needs at least one active source".into()));
    }
    let mut nodes = Vec::with_capacity(targets.len());
    let mut values = Vec::with_capacity(targets.len());
    for s in targets {
        let mut row = Vec::with_capacity(estimates.len());
        for &e in estimates {
            let t = target_node(g, s, e)?;
            let residual = g.sub(e, t)?;
            row.push(g.energy(residual)?);
        }
        values.push(row.iter().map(|&id| g.value(id).data()[0]).collect::<Vec<_>>());
        nodes.push(row);
    }
    let permutation = best_assignment(&values, |a, b| a < b);
    let distortion = sum_assigned(g, &nodes, &permutation)?;
    let distortion = g.add_scalar(distortion, cfg.epsilon)?;
    let numerator = g.scalar_constant(total_energy)?;
    let ratio = g.div(numerator, distortion)?;
    let ratio = g.add_scalar(ratio, cfg.epsilon)?;
    let log = g.log10(ratio)?;
    let loss = g.scale(log, -10.0)?;
    Ok(PitOutcome { loss, permutation })
}

/// Multi-objective loss. Single-talker: `−D(s1, ŝ1) − λ D_logMSE(s2, ŝ2)`;
/// dual-talker: [`pit_loss`] with `cfg.measure`.
pub fn mol_loss(g: &mut Graph, targets: &TargetSet, estimates: &[NodeId], cfg: &LossConfig) -> Result<NodeId> {
    let slices = targets.slices();
    check_counts(&slices, estimates)?;
    if targets.talker_count == 1 {
        if estimates.len() != 2 {
            return Err(Error::InvalidArgument("multi-objective loss expects two channels".into()));
        }
        let speech = sdr_measure(g, slices[0], estimates[0], cfg.measure, cfg.epsilon)?;
        let silence = log_mse_measure(g, slices[1], estimates[1], cfg.epsilon)?;
        let a = g.scale(speech, -1.0)?;
        let b = g.scale(silence, -cfg.lambda)?;
        g.add(a, b)
    } else {
        Ok(pit_loss(g, &slices, estimates, PairMeasure::Standard(cfg.measure), cfg)?.loss)
    }
}

/// Duplicates the first source into every slot of a single-talker target set.
pub fn reformulate_targets(targets: &TargetSet) -> Result<TargetSet> {
    match targets.talker_count {
        1 => {
            let first = &targets.sources[0];
            if first.is_silent() {
                return Err(Error::ZeroEnergy("single-talker target has no speech".into()));
            }
            Ok(TargetSet { sources: vec![first.clone(); targets.sources.len()], talker_count: 1 })
        }
        2 => Ok(targets.clone()),
        n => Err(Error::InvalidArgument(format!("talker count must be 1 or 2, got {n}"))),
    }
}

/// Builds the loss selected by `cfg.objective`.
pub fn objective_dispatch(
    g: &mut Graph,
    cfg: &LossConfig,
    targets: &TargetSet,
    estimates: &[NodeId],
) -> Result<NodeId> {
    if !cfg.objective.accepts(targets.talker_count) {
        return Err(Error::InvalidArgument(format!(
            "objective {} does not accept {}-talker utterances",
            cfg.objective.name(),
            targets.talker_count
        )));
    }
    let slices = targets.slices();
    match cfg.objective {
        Objective::SeSingle => {
            let d = sdr_measure(g, slices[0], estimates[0], cfg.measure, cfg.epsilon)?;
            g.scale(d, -1.0)
        }
        Objective::SsPit => Ok(pit_loss(g, &slices, estimates, PairMeasure::Standard(cfg.measure), cfg)?.loss),
        Objective::EpsTsdr => Ok(pit_loss(g, &slices, estimates, PairMeasure::EpsTsdr, cfg)?.loss),
        Objective::SaSdr => Ok(sa_sdr_loss(g, &slices, estimates, cfg)?.loss),
        Objective::Mol => mol_loss(g, targets, estimates, cfg),
        Objective::Proposed => {
            let reformulated = reformulate_targets(targets)?;
            let slices = reformulated.slices();
            Ok(pit_loss(g, &slices, estimates, PairMeasure::Standard(cfg.measure), cfg)?.loss)
        }
    }
}
