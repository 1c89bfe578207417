//! Discard policies: no cut-off, uniform cut-off, and the neural policy.
//!
//! Decisions are made over the controllable pairs (every pair except the
//! end-to-end one) in triangular order. Observations cover all pairs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{controllable_pairs, ChainState, DiscardPolicy};
use crate::neuralnet::{sigmoid, ForwardCache, Mlp};
use crate::physics::DerivedParams;
use crate::seeds::SimRng;

/// Probabilities are kept inside `[P_CLAMP, 1 - P_CLAMP]` for log-probabilities.
pub const P_CLAMP: f64 = 1e-7;

/// Logit bound equivalent to clamping probabilities at [`P_CLAMP`].
pub fn logit_clamp() -> f64 {
    ((1.0 - P_CLAMP) / P_CLAMP).ln()
}

/// Normalised storage time per pair; 0 encodes an absent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

/// Discard flags over the controllable pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PolicyDecision(pub Vec<bool>);

impl PolicyDecision {
    pub fn keep_all(n_controllable: usize) -> Self {
        Self(vec![false; n_controllable])
    }

    pub fn as_bits(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Writes the observation of `state` into `out` (one entry per pair).
pub fn encode_into(state: &ChainState, scale: f64, out: &mut [f64]) {
    for (o, e) in out.iter_mut().zip(state.entries()) {
        *o = e.map_or(0.0, |r| r.storage_steps as f64 * scale);
    }
}

/// Observation of a post-swap state: storage times scaled by `tau0 / tau_c`.
pub fn encode_observation(state: &ChainState, d: &DerivedParams) -> Observation {
    let mut out = vec![0.0; state.n_pairs()];
    encode_into(state, d.storage_scale(), &mut out);
    Observation(out)
}

/// Recovers integer storage times from an observation.
pub fn decode_observation(obs: &Observation, d: &DerivedParams) -> Vec<u32> {
    let scale = d.storage_scale();
    obs.0.iter().map(|&v| (v / scale).round() as u32).collect()
}

pub fn no_cutoff_policy(obs: &Observation) -> PolicyDecision {
    PolicyDecision::keep_all(obs.0.len().saturating_sub(1))
}

/// Flags every controllable pair whose accumulated storage has reached `c`.
pub fn uniform_cutoff_policy(state: &ChainState, c: u32) -> Result<PolicyDecision> {
    if c < 1 {
        return Err(Error::invalid("cutoff", "must be >= 1"));
    }
    let mut flags = vec![false; state.n_pairs() - 1];
    UniformCutoff::new(c)?.decide(state, &mut flags);
    Ok(PolicyDecision(flags))
}

/// Never discards.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoCutoff;

impl DiscardPolicy for NoCutoff {
    fn decide(&mut self, _: &ChainState, _: &mut [bool]) {}
}

/// Discards any controllable pair once its accumulated storage reaches `c`
/// steps. With `c = 1` nothing survives past the step that created it.
#[derive(Debug, Clone, Copy)]
pub struct UniformCutoff {
    c: u32,
}

impl UniformCutoff {
    pub fn new(c: u32) -> Result<Self> {
        if c < 1 {
            return Err(Error::invalid("cutoff", "must be >= 1"));
        }
        Ok(Self { c })
    }

    pub fn cutoff(&self) -> u32 {
        self.c
    }
}

impl DiscardPolicy for UniformCutoff {
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]) {
        let n = state.n_nodes();
        let end = n - 2; // triangular index of (0, n-1)
        for (idx, e) in state.entries().iter().enumerate() {
            if idx == end {
                continue;
            }
            if let Some(r) = e {
                if r.storage_steps >= self.c {
                    flags[if idx < end { idx } else { idx - 1 }] = true;
                }
            }
        }
    }
}

/// Either policy from a sweep row.
#[derive(Debug, Clone, Copy)]
pub enum CutoffPolicy {
    None(NoCutoff),
    Uniform(UniformCutoff),
}

impl CutoffPolicy {
    pub fn from_cutoff(c: Option<u32>) -> Result<Self> {
        Ok(match c {
            None => CutoffPolicy::None(NoCutoff),
            Some(c) => CutoffPolicy::Uniform(UniformCutoff::new(c)?),
        })
    }
}

impl DiscardPolicy for CutoffPolicy {
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]) {
        match self {
            CutoffPolicy::None(p) => p.decide(state, flags),
            CutoffPolicy::Uniform(p) => p.decide(state, flags),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sample,
    Greedy,
}

/// `ln P(bit)` for a Bernoulli with logit `z`, clamped like the probabilities.
#[inline]
pub fn bit_log_prob(z: f64, bit: bool) -> f64 {
    let bound = logit_clamp();
    let z = z.clamp(-bound, bound);
    // ln sigmoid(z) = -softplus(-z); ln(1 - sigmoid(z)) = -softplus(z).
    let s = if bit { -z } else { z };
    -softplus(s)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Joint log-probability of independent Bernoulli bits given logits.
pub fn log_prob_from_logits(logits: &[f64], bits: &[bool]) -> f64 {
    logits
        .iter()
        .zip(bits)
        .map(|(&z, &b)| bit_log_prob(z, b))
        .sum()
}

/// Joint log-probability of independent Bernoulli bits given probabilities.
pub fn bernoulli_log_prob(probs: &[f64], bits: &[bool]) -> f64 {
    probs
        .iter()
        .zip(bits)
        .map(|(&p, &b)| {
            let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            if b {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Draws (or thresholds) discard bits from a sigmoid policy network.
pub fn neural_policy<R: Rng + ?Sized>(
    obs: &Observation,
    net: &Mlp,
    rng: &mut R,
    mode: Mode,
) -> Result<(PolicyDecision, f64)> {
    let expected = obs.0.len().saturating_sub(1);
    if net.output_dim() != expected {
        return Err(Error::Dimension {
            expected,
            got: net.output_dim(),
        });
    }
    let (_, cache) = net.forward(&obs.0)?;
    let mut bits = vec![false; expected];
    let logp = choose_bits(cache.logits(), &mut bits, rng, mode);
    Ok((PolicyDecision(bits), logp))
}

fn choose_bits<R: Rng + ?Sized>(logits: &[f64], bits: &mut [bool], rng: &mut R, mode: Mode) -> f64 {
    for (b, &z) in bits.iter_mut().zip(logits) {
        let p = sigmoid(z);
        *b = match mode {
            Mode::Sample => rng.random::<f64>() < p,
            Mode::Greedy => p > 0.5,
        };
    }
    log_prob_from_logits(logits, bits)
}

/// One decision made by a [`NeuralPolicy`] during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub observation: Vec<f64>,
    pub bits: Vec<bool>,
    pub log_prob: f64,
}

/// Rollout adapter running a policy network at every step.
pub struct NeuralPolicy<'a> {
    net: &'a Mlp,
    scale: f64,
    mode: Mode,
    rng: SimRng,
    cache: ForwardCache,
    obs: Vec<f64>,
    record: Option<Vec<DecisionRecord>>,
}

impl<'a> NeuralPolicy<'a> {
    pub fn new(net: &'a Mlp, d: &DerivedParams, mode: Mode, rng: SimRng) -> Result<Self> {
        let n_nodes = d.n_segments + 1;
        let n_pairs = n_nodes * (n_nodes - 1) / 2;
        if net.input_dim() != n_pairs {
            return Err(Error::Dimension {
                expected: n_pairs,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != n_pairs - 1 {
            return Err(Error::Dimension {
                expected: n_pairs - 1,
                got: net.output_dim(),
            });
        }
        Ok(Self {
            net,
            scale: d.storage_scale(),
            mode,
            rng,
            cache: net.new_cache(),
            obs: vec![0.0; n_pairs],
            record: None,
        })
    }

    /// Keep every observation, action and log-probability.
    pub fn recording(mut self, capacity: usize) -> Self {
        self.record = Some(Vec::with_capacity(capacity));
        self
    }

    pub fn take_records(&mut self) -> Vec<DecisionRecord> {
        self.record.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl DiscardPolicy for NeuralPolicy<'_> {
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]) {
        encode_into(state, self.scale, &mut self.obs);
        self.net
            .forward_into(&self.obs, &mut self.cache)
            .expect("dimensions checked at construction");
        let logp = choose_bits(self.cache.logits(), flags, &mut self.rng, self.mode);
        if let Some(rec) = self.record.as_mut() {
            rec.push(DecisionRecord {
                observation: self.obs.clone(),
                bits: flags.to_vec(),
                log_prob: logp,
            });
        }
    }
}

/// Controllable pairs for a chain with `n_segments` segments.
pub fn decision_pairs(n_segments: usize) -> Vec<(usize, usize)> {
    controllable_pairs(n_segments + 1).collect()
}
