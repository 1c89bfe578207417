//! Exact results for tiny chains, used to check the Monte Carlo engine.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{advance, step, ChainState, ErrorRecord, IndexSet};
use crate::physics::{secret_key_fraction, DerivedParams};
use crate::policies::PolicyDecision;
use crate::seeds::rng_for;

/// Series are cut once the neglected probability mass drops below this.
pub const TAIL_BOUND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    /// Mean number of steps between deliveries.
    pub expected_cycle_steps: f64,
    pub raw_rate_per_s: f64,
    /// `E[decay^t]` over delivered states.
    pub mean_decay: f64,
    pub e_x: f64,
    pub rate_per_s: f64,
    /// Probability mass left out of the truncated series.
    pub truncation_tail: f64,
}

/// Renewal analysis of a two-segment chain under swap-asap and an optional
/// uniform cut-off (pairs are dropped once their storage reaches `c`).
///
/// From the empty chain a step either delivers a fresh pair (`t = 2`),
/// leaves one segment holding a pair, or stays empty. A lone pair with
/// storage `a` is joined by its neighbour with probability `p`, giving a
/// delivery of storage `a + 2`; otherwise it ages and is dropped once it
/// hits the cut-off.
pub fn exact_two_segment(d: &DerivedParams, cutoff: Option<u32>) -> Result<ExactResult> {
    if d.n_segments != 2 {
        return Err(Error::invalid(
            "n_segments",
            format!("exact solver needs 2 segments, got {}", d.n_segments),
        ));
    }
    if cutoff == Some(0) {
        return Err(Error::invalid("cutoff", "must be >= 1"));
    }
    let p = d.p_gen;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(
            "p_gen",
            format!("must be in (0, 1], got {p}"),
        ));
    }
    // Largest storage a lone pair may keep. The storage cap drops pairs
    // strictly above it.
    let keep = match (cutoff.map(|c| c - 1), d.t_max_steps) {
        (Some(k), Some(m)) => Some(k.min(m)),
        (k, m) => k.or(m),
    };

    // Walk the lone-pair chain S_1, S_2, ... up to S_keep.
    let miss = 1.0 - p;
    let mut survive = 1.0; // probability of reaching S_a
    let mut chain_deliver = 0.0;
    let mut chain_duration = 0.0;
    let mut chain_decay = 0.0;
    let mut tail = 0.0;
    let mut a: u32 = 1;
    loop {
        if keep.is_some_and(|k| a > k) {
            // Dropped after `a - 1` steps in the chain.
            chain_duration += survive * (a - 1) as f64;
            break;
        }
        if keep.is_none() && survive < TAIL_BOUND {
            tail = survive;
            break;
        }
        chain_deliver += survive * p;
        chain_duration += survive * p * a as f64;
        chain_decay += survive * p * d.decay_after(a + 2);
        survive *= miss;
        a += 1;
    }

    let both = p * p;
    let one = 2.0 * p * miss;
    let success = both + one * chain_deliver;
    let round_duration = 1.0 + one * chain_duration;
    let expected_cycle_steps = round_duration / success;
    let mean_decay = (both * d.decay_after(2) + one * chain_decay) / success;

    let raw_rate_per_s = 1.0 / (expected_cycle_steps * d.tau0_s);
    let e_x = 0.5 * (1.0 - mean_decay);
    let rate_per_s = raw_rate_per_s * secret_key_fraction(e_x, 0.0)?.max(0.0);
    Ok(ExactResult {
        expected_cycle_steps,
        raw_rate_per_s,
        mean_decay,
        e_x,
        rate_per_s,
        truncation_tail: tail,
    })
}

type Outcome = (ChainState, Option<u32>);

/// Exact distribution of (next state, delivery) for a fixed decision.
pub fn successor_distribution(
    state: &ChainState,
    decision: &PolicyDecision,
    d: &DerivedParams,
) -> Result<HashMap<Outcome, f64>> {
    if state.n_segments() > 3 {
        return Err(Error::invalid(
            "n_segments",
            "exact enumeration supports at most 3",
        ));
    }
    if decision.0.len() + 1 != state.n_pairs() {
        return Err(Error::Dimension {
            expected: state.n_pairs() - 1,
            got: decision.0.len(),
        });
    }
    let free: Vec<usize> = (0..state.n_segments())
        .filter(|&k| state.segment_free(k))
        .collect();
    let mut dist = HashMap::new();
    for mask in 0u32..(1 << free.len()) {
        let mut prob = 1.0;
        let mut next = state.clone();
        let mut generated = IndexSet::default();
        for (b, &k) in free.iter().enumerate() {
            if mask & (1 << b) != 0 {
                prob *= d.p_gen;
                next.insert(k, k + 1, ErrorRecord::default())?;
                generated.insert(k);
            } else {
                prob *= 1.0 - d.p_gen;
            }
        }
        if prob == 0.0 {
            continue;
        }
        let mut fixed = |_: &ChainState, flags: &mut [bool]| flags.copy_from_slice(&decision.0);
        let out = advance(&mut next, &mut fixed, d, generated);
        *dist.entry((next, out.delivered)).or_insert(0.0) += prob;
    }
    Ok(dist)
}

/// Largest absolute gap between exact successor probabilities and sampled
/// frequencies over `trials` simulated steps.
pub fn transition_check(
    state: &ChainState,
    decision: &PolicyDecision,
    d: &DerivedParams,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let exact = successor_distribution(state, decision, d)?;
    let mut counts: HashMap<Outcome, u64> = HashMap::new();
    let mut rng = rng_for(seed, &[]);
    let mut fixed = |_: &ChainState, flags: &mut [bool]| flags.copy_from_slice(&decision.0);
    for _ in 0..trials {
        let mut next = state.clone();
        let out = step(&mut next, &mut fixed, d, &mut rng);
        *counts.entry((next, out.delivered)).or_insert(0) += 1;
    }
    let n = trials as f64;
    let mut worst: f64 = 0.0;
    for (k, &pr) in &exact {
        let freq = counts.get(k).copied().unwrap_or(0) as f64 / n;
        worst = worst.max((freq - pr).abs());
    }
    for (k, &c) in &counts {
        if !exact.contains_key(k) {
            worst = worst.max(c as f64 / n);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(p: f64, decay: f64) -> DerivedParams {
        DerivedParams {
            n_segments: 2,
            tau0_s: 1e-4,
            eta: p,
            p_gen: p,
            decay_per_step: decay,
            t_max_steps: None,
        }
    }

    fn closed_form(p: f64, decay: f64) -> (f64, f64) {
        let cycle = (3.0 - 2.0 * p) / (p * (2.0 - p));
        let q = (1.0 - p) * decay;
        let md = decay * decay * p / (2.0 - p) * (1.0 + 2.0 * q / (1.0 - q));
        (cycle, md)
    }

    #[test]
    fn deterministic_generation() {
        let r = exact_two_segment(&two(1.0, 0.9), None).unwrap();
        assert!((r.expected_cycle_steps - 1.0).abs() < 1e-15);
        assert!((r.raw_rate_per_s - 1e4).abs() < 1e-9);
        assert!((r.mean_decay - 0.81).abs() < 1e-15);
    }

    #[test]
    fn matches_closed_form_without_cutoff() {
        for &p in &[0.05, 0.1, 0.3, 0.5, 0.9, 1.0] {
            for &decay in &[0.5, 0.9, 0.999] {
                let r = exact_two_segment(&two(p, decay), None).unwrap();
                let (cycle, md) = closed_form(p, decay);
                assert!(
                    (r.expected_cycle_steps / cycle - 1.0).abs() < 1e-10,
                    "p={p}"
                );
                assert!(
                    (r.mean_decay / md - 1.0).abs() < 1e-10,
                    "p={p} decay={decay}"
                );
                assert!(r.truncation_tail < TAIL_BOUND);
            }
        }
    }

    #[test]
    fn cutoff_one_by_hand() {
        // Lone pairs never survive, so only same-step double generation
        // delivers: E[cycle] = 1 / p^2 and t = 2.
        let r = exact_two_segment(&two(0.5, 0.9), Some(1)).unwrap();
        assert!((r.expected_cycle_steps - 4.0).abs() < 1e-12);
        assert!((r.mean_decay - 0.81).abs() < 1e-15);
        assert_eq!(r.truncation_tail, 0.0);
    }

    #[test]
    fn cutoff_two_by_hand() {
        // E = 1 + 2p(1-p) S1 + (1-p)^2 E and S1 = 1 + (1-p) E, so p = 1/2
        // gives E = 3.
        let r = exact_two_segment(&two(0.5, 0.9), Some(2)).unwrap();
        assert!((r.expected_cycle_steps - 3.0).abs() < 1e-12);
        // Deliveries: 1/4 per round at t = 2, 1/4 at t = 3; success 1/2.
        let md = (0.25 * 0.81 + 0.25 * 0.729) / 0.5;
        assert!((r.mean_decay - md).abs() < 1e-12);
    }

    #[test]
    fn large_cutoff_converges() {
        let gap = |p: f64, c: u32| {
            let d = two(p, 0.95);
            let a = exact_two_segment(&d, Some(c)).unwrap();
            let b = exact_two_segment(&d, None).unwrap();
            a.rate_per_s / b.rate_per_s - 1.0
        };
        for &p in &[0.15, 0.3, 0.7] {
            assert!(gap(p, 200).abs() < 1e-9, "p={p}");
        }
        // At p = 0.1 a mass of 0.9^199 ~ 8e-10 is still alive at c = 200;
        // the exact gap (independent evaluation) is 1.36770e-9. The 1e-12
        // truncation of the reference shifts it by ~1.7e-11.
        assert!((gap(0.1, 200) / 1.36770e-9 - 1.0).abs() < 2e-2);
        assert!(gap(0.1, 230).abs() < 1e-10);
    }

    #[test]
    fn storage_cap_acts_as_cutoff() {
        let mut d = two(0.3, 0.95);
        let plain = exact_two_segment(&d, Some(4)).unwrap();
        d.t_max_steps = Some(3);
        assert_eq!(exact_two_segment(&d, None).unwrap(), plain);
        assert_eq!(exact_two_segment(&d, Some(9)).unwrap(), plain);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut d = two(0.3, 0.9);
        assert!(exact_two_segment(&d, Some(0)).is_err());
        d.n_segments = 3;
        assert!(exact_two_segment(&d, None).is_err());
        assert!(exact_two_segment(&two(0.0, 0.9), None).is_err());
    }

    #[test]
    fn degenerate_transitions_are_exact() {
        let keep = PolicyDecision::keep_all(2);
        for &p in &[0.0, 1.0] {
            let dev = transition_check(&ChainState::new(2), &keep, &two(p, 0.9), 1000, 1).unwrap();
            assert_eq!(dev, 0.0);
        }
    }

    #[test]
    fn empty_two_segment_patterns() {
        let d = two(0.5, 0.9);
        let keep = PolicyDecision::keep_all(2);
        let dist = successor_distribution(&ChainState::new(2), &keep, &d).unwrap();
        assert_eq!(dist.len(), 4);
        assert!(dist.values().all(|&v| (v - 0.25).abs() < 1e-15));
        let trials = 1_000_000u64;
        let dev = transition_check(&ChainState::new(2), &keep, &d, trials, 5).unwrap();
        assert!(
            dev < 4.0 * (0.25f64 * 0.75 / trials as f64).sqrt(),
            "deviation {dev}"
        );
    }

    #[test]
    fn three_segment_with_discards() {
        let d = DerivedParams {
            n_segments: 3,
            ..two(0.4, 0.9)
        };
        let mut s = ChainState::new(3);
        s.insert(1, 2, ErrorRecord::with_storage(2)).unwrap();
        let mut dec = PolicyDecision::keep_all(5);
        dec.0[2] = true; // (1, 2)
        let dist = successor_distribution(&s, &dec, &d).unwrap();
        let total: f64 = dist.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let dev = transition_check(&s, &dec, &d, 200_000, 3).unwrap();
        assert!(dev < 4.0 * (0.25f64 / 200_000.0).sqrt());
    }
}
