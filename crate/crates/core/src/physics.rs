//! Physical parameters of a repeater chain and the BB84 key-rate math.
//!
//! Only two imperfections are modelled: photon loss in the fibre segments and
//! dephasing of stored states. A bipartite state stored for `t` steps keeps a
//! coherence factor `decay_per_step^t = exp(-t * tau0 / tau_c)`, so its X-basis
//! error is `(1 - decay^t) / 2` and its Z-basis error is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default attenuation length of telecom fibre, km.
pub const DEFAULT_ATTENUATION_KM: f64 = 22.0;
/// Default signal speed in fibre, m/s.
pub const DEFAULT_SIGNAL_SPEED: f64 = 2.0e8;
/// Largest supported chain. Node sets are stored as `u64` bitmasks.
pub const MAX_SEGMENTS: usize = 62;

/// Physical configuration of a repeater chain, in the units used in the
/// literature (km, m/s, ms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeaterParams {
    pub n_segments: usize,
    #[serde(rename = "L0_km")]
    pub segment_km: f64,
    #[serde(rename = "L_att_km", default = "default_attenuation")]
    pub attenuation_km: f64,
    #[serde(rename = "c_signal_mps", default = "default_signal_speed")]
    pub signal_speed_mps: f64,
    #[serde(rename = "tau_c_ms")]
    pub coherence_ms: f64,
    #[serde(default = "default_efficiency")]
    pub p_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max_steps: Option<u32>,
}

fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION_KM
}

fn default_signal_speed() -> f64 {
    DEFAULT_SIGNAL_SPEED
}

fn default_efficiency() -> f64 {
    1.0
}

impl RepeaterParams {
    /// Chain with default fibre constants, unit efficiency and no storage cap.
    pub fn new(n_segments: usize, segment_km: f64, coherence_ms: f64) -> Self {
        Self {
            n_segments,
            segment_km,
            attenuation_km: DEFAULT_ATTENUATION_KM,
            signal_speed_mps: DEFAULT_SIGNAL_SPEED,
            coherence_ms,
            p_x: 1.0,
            t_max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 || self.n_segments > MAX_SEGMENTS {
            return Err(Error::invalid(
                "n_segments",
                format!("must be in 1..={MAX_SEGMENTS}, got {}", self.n_segments),
            ));
        }
        positive("L0_km", self.segment_km)?;
        positive("L_att_km", self.attenuation_km)?;
        positive("c_signal_mps", self.signal_speed_mps)?;
        positive("tau_c_ms", self.coherence_ms)?;
        if !(0.0..=1.0).contains(&self.p_x) {
            return Err(Error::invalid(
                "p_x",
                format!("must be in [0, 1], got {}", self.p_x),
            ));
        }
        if self.t_max_steps == Some(0) {
            return Err(Error::invalid("t_max_steps", "must be >= 1 when set"));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_segments + 1
    }

    /// Number of node pairs, i.e. the observation dimension.
    pub fn n_pairs(&self) -> usize {
        n_pairs(self.n_nodes())
    }

    pub fn derive(&self) -> Result<DerivedParams> {
        derive(self)
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            name,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

/// Number of unordered node pairs in a chain of `n_nodes` nodes.
pub fn n_pairs(n_nodes: usize) -> usize {
    n_nodes * (n_nodes - 1) / 2
}

/// Per-step quantities derived from [`RepeaterParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub n_segments: usize,
    /// Duration of one step (one round of communication over a segment), s.
    pub tau0_s: f64,
    /// Fibre transmissivity of one segment.
    pub eta: f64,
    /// Probability of heralding a fresh pair in one segment per step.
    pub p_gen: f64,
    /// Coherence factor of a bipartite state after one step of storage.
    pub decay_per_step: f64,
    pub t_max_steps: Option<u32>,
}

impl DerivedParams {
    /// `ln(decay_per_step) = -tau0 / tau_c`.
    pub fn log_decay(&self) -> f64 {
        self.decay_per_step.ln()
    }

    /// Coherence factor after `t` steps, computed from the logarithm so large
    /// `t` does not accumulate rounding.
    pub fn decay_after(&self, t: u32) -> f64 {
        (t as f64 * self.log_decay()).exp()
    }

    /// `tau0 / tau_c`, the per-step storage scale used for observations.
    pub fn storage_scale(&self) -> f64 {
        -self.log_decay()
    }
}

pub fn derive(params: &RepeaterParams) -> Result<DerivedParams> {
    params.validate()?;
    let tau0_s = params.segment_km * 1e3 / params.signal_speed_mps;
    let eta = (-params.segment_km / params.attenuation_km).exp();
    let p_gen = params.p_x * eta;
    let decay_per_step = (-tau0_s / (params.coherence_ms * 1e-3)).exp();
    if decay_per_step <= 0.0 {
        return Err(Error::invalid(
            "tau_c_ms",
            "coherence time too short: per-step decay underflows",
        ));
    }
    if eta <= 0.0 {
        return Err(Error::invalid("L0_km", "transmissivity underflows"));
    }
    Ok(DerivedParams {
        n_segments: params.n_segments,
        tau0_s,
        eta,
        p_gen,
        decay_per_step,
        t_max_steps: params.t_max_steps,
    })
}

/// Binary entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            value: x,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(entropy_unchecked(x))
}

fn entropy_unchecked(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// BB84 secret key fraction `1 - h(e1) - h(e2)`. May be negative.
pub fn secret_key_fraction(e1: f64, e2: f64) -> Result<f64> {
    Ok(1.0 - binary_entropy(e1)? - binary_entropy(e2)?)
}

/// Fidelity of a state stored for `t_steps` with the ideal Bell pair.
pub fn fidelity_from_storage(t_steps: u32, d: &DerivedParams) -> f64 {
    0.5 * (1.0 + d.decay_after(t_steps))
}

/// Secret-key-rate estimate for a set of deliveries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateEstimate {
    pub rate_per_s: f64,
    pub raw_rate_per_s: f64,
    pub mean_decay: f64,
    pub e_x: f64,
    pub ci3sigma: f64,
    pub n_samples: u64,
}

impl KeyRateEstimate {
    /// Unclamped secret key fraction at this error rate.
    pub fn raw_fraction(&self) -> f64 {
        1.0 - entropy_unchecked(self.e_x)
    }
}

/// Running sums of deliveries, used for whole trajectories and for suffixes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeliveryTally {
    pub count: u64,
    pub decay_sum: f64,
}

impl DeliveryTally {
    pub fn push(&mut self, storage: u32, d: &DerivedParams) {
        self.count += 1;
        self.decay_sum += d.decay_after(storage);
    }

    /// Key rate of these deliveries over `steps` steps of duration `tau0_s`.
    pub fn key_rate(&self, steps: u64, d: &DerivedParams) -> KeyRateEstimate {
        debug_assert!(steps > 0);
        let duration = steps as f64 * d.tau0_s;
        if self.count == 0 {
            return KeyRateEstimate {
                rate_per_s: 0.0,
                raw_rate_per_s: 0.0,
                mean_decay: 0.0,
                e_x: 0.5,
                ci3sigma: 0.0,
                n_samples: 0,
            };
        }
        let raw = self.count as f64 / duration;
        let mean_decay = (self.decay_sum / self.count as f64).clamp(0.0, 1.0);
        let e_x = 0.5 * (1.0 - mean_decay);
        // e_Z is identically zero for pure dephasing.
        let fraction = 1.0 - entropy_unchecked(e_x);
        KeyRateEstimate {
            rate_per_s: raw * fraction.max(0.0),
            raw_rate_per_s: raw,
            mean_decay,
            e_x,
            ci3sigma: 0.0,
            n_samples: self.count,
        }
    }
}

/// Key rate from the storage times of delivered end-to-end states over a run
/// of `total_steps` steps.
pub fn key_rate_from_deliveries(
    delivery_storages: &[u32],
    total_steps: u64,
    d: &DerivedParams,
) -> Result<KeyRateEstimate> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps", "must be >= 1"));
    }
    let mut tally = DeliveryTally::default();
    for &t in delivery_storages {
        tally.push(t, d);
    }
    Ok(tally.key_rate(total_steps, d))
}
