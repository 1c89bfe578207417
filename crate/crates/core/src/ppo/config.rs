use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::RepeaterParams;

/// Time window a suffix return is normalised by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReturnWindow {
    /// Deliveries at steps `>= t` over `(L - t) * tau0`.
    #[default]
    Suffix,
    /// Deliveries at steps `>= t` over the whole trajectory `L * tau0`.
    Full,
}

/// Learning hyperparameters. Defaults are the long-segment, 1.45 ms run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Trajectory length in steps.
    #[serde(rename = "L")]
    pub trajectory_len: u64,
    /// Trajectories per epoch.
    #[serde(rename = "N")]
    pub trajectories: usize,
    pub alpha_pi: f64,
    pub alpha_v: f64,
    pub eps_clip: f64,
    pub n_pi: u32,
    pub n_v: u32,
    pub kl_max: f64,
    pub eps_adam: f64,
    pub epochs: u32,
    pub checkpoint_every: u32,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
    pub return_window: ReturnWindow,
    /// Weights start uniform in `±init_scale / sqrt(fan_in)`.
    pub init_scale: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            trajectory_len: 8000,
            trajectories: 4,
            alpha_pi: 4e-4,
            alpha_v: 1e-3,
            eps_clip: 0.2,
            n_pi: 120,
            n_v: 80,
            kl_max: 0.015,
            eps_adam: 1e-8,
            epochs: 500,
            checkpoint_every: 10,
            hidden: vec![32, 32],
            normalize_advantages: true,
            return_window: ReturnWindow::Suffix,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub params: RepeaterParams,
    pub hyper: Hyperparams,
    pub seed: u64,
    /// Collection threads; `None` uses every core. Results do not depend on it.
    pub workers: Option<usize>,
}

impl TrainConfig {
    pub fn new(params: RepeaterParams, hyper: Hyperparams, seed: u64) -> Self {
        Self {
            params,
            hyper,
            seed,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let h = &self.hyper;
        let positive = [
            ("alpha_pi", h.alpha_pi),
            ("alpha_v", h.alpha_v),
            ("kl_max", h.kl_max),
            ("eps_adam", h.eps_adam),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if !(h.eps_clip > 0.0 && h.eps_clip < 1.0) {
            return Err(Error::invalid("eps_clip", "must be in (0, 1)"));
        }
        if h.trajectory_len == 0 || h.trajectories == 0 || h.n_pi == 0 || h.n_v == 0 {
            return Err(Error::invalid("L/N/n_pi/n_v", "counts must be >= 1"));
        }
        if h.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every", "must be >= 1"));
        }
        if h.hidden.is_empty() || h.hidden.contains(&0) {
            return Err(Error::invalid(
                "hidden",
                "need at least one non-empty hidden layer",
            ));
        }
        if !(h.init_scale.is_finite() && h.init_scale >= 0.0) {
            return Err(Error::invalid("init_scale", "must be finite and >= 0"));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers", "must be >= 1"));
        }
        Ok(())
    }

    /// Digest of everything that shapes the learning trajectory. The epoch
    /// budget, checkpoint cadence and worker count are left out so a run
    /// can be extended or resumed with different values.
    pub fn config_hash(&self) -> String {
        let mut h = self.hyper.clone();
        h.epochs = 0;
        h.checkpoint_every = 0;
        let canonical = serde_json::json!({
            "params": self.params,
            "hyper": h,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}
