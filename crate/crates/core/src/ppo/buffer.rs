use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::montecarlo::TrajectoryRecord;
use crate::neuralnet::Mlp;
use crate::physics::{DeliveryTally, DerivedParams};
use crate::policies::DecisionRecord;

use super::config::ReturnWindow;

/// Key rate of the deliveries at steps `>= t`, for every `t` in `0..L`.
///
/// With [`ReturnWindow::Suffix`] the rate is taken over the remaining
/// `(L - t) * tau0`; with [`ReturnWindow::Full`] over the whole trajectory.
/// Steps with no later delivery get 0. `R_L` would be 0 and is not stored.
pub fn suffix_returns(
    record: &TrajectoryRecord,
    d: &DerivedParams,
    window: ReturnWindow,
) -> Vec<f64> {
    let len = record.total_steps;
    let mut out = vec![0.0; len as usize];
    let mut tally = DeliveryTally::default();
    let mut pending = record.deliveries.iter().rev().peekable();
    for t in (0..len).rev() {
        while let Some(&&(step, storage)) = pending.peek() {
            if step < t {
                break;
            }
            tally.push(storage, d);
            pending.next();
        }
        let span = match window {
            ReturnWindow::Suffix => len - t,
            ReturnWindow::Full => len,
        };
        out[t as usize] = tally.key_rate(span, d).rate_per_s;
    }
    out
}

/// One epoch of experience, row per step of every trajectory.
///
/// Rows with identical observations share one network evaluation during
/// updates; `group` maps each row to its distinct observation.
#[derive(Debug, Clone, Default)]
pub struct ExperienceBuffer {
    obs_dim: usize,
    act_dim: usize,
    actions: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Advantages before normalisation.
    pub raw_advantages: Vec<f64>,
    group: Vec<u32>,
    unique_obs: Vec<f64>,
    index: HashMap<Vec<u64>, u32>,
    /// Whole-trajectory key rate of each collected trajectory.
    pub trajectory_rates: Vec<f64>,
}

impl ExperienceBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn n_groups(&self) -> usize {
        self.unique_obs.len() / self.obs_dim.max(1)
    }

    pub fn group_obs(&self, g: usize) -> &[f64] {
        &self.unique_obs[g * self.obs_dim..(g + 1) * self.obs_dim]
    }

    pub fn group_of(&self, row: usize) -> usize {
        self.group[row] as usize
    }

    pub fn action(&self, row: usize) -> &[bool] {
        &self.actions[row * self.act_dim..(row + 1) * self.act_dim]
    }

    pub fn observation(&self, row: usize) -> &[f64] {
        self.group_obs(self.group_of(row))
    }

    /// Appends one row.
    pub fn push(&mut self, obs: &[f64], action: &[bool], log_prob: f64, ret: f64) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if action.len() != self.act_dim {
            return Err(Error::Dimension {
                expected: self.act_dim,
                got: action.len(),
            });
        }
        if !log_prob.is_finite() || !ret.is_finite() || obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("experience row {}", self.len())));
        }
        let key: Vec<u64> = obs.iter().map(|v| v.to_bits()).collect();
        let next = self.index.len() as u32;
        let g = *self.index.entry(key).or_insert_with(|| {
            self.unique_obs.extend_from_slice(obs);
            next
        });
        self.group.push(g);
        self.actions.extend_from_slice(action);
        self.log_probs.push(log_prob);
        self.returns.push(ret);
        Ok(())
    }

    /// Appends a trajectory's decisions together with its returns.
    pub fn push_trajectory(
        &mut self,
        decisions: &[DecisionRecord],
        returns: &[f64],
        rate: f64,
    ) -> Result<()> {
        if decisions.len() != returns.len() {
            return Err(Error::Dimension {
                expected: decisions.len(),
                got: returns.len(),
            });
        }
        for (dec, &r) in decisions.iter().zip(returns) {
            self.push(&dec.observation, &dec.bits, dec.log_prob, r)?;
        }
        self.trajectory_rates.push(rate);
        Ok(())
    }

    /// Row count per distinct observation, and the sum of their returns.
    pub fn group_return_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let mut count = vec![0.0; self.n_groups()];
        let mut sum = vec![0.0; self.n_groups()];
        for (row, &r) in self.returns.iter().enumerate() {
            let g = self.group_of(row);
            count[g] += 1.0;
            sum[g] += r;
        }
        (count, sum)
    }
}

/// Value of every distinct observation.
pub fn group_values(buf: &ExperienceBuffer, value_net: &Mlp) -> Result<Vec<f64>> {
    let mut cache = value_net.new_cache();
    (0..buf.n_groups())
        .map(|g| Ok(value_net.forward_into(buf.group_obs(g), &mut cache)?[0]))
        .collect()
}

/// Fills values and advantages `A_t = R_t - V(s_t)`, optionally normalised
/// to zero mean and unit variance over the buffer.
pub fn compute_advantages(
    buf: &mut ExperienceBuffer,
    value_net: &Mlp,
    normalize: bool,
) -> Result<()> {
    if value_net.output_dim() != 1 || value_net.input_dim() != buf.obs_dim() {
        return Err(Error::Dimension {
            expected: buf.obs_dim(),
            got: value_net.input_dim(),
        });
    }
    let gv = group_values(buf, value_net)?;
    buf.values = (0..buf.len()).map(|row| gv[buf.group_of(row)]).collect();
    buf.raw_advantages = buf
        .returns
        .iter()
        .zip(&buf.values)
        .map(|(r, v)| r - v)
        .collect();
    buf.advantages = buf.raw_advantages.clone();
    if normalize && !buf.is_empty() {
        let n = buf.len() as f64;
        let mean = buf.advantages.iter().sum::<f64>() / n;
        let var = buf
            .advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        for a in &mut buf.advantages {
            *a -= mean;
            if sd > 0.0 {
                *a /= sd;
            }
        }
        if sd == 0.0 {
            buf.advantages.fill(0.0);
        }
    }
    if buf.advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantages".into()));
    }
    Ok(())
}
