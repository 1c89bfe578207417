//! Trajectory runs, key-rate estimates with 3-sigma intervals, and cut-off
//! sweeps.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{step, ChainState, DiscardPolicy};
use crate::physics::{DeliveryTally, DerivedParams, KeyRateEstimate};
use crate::policies::CutoffPolicy;
use crate::seeds::{derive_seed, SimRng};

use rand::SeedableRng;

/// Deliveries of one trajectory started from the empty chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub total_steps: u64,
    /// `(step index, storage steps)` of each delivered end-to-end pair.
    pub deliveries: Vec<(u64, u32)>,
    pub seed: u64,
}

impl TrajectoryRecord {
    pub fn tally(&self, d: &DerivedParams) -> DeliveryTally {
        let mut t = DeliveryTally::default();
        for &(_, s) in &self.deliveries {
            t.push(s, d);
        }
        t
    }

    pub fn key_rate(&self, d: &DerivedParams) -> KeyRateEstimate {
        self.tally(d).key_rate(self.total_steps, d)
    }
}

/// Runs `total_steps` steps of `policy` from the empty chain.
pub fn run_trajectory<P: DiscardPolicy + ?Sized>(
    d: &DerivedParams,
    policy: &mut P,
    total_steps: u64,
    seed: u64,
) -> Result<TrajectoryRecord> {
    if total_steps == 0 {
        return Err(Error::invalid("T", "must be >= 1"));
    }
    let mut state = ChainState::new(d.n_segments);
    let mut rng = SimRng::seed_from_u64(seed);
    let mut deliveries = Vec::new();
    for t in 0..total_steps {
        if let Some(s) = step(&mut state, policy, d, &mut rng).delivered {
            deliveries.push((t, s));
        }
    }
    Ok(TrajectoryRecord {
        total_steps,
        deliveries,
        seed,
    })
}

/// Mean and `3 * sd / sqrt(M)` of per-trajectory values.
///
/// Values are summed in sorted order so the result does not depend on the
/// order of the input.
pub fn mean_ci3(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (m - 1.0);
    Ok((mean, 3.0 * var.sqrt() / m.sqrt()))
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Combines per-trajectory tallies into one estimate.
///
/// The rate is the mean of per-trajectory key rates, with its 3-sigma
/// interval. `e_x` and `mean_decay` pool all deliveries.
pub fn estimate_tallies(
    tallies: &[DeliveryTally],
    total_steps: u64,
    d: &DerivedParams,
) -> Result<KeyRateEstimate> {
    let per: Vec<KeyRateEstimate> = tallies.iter().map(|t| t.key_rate(total_steps, d)).collect();
    let (rate, ci) = mean_ci3(&per.iter().map(|e| e.rate_per_s).collect::<Vec<_>>())?;
    let (raw, _) = mean_ci3(&per.iter().map(|e| e.raw_rate_per_s).collect::<Vec<_>>())?;
    let count: u64 = tallies.iter().map(|t| t.count).sum();
    let decay_sum = sorted_sum(tallies.iter().map(|t| t.decay_sum).collect());
    let mean_decay = if count == 0 {
        0.0
    } else {
        (decay_sum / count as f64).clamp(0.0, 1.0)
    };
    Ok(KeyRateEstimate {
        rate_per_s: rate,
        raw_rate_per_s: raw,
        mean_decay,
        e_x: 0.5 * (1.0 - mean_decay),
        ci3sigma: ci,
        n_samples: tallies.len() as u64,
    })
}

/// Estimate over independent trajectories of equal length.
pub fn estimate(records: &[TrajectoryRecord], d: &DerivedParams) -> Result<KeyRateEstimate> {
    let total_steps = records.first().map_or(0, |r| r.total_steps);
    if records.iter().any(|r| r.total_steps != total_steps) {
        return Err(Error::invalid("records", "trajectories differ in length"));
    }
    let tallies: Vec<DeliveryTally> = records.iter().map(|r| r.tally(d)).collect();
    estimate_tallies(&tallies, total_steps, d)
}

/// Maps `f` over `0..n` on `workers` threads (all cores when `None`),
/// returning results in index order.
pub fn parallel_map<T, F>(n: usize, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match workers {
        Some(0) => Err(Error::invalid("workers", "must be >= 1")),
        Some(1) => Ok((0..n).map(f).collect()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::invalid("workers", e.to_string()))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
        }
        None => Ok((0..n).into_par_iter().map(f).collect()),
    }
}

/// Seed of trajectory `index` under `master`. Shared across cut-off rows so
/// rows compare the same random streams.
pub fn trajectory_seed(master: u64, index: u64) -> u64 {
    derive_seed(master, &[index])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the no-cut-off baseline.
    pub cutoff: Option<u32>,
    pub estimate: KeyRateEstimate,
    pub trajectories: usize,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "cutoff,rate_per_s,ci3sigma,raw_rate_per_s,e_x,M,T,seed";

impl SweepResult {
    /// Highest-rate row; the earliest wins ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.estimate.rate_per_s >= r.estimate.rate_per_s => Some(b),
                _ => Some(r),
            })
    }

    pub fn no_cutoff(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.cutoff.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = r
                .cutoff
                .map_or_else(|| "none".to_string(), |c| c.to_string());
            let e = &r.estimate;
            let _ = writeln!(
                out,
                "{c},{},{},{},{},{},{},{}",
                e.rate_per_s, e.ci3sigma, e.raw_rate_per_s, e.e_x, r.trajectories, r.steps, r.seed
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let bad =
            |line: usize, what: &str| Error::invalid("sweep csv", format!("line {line}: {what}"));
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<sweep csv>", e))?;
            if i == 0 {
                if line.trim() != SWEEP_HEADER {
                    return Err(bad(1, "unexpected header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 1, "expected 8 fields"));
            }
            let num = |k: usize| {
                f[k].trim()
                    .parse::<f64>()
                    .map_err(|_| bad(i + 1, "bad number"))
            };
            let cutoff = match f[0].trim() {
                "none" => None,
                s => Some(s.parse().map_err(|_| bad(i + 1, "bad cutoff"))?),
            };
            let e_x = num(4)?;
            let trajectories: usize = f[5].trim().parse().map_err(|_| bad(i + 1, "bad M"))?;
            rows.push(SweepRow {
                cutoff,
                estimate: KeyRateEstimate {
                    rate_per_s: num(1)?,
                    raw_rate_per_s: num(3)?,
                    mean_decay: 1.0 - 2.0 * e_x,
                    e_x,
                    ci3sigma: num(2)?,
                    n_samples: trajectories as u64,
                },
                trajectories,
                steps: f[6].trim().parse().map_err(|_| bad(i + 1, "bad T"))?,
                seed: f[7].trim().parse().map_err(|_| bad(i + 1, "bad seed"))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(std::io::BufReader::new(f))
    }
}

/// Runs `trajectories` trajectories of `steps` steps for every entry of
/// `cutoffs` (`None` meaning no cut-off). Rows keep the input order.
pub fn sweep_cutoff(
    d: &DerivedParams,
    cutoffs: &[Option<u32>],
    steps: u64,
    trajectories: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<SweepResult> {
    if steps == 0 {
        return Err(Error::invalid("T", "must be >= 1"));
    }
    if trajectories < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: trajectories,
        });
    }
    let policies = cutoffs
        .iter()
        .map(|&c| CutoffPolicy::from_cutoff(c))
        .collect::<Result<Vec<_>>>()?;
    let jobs = policies.len() * trajectories;
    let tallies = parallel_map(jobs, workers, |job| {
        let (row, k) = (job / trajectories, job % trajectories);
        let mut policy = policies[row];
        run_trajectory(d, &mut policy, steps, trajectory_seed(seed, k as u64)).map(|r| r.tally(d))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let rows = cutoffs
        .iter()
        .zip(tallies.chunks(trajectories))
        .map(|(&cutoff, chunk)| {
            Ok(SweepRow {
                cutoff,
                estimate: estimate_tallies(chunk, steps, d)?,
                trajectories,
                steps,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

/// Best row of a sweep over `cutoffs` plus the no-cut-off baseline.
pub fn benchmark(
    d: &DerivedParams,
    cutoffs: &[u32],
    steps: u64,
    trajectories: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<SweepRow> {
    let mut all: Vec<Option<u32>> = cutoffs.iter().map(|&c| Some(c)).collect();
    all.push(None);
    let sweep = sweep_cutoff(d, &all, steps, trajectories, seed, workers)?;
    Ok(sweep.best().cloned().expect("at least the baseline row"))
}
