use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mdp::{ChainState, DiscardPolicy};
use crate::montecarlo::{estimate_tallies, parallel_map, run_trajectory, trajectory_seed};
use crate::neuralnet::{Activation, AdamState, Mlp};
use crate::physics::{n_pairs, DerivedParams, KeyRateEstimate};
use crate::policies::{Mode, NeuralPolicy, PolicyDecision};
use crate::seeds::{derive_seed, rng_for};

use super::buffer::{compute_advantages, suffix_returns, ExperienceBuffer};
use super::checkpoint::{Checkpoint, CheckpointDir};
use super::config::TrainConfig;
use super::update::{policy_update, value_update};

pub const EPOCH_LOG_HEADER: &str =
    "epoch,mean_key_rate,mean_advantage,approx_kl,policy_loss,value_loss,seconds";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: u32,
    pub mean_key_rate: f64,
    /// Mean advantage before normalisation.
    pub mean_advantage: f64,
    pub approx_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.mean_key_rate,
            self.mean_advantage,
            self.approx_kl,
            self.policy_loss,
            self.value_loss,
            self.seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::invalid(
                "epoch log",
                format!("expected 7 fields in {line:?}"),
            ));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|e| Error::invalid("epoch log", format!("{:?}: {e}", f[k])))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|e| Error::invalid("epoch log", format!("{:?}: {e}", f[0])))?,
            mean_key_rate: num(1)?,
            mean_advantage: num(2)?,
            approx_kl: num(3)?,
            policy_loss: num(4)?,
            value_loss: num(5)?,
            seconds: num(6)?,
        })
    }
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(EPOCH_LOG_HEADER) {
        return Err(Error::invalid(
            "epoch log",
            format!("bad header in {}", path.display()),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EpochLog::parse)
        .collect()
}

/// Whether training should go on after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Mlp,
    pub value: Mlp,
    /// Rows written by this call (earlier rows of a resumed run excluded).
    pub logs: Vec<EpochLog>,
    /// Epochs completed in total, including those before a resume.
    pub epochs_completed: u32,
    /// Latest policy checkpoint, when a run directory was given.
    pub checkpoint: Option<PathBuf>,
}

pub fn policy_dims(d: &DerivedParams, hidden: &[usize]) -> Vec<usize> {
    let n = n_pairs(d.n_segments + 1);
    let mut dims = vec![n];
    dims.extend(hidden);
    dims.push(n - 1);
    dims
}

fn initial_nets(cfg: &TrainConfig, d: &DerivedParams) -> Result<(Mlp, Mlp)> {
    let dims = policy_dims(d, &cfg.hyper.hidden);
    let policy = Mlp::init(
        &dims,
        Activation::Tanh,
        Activation::Sigmoid,
        derive_seed(cfg.seed, &[u64::MAX, 0]),
        cfg.hyper.init_scale,
    )?;
    let mut vdims = dims;
    *vdims.last_mut().expect("non-empty") = 1;
    let value = Mlp::init(
        &vdims,
        Activation::Tanh,
        Activation::Identity,
        derive_seed(cfg.seed, &[u64::MAX, 1]),
        cfg.hyper.init_scale,
    )?;
    Ok((policy, value))
}

/// Rolls out `N` trajectories of the sampling policy for `epoch` and
/// gathers them, in trajectory order, into one buffer with suffix returns.
pub fn collect(
    policy: &Mlp,
    d: &DerivedParams,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<ExperienceBuffer> {
    let h = &cfg.hyper;
    let runs = parallel_map(h.trajectories, cfg.workers, |k| {
        let path = [u64::from(epoch), k as u64];
        let rng = rng_for(cfg.seed, &[path[0], path[1], 1]);
        let mut pol =
            NeuralPolicy::new(policy, d, Mode::Sample, rng)?.recording(h.trajectory_len as usize);
        let record = run_trajectory(
            d,
            &mut pol,
            h.trajectory_len,
            derive_seed(cfg.seed, &[path[0], path[1], 0]),
        )?;
        let returns = suffix_returns(&record, d, h.return_window);
        let rate = record.key_rate(d).rate_per_s;
        Ok::<_, Error>((pol.take_records(), returns, rate))
    })?;
    let mut buf = ExperienceBuffer::new(policy.input_dim(), policy.output_dim());
    for run in runs {
        let (decisions, returns, rate) = run?;
        buf.push_trajectory(&decisions, &returns, rate)?;
    }
    Ok(buf)
}

struct Learner {
    policy: Mlp,
    value: Mlp,
    policy_adam: AdamState,
    value_adam: AdamState,
}

impl Learner {
    fn checkpoints(&self, epoch: u32, hash: &str) -> (Checkpoint, Checkpoint) {
        (
            Checkpoint::from_net(&self.policy, Some(&self.policy_adam), epoch, hash),
            Checkpoint::from_net(&self.value, Some(&self.value_adam), epoch, hash),
        )
    }

    fn epoch(&mut self, d: &DerivedParams, cfg: &TrainConfig, epoch: u32) -> Result<EpochLog> {
        let start = Instant::now();
        let h = &cfg.hyper;
        let mut buf = collect(&self.policy, d, cfg, epoch)?;
        compute_advantages(&mut buf, &self.value, h.normalize_advantages)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_key_rate = mean(&buf.trajectory_rates);
        let mean_advantage = mean(&buf.raw_advantages);
        let stats = policy_update(
            &mut self.policy,
            &mut self.policy_adam,
            &buf,
            h.alpha_pi,
            h.eps_clip,
            h.n_pi,
            h.kl_max,
        )?;
        let value_loss = value_update(
            &mut self.value,
            &mut self.value_adam,
            &buf,
            h.alpha_v,
            h.n_v,
        )?;
        let log = EpochLog {
            epoch,
            mean_key_rate,
            mean_advantage,
            approx_kl: stats.approx_kl,
            policy_loss: stats.loss,
            value_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        let finite = [
            log.mean_key_rate,
            log.mean_advantage,
            log.approx_kl,
            log.policy_loss,
            log.value_loss,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("epoch {epoch} statistics")));
        }
        Ok(log)
    }
}

fn open_log(path: &Path, keep_through: Option<u32>) -> Result<fs::File> {
    let mut text = format!("{EPOCH_LOG_HEADER}\n");
    if let Some(last) = keep_through {
        if path.exists() {
            for row in read_epoch_log(path)? {
                if row.epoch <= last {
                    writeln!(text, "{}", row.csv_row()).expect("string write");
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs the full loop. See [`train_with`].
pub fn train(cfg: &TrainConfig, run_dir: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    train_with(cfg, run_dir, resume, |_, _| Control::Continue)
}

/// Runs up to `cfg.hyper.epochs` epochs in total, calling `observer` after
/// each with the new row and every row of this call so far.
///
/// With a run directory, the epoch log and checkpoints go there; the
/// initial networks are checkpointed as epoch 0. `resume` continues from the
/// latest checkpoint, which must carry the same config hash, and drops log
/// rows past it. A non-finite value aborts the run after saving the state
/// from before the failing epoch.
pub fn train_with<F>(
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    resume: bool,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &[EpochLog]) -> Control,
{
    cfg.validate()?;
    let d = cfg.params.derive()?;
    let hash = cfg.config_hash();
    let dir = run_dir.map(CheckpointDir::new);

    let (mut learner, start) = match dir
        .as_ref()
        .filter(|_| resume)
        .map(CheckpointDir::load_latest)
    {
        Some(Ok(Some((p, v)))) => {
            if p.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written for config {} but this run is {hash}",
                    p.config_hash
                )));
            }
            let policy = p.to_net()?;
            let value = v.to_net()?;
            let learner = Learner {
                policy_adam: p
                    .adam
                    .unwrap_or_else(|| AdamState::new(policy.n_params(), cfg.hyper.eps_adam)),
                value_adam: v
                    .adam
                    .unwrap_or_else(|| AdamState::new(value.n_params(), cfg.hyper.eps_adam)),
                policy,
                value,
            };
            (learner, p.epoch)
        }
        Some(Err(e)) => return Err(e),
        _ => {
            let (policy, value) = initial_nets(cfg, &d)?;
            let learner = Learner {
                policy_adam: AdamState::new(policy.n_params(), cfg.hyper.eps_adam),
                value_adam: AdamState::new(value.n_params(), cfg.hyper.eps_adam),
                policy,
                value,
            };
            (learner, 0)
        }
    };

    let mut log_file = match &dir {
        Some(dir) => {
            let (p, v) = learner.checkpoints(start, &hash);
            dir.save(&p, &v)?;
            Some(open_log(
                &dir.root().join(EPOCH_LOG_FILE),
                (start > 0).then_some(start),
            )?)
        }
        None => None,
    };

    let mut logs = Vec::new();
    let mut completed = start;
    while completed < cfg.hyper.epochs {
        let epoch = completed + 1;
        let snapshot = dir.as_ref().map(|_| learner.checkpoints(completed, &hash));
        let log = match learner.epoch(&d, cfg, epoch) {
            Ok(log) => log,
            Err(e) => {
                if let (Some(dir), Some((p, v)), Error::NonFinite(_)) = (&dir, snapshot, &e) {
                    dir.save(&p, &v)?;
                }
                return Err(e);
            }
        };
        completed = epoch;
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", log.csv_row()).map_err(|e| Error::io(EPOCH_LOG_FILE, e))?;
            f.flush().map_err(|e| Error::io(EPOCH_LOG_FILE, e))?;
        }
        logs.push(log);
        let control = observer(logs.last().expect("just pushed"), &logs);
        let last = control == Control::Stop || completed == cfg.hyper.epochs;
        if let Some(dir) = &dir {
            if last || completed % cfg.hyper.checkpoint_every == 0 {
                let (p, v) = learner.checkpoints(completed, &hash);
                dir.save(&p, &v)?;
            }
        }
        if control == Control::Stop {
            break;
        }
    }

    Ok(TrainOutcome {
        policy: learner.policy,
        value: learner.value,
        logs,
        epochs_completed: completed,
        checkpoint: dir.map(|d| d.latest_policy()),
    })
}

/// Key rate of a frozen policy over `trajectories` runs of `steps` steps.
pub fn evaluate(
    policy: &Mlp,
    d: &DerivedParams,
    trajectories: usize,
    steps: u64,
    seed: u64,
    mode: Mode,
    workers: Option<usize>,
) -> Result<KeyRateEstimate> {
    let tallies = parallel_map(trajectories, workers, |k| {
        let rng = rng_for(seed, &[k as u64, 1]);
        let mut pol = NeuralPolicy::new(policy, d, mode, rng)?;
        Ok::<_, Error>(
            run_trajectory(d, &mut pol, steps, trajectory_seed(seed, k as u64))?.tally(d),
        )
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    estimate_tallies(&tallies, steps, d)
}

/// Visit counts keyed by (storage vector, action bit string).
pub type Census = BTreeMap<(Vec<u32>, String), u64>;

struct Counting<P> {
    inner: P,
    counts: Census,
}

impl<P: DiscardPolicy> DiscardPolicy for Counting<P> {
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]) {
        self.inner.decide(state, flags);
        let bits = PolicyDecision(flags.to_vec()).as_bits();
        *self
            .counts
            .entry((state.storage_vector(), bits))
            .or_default() += 1;
    }
}

/// Counts the actions a policy takes in each state it meets over one run.
pub fn census(
    policy: &Mlp,
    d: &DerivedParams,
    steps: u64,
    seed: u64,
    mode: Mode,
) -> Result<Census> {
    let inner = NeuralPolicy::new(policy, d, mode, rng_for(seed, &[0, 1]))?;
    let mut counting = Counting {
        inner,
        counts: Census::new(),
    };
    run_trajectory(d, &mut counting, steps, trajectory_seed(seed, 0))?;
    Ok(counting.counts)
}

pub const CENSUS_HEADER: &str = "state,action,count";

/// `state,action,count` rows sorted by state then action; the state is the
/// space-separated storage vector.
pub fn census_csv(census: &Census) -> String {
    let mut out = format!("{CENSUS_HEADER}\n");
    for ((state, action), count) in census {
        let s: Vec<String> = state.iter().map(u32::to_string).collect();
        writeln!(out, "{},{action},{count}", s.join(" ")).expect("string write");
    }
    out
}
