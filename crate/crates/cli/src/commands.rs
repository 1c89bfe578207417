use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qrsim_core::montecarlo::{sweep_cutoff, SweepResult};
use qrsim_core::ppo::{self, Checkpoint, TrainConfig};
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::Common;

#[derive(Debug, Serialize)]
pub struct Ratios {
    pub vs_no_cutoff: f64,
    pub vs_benchmark: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub rate_per_s: f64,
    pub ci3sigma: f64,
    pub raw_rate_per_s: f64,
    pub e_x: f64,
    #[serde(rename = "M")]
    pub trajectories: usize,
    #[serde(rename = "T")]
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Ratios>,
}

pub fn run(cmd: Command, args: &Common) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.command() != cmd {
        bail!(
            "`qrsim {}` needs a config with a \"{}\" block, {} has \"{}\"",
            cmd.key(),
            cmd.key(),
            args.config.display(),
            cfg.command().key()
        );
    }
    if args.resume && cmd != Command::Train {
        bail!("--resume only applies to `qrsim train`");
    }
    if args.workers == Some(0) {
        bail!("--workers must be >= 1");
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    let default_out = match cmd {
        Command::Sweep => "sweep.csv",
        Command::Train => "run",
        Command::Eval => "eval.json",
        Command::Census => "census.csv",
    };
    let out = cfg
        .out
        .get_or_insert_with(|| PathBuf::from(default_out))
        .clone();
    match cmd {
        Command::Sweep => sweep(&cfg, &out, args.workers),
        Command::Train => train(&cfg, &out, args.workers, args.resume),
        Command::Eval => eval(&cfg, &out, args.workers),
        Command::Census => census(&cfg, &out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<out>.config.json` beside a single-file output.
fn echo_beside(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    write(Path::new(&name), &cfg.to_json())
}

fn sweep(cfg: &RunConfig, out: &Path, workers: Option<usize>) -> Result<()> {
    let block = cfg.sweep.as_ref().expect("sweep block");
    let d = cfg.params.derive()?;
    let cutoffs: Vec<Option<u32>> = block.c_values.iter().map(|c| c.0).collect();
    let result = sweep_cutoff(
        &d,
        &cutoffs,
        block.steps,
        block.trajectories,
        cfg.seed,
        workers,
    )?;
    write(out, &result.to_csv())?;
    echo_beside(cfg, out)?;
    if let Some(best) = result.best() {
        let c = best
            .cutoff
            .map_or_else(|| "none".to_string(), |c| c.to_string());
        println!(
            "best cut-off {c}: {} /s ± {}",
            best.estimate.rate_per_s, best.estimate.ci3sigma
        );
    }
    println!("{}", out.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, workers: Option<usize>, resume: bool) -> Result<()> {
    let hyper = cfg.train.clone().expect("train block");
    let mut tc = TrainConfig::new(cfg.params.clone(), hyper, cfg.seed);
    tc.workers = workers;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("effective_config.json"), &cfg.to_json())?;
    let outcome = ppo::train(&tc, Some(out), resume)?;
    if let Some(last) = outcome.logs.last() {
        println!(
            "epoch {}: mean key rate {} /s",
            last.epoch, last.mean_key_rate
        );
    }
    println!(
        "{}",
        outcome.checkpoint.expect("run directory given").display()
    );
    Ok(())
}

fn load_policy(path: &Path) -> Result<qrsim_core::neuralnet::Mlp> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_net()?)
}

fn eval(cfg: &RunConfig, out: &Path, workers: Option<usize>) -> Result<()> {
    let block = cfg.eval.as_ref().expect("eval block");
    let d = cfg.params.derive()?;
    let net = load_policy(&block.checkpoint)?;
    let e = ppo::evaluate(
        &net,
        &d,
        block.trajectories,
        block.steps,
        cfg.seed,
        block.mode.into(),
        workers,
    )?;
    let ratios = match &block.sweep {
        Some(path) => {
            let s = SweepResult::read_csv(path)
                .with_context(|| format!("reading sweep {}", path.display()))?;
            let base = s.no_cutoff().context("sweep has no \"none\" row")?;
            let best = s.best().context("sweep is empty")?;
            Some(Ratios {
                vs_no_cutoff: e.rate_per_s / base.estimate.rate_per_s,
                vs_benchmark: e.rate_per_s / best.estimate.rate_per_s,
            })
        }
        None => None,
    };
    let summary = EvalSummary {
        rate_per_s: e.rate_per_s,
        ci3sigma: e.ci3sigma,
        raw_rate_per_s: e.raw_rate_per_s,
        e_x: e.e_x,
        trajectories: block.trajectories,
        steps: block.steps,
        ratios,
    };
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    write(out, &text)?;
    echo_beside(cfg, out)?;
    print!("{text}");
    Ok(())
}

fn census(cfg: &RunConfig, out: &Path) -> Result<()> {
    let block = cfg.census.as_ref().expect("census block");
    let d = cfg.params.derive()?;
    let net = load_policy(&block.checkpoint)?;
    let c = ppo::census(&net, &d, block.steps, cfg.seed, block.mode.into())?;
    write(out, &ppo::census_csv(&c))?;
    echo_beside(cfg, out)?;
    let mut states: Vec<&Vec<u32>> = c.keys().map(|(s, _)| s).collect();
    states.dedup();
    println!(
        "{} states, {} rows: {}",
        states.len(),
        c.len(),
        out.display()
    );
    Ok(())
}
