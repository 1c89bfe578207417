use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qrsim_core::ppo::Hyperparams;
use qrsim_core::RepeaterParams;
use serde::{Deserialize, Serialize};

/// One cut-off entry of a sweep: a step count or the string `"none"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CValueRepr", into = "CValueRepr")]
pub struct CValue(pub Option<u32>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CValueRepr {
    Steps(u32),
    Word(String),
}

impl TryFrom<CValueRepr> for CValue {
    type Error = String;

    fn try_from(r: CValueRepr) -> Result<Self, String> {
        match r {
            CValueRepr::Steps(0) => Err("cut-off must be >= 1".into()),
            CValueRepr::Steps(c) => Ok(CValue(Some(c))),
            CValueRepr::Word(w) if w == "none" => Ok(CValue(None)),
            CValueRepr::Word(w) => Err(format!(
                "cut-off must be a positive integer or \"none\", got {w:?}"
            )),
        }
    }
}

impl From<CValue> for CValueRepr {
    fn from(c: CValue) -> Self {
        match c.0 {
            Some(c) => CValueRepr::Steps(c),
            None => CValueRepr::Word("none".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub c_values: Vec<CValue>,
    #[serde(rename = "T")]
    pub steps: u64,
    #[serde(rename = "M")]
    pub trajectories: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    #[default]
    Sample,
    Greedy,
}

impl From<PolicyMode> for qrsim_core::policies::Mode {
    fn from(m: PolicyMode) -> Self {
        match m {
            PolicyMode::Sample => Self::Sample,
            PolicyMode::Greedy => Self::Greedy,
        }
    }
}

fn default_eval_m() -> usize {
    100
}

fn default_eval_t() -> u64 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    pub checkpoint: PathBuf,
    #[serde(rename = "M", default = "default_eval_m")]
    pub trajectories: usize,
    #[serde(rename = "T", default = "default_eval_t")]
    pub steps: u64,
    /// Sweep CSV to compare against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<PathBuf>,
    #[serde(default)]
    pub mode: PolicyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusBlock {
    pub checkpoint: PathBuf,
    #[serde(rename = "T", default = "default_eval_t")]
    pub steps: u64,
    #[serde(default)]
    pub mode: PolicyMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sweep,
    Train,
    Eval,
    Census,
}

impl Command {
    pub fn key(self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Census => "census",
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub params: RepeaterParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub census: Option<CensusBlock>,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "n_segments",
    "L0_km",
    "L_att_km",
    "c_signal_mps",
    "tau_c_ms",
    "p_x",
    "t_max_steps",
    "seed",
    "out",
    "sweep",
    "train",
    "eval",
    "census",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).context("config is not valid JSON")?;
        let Some(obj) = raw.as_object() else {
            bail!("config must be a JSON object");
        };
        if let Some(k) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
            bail!("unknown config field {k:?}");
        }
        let cfg: Self = serde_json::from_value(raw).context("invalid config")?;
        let blocks = [
            cfg.sweep.is_some(),
            cfg.train.is_some(),
            cfg.eval.is_some(),
            cfg.census.is_some(),
        ];
        if blocks.iter().filter(|&&b| b).count() != 1 {
            bail!("config needs exactly one of the blocks sweep, train, eval, census");
        }
        cfg.params.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The mode the file's block is for.
    pub fn command(&self) -> Command {
        if self.sweep.is_some() {
            Command::Sweep
        } else if self.train.is_some() {
            Command::Train
        } else if self.eval.is_some() {
            Command::Eval
        } else {
            Command::Census
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}
