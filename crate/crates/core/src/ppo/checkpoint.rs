use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{Activation, AdamState, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_act: Activation,
    pub out_act: Activation,
}

/// On-disk form of one network, with optional optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    /// Per layer, row-major `[out][in]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
    pub epoch: u32,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_net(net: &Mlp, adam: Option<&AdamState>, epoch: u32, config_hash: &str) -> Self {
        let dims = net.dims();
        Self {
            arch: Arch {
                input: dims[0],
                hidden: dims[1..dims.len() - 1].to_vec(),
                output: dims[dims.len() - 1],
                hidden_act: net.hidden_activation(),
                out_act: net.output_activation(),
            },
            weights: (0..net.n_layers()).map(|l| net.weight_rows(l)).collect(),
            biases: (0..net.n_layers())
                .map(|l| net.layer(l).1.to_vec())
                .collect(),
            adam: adam.cloned(),
            epoch,
            config_hash: config_hash.to_owned(),
        }
    }

    pub fn to_net(&self) -> Result<Mlp> {
        let mut dims = vec![self.arch.input];
        dims.extend(&self.arch.hidden);
        dims.push(self.arch.output);
        let net = Mlp::from_layers(
            &dims,
            self.arch.hidden_act,
            self.arch.out_act,
            &self.weights,
            &self.biases,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(a) = &self.adam {
            if a.m.len() != net.n_params() || a.v.len() != net.n_params() {
                return Err(Error::Checkpoint(format!(
                    "optimiser state has {} entries for {} parameters",
                    a.m.len(),
                    net.n_params()
                )));
            }
        }
        Ok(net)
    }

    /// Writes through a temporary file and a rename, so a reader never sees
    /// a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.to_net()?;
        Ok(ck)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// File layout of a training run's checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointDir {
    root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn policy_path(&self, epoch: u32) -> PathBuf {
        self.root.join(format!("policy_{epoch:05}.json"))
    }

    pub fn value_path(&self, epoch: u32) -> PathBuf {
        self.root.join(format!("value_{epoch:05}.json"))
    }

    pub fn latest_policy(&self) -> PathBuf {
        self.root.join("policy_latest.json")
    }

    pub fn latest_value(&self) -> PathBuf {
        self.root.join("value_latest.json")
    }

    /// Saves both networks under their epoch name and as the latest pair.
    pub fn save(&self, policy: &Checkpoint, value: &Checkpoint) -> Result<()> {
        policy.save(&self.policy_path(policy.epoch))?;
        value.save(&self.value_path(value.epoch))?;
        value.save(&self.latest_value())?;
        // Policy last: its presence marks a complete pair.
        policy.save(&self.latest_policy())
    }

    /// The latest pair, if one was written.
    pub fn load_latest(&self) -> Result<Option<(Checkpoint, Checkpoint)>> {
        let p = self.latest_policy();
        if !p.exists() {
            return Ok(None);
        }
        let policy = Checkpoint::load(&p)?;
        let value = Checkpoint::load(&self.latest_value())?;
        if policy.epoch != value.epoch || policy.config_hash != value.config_hash {
            return Err(Error::Checkpoint(
                "policy and value checkpoints disagree".into(),
            ));
        }
        Ok(Some((policy, value)))
    }
}
