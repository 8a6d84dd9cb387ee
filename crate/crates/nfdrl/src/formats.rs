//! On-disk formats: CSV tables, JSON-lines reports and checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nfdrl_core::agent::{export_distribution, MetricsRow};
use nfdrl_core::envs::TabularMdp;
use nfdrl_core::grad::{AdamState, NetworkDims, NetworkParams, TENSOR_NAMES};
use nfdrl_core::oracles::PropertyReport;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{ConfigError, RunConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A float with 17 significant digits, enough to round-trip any `f64`.
pub fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Write `contents` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut file = std::fs::File::create(&tmp)?;
    file.write_all(contents)?;
    file.sync_all()?;
    std::fs::rename(&tmp, path)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,eval_cramer_mean,greedy_return_mean,epsilon\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            float(r.loss),
            float(r.eval_cramer_mean),
            float(r.greedy_return_mean),
            float(r.epsilon)
        );
    }
    out
}

/// Learned density of every state-action pair on its export grid.
pub fn distributions_csv(net: &NetworkParams, mdp: &TabularMdp) -> nfdrl_core::Result<String> {
    let mut out = String::from("state,action,support,density\n");
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            for (y, d) in export_distribution(net, s, a)? {
                let _ = writeln!(out, "{s},{a},{},{}", float(y), float(d));
            }
        }
    }
    Ok(out)
}

pub fn reports_jsonl(reports: &[PropertyReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: Map<String, Value>,
    /// Environment timesteps taken.
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: OptimizerState,
}

/// Why a checkpoint could not be used.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn named(dims: &NetworkDims, tensors: &[Vec<f64>]) -> Vec<NamedTensor> {
    TENSOR_NAMES
        .iter()
        .zip(dims.shapes())
        .zip(tensors)
        .map(|((name, (r, c)), data)| NamedTensor {
            name: (*name).to_owned(),
            shape: [r, c],
            data: data.clone(),
        })
        .collect()
}

fn unnamed(dims: &NetworkDims, tensors: &[NamedTensor], what: &str) -> Result<Vec<Vec<f64>>, CheckpointError> {
    if tensors.len() != TENSOR_NAMES.len() {
        return Err(CheckpointError::Schema(format!(
            "{what}: expected {} tensors, found {}",
            TENSOR_NAMES.len(),
            tensors.len()
        )));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for ((t, name), (r, c)) in tensors.iter().zip(TENSOR_NAMES).zip(dims.shapes()) {
        if t.name != name || t.shape != [r, c] || t.data.len() != r * c {
            return Err(CheckpointError::Schema(format!(
                "{what}: tensor `{}` with shape {:?} does not match `{name}` with shape [{r}, {c}]",
                t.name, t.shape
            )));
        }
        out.push(t.data.clone());
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(config: &RunConfig, step: u64, net: &NetworkParams, optimizer: &AdamState) -> Self {
        let dims = net.dims();
        Self {
            format_version: CHECKPOINT_VERSION,
            config: config.to_map(),
            step,
            tensors: named(dims, net.tensors()),
            optimizer: OptimizerState {
                step: optimizer.step,
                m: named(dims, &optimizer.m),
                v: named(dims, &optimizer.v),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Schema(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::from_map(&self.config)?)
    }

    /// Rebuild the network for `mdp`, checking every tensor shape.
    pub fn network(&self, config: &RunConfig, mdp: &TabularMdp) -> Result<NetworkParams, CheckpointError> {
        let dims = dims_for(config, mdp);
        let tensors = unnamed(&dims, &self.tensors, "parameters")?;
        NetworkParams::from_tensors(dims, tensors).map_err(|e| CheckpointError::Schema(e.to_string()))
    }

    pub fn optimizer(&self, config: &RunConfig, mdp: &TabularMdp) -> Result<AdamState, CheckpointError> {
        let dims = dims_for(config, mdp);
        Ok(AdamState {
            m: unnamed(&dims, &self.optimizer.m, "optimizer m")?,
            v: unnamed(&dims, &self.optimizer.v, "optimizer v")?,
            step: self.optimizer.step,
        })
    }
}

pub fn dims_for(config: &RunConfig, mdp: &TabularMdp) -> NetworkDims {
    NetworkDims {
        n_states: mdp.n_states(),
        hidden1: config.train.hidden_size_1,
        hidden2: config.train.hidden_size_2,
        n_actions: mdp.n_actions(),
        n_components: config.train.n_components,
    }
}
