//! Checkpoint directories: a TOML manifest beside raw parameter, optimizer and
//! telemetry files, each pinned by its SHA-256.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_telemetry, write_telemetry, Guard, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nets::checkpoint::{read_f64s, read_params, sha256_hex, write_f64s, write_params};
use crate::nets::{Adam, DiffusionNet, ParamSet, ValueNet};
use crate::signals::SignalPair;

pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const CHECKPOINT_FORMAT: &str = "mose-checkpoint-v1";

const DIFFUSION_FILE: &str = "diffusion.f32";
const VALUE_FILE: &str = "value.f32";
const ADAM_D_FILE: &str = "adam_d.f64";
const ADAM_V_FILE: &str = "adam_v.f64";
const TELEMETRY_FILE: &str = "telemetry.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub iter: usize,
    pub config_hash: String,
    pub corpus_hash: String,
    pub diffusion_params: usize,
    pub value_params: usize,
    pub adam_d: OptimizerState,
    pub adam_v: OptimizerState,
    pub guard: Guard,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
    pub config: TrainConfig,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// SHA-256 over every pair's id and the bits of both signals.
pub fn corpus_hash(corpus: &[SignalPair]) -> String {
    let mut h = Sha256::new();
    for p in corpus {
        h.update(p.id.as_bytes());
        h.update([0]);
        for v in p.x0.iter().chain(&p.y) {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn opt_state(a: &Adam) -> OptimizerState {
    OptimizerState {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        steps: a.steps,
    }
}

fn write_adam(path: &Path, a: &Adam) -> Result<String> {
    let mut all = a.m.clone();
    all.extend_from_slice(&a.v);
    write_f64s(path, &all)
}

fn read_adam(path: &Path, sha: &str, state: &OptimizerState, len: usize) -> Result<Adam> {
    let all = read_f64s(path, Some(sha))?;
    if all.len() != 2 * len {
        return Err(ckpt_err(path, format!("{} moments for {len} parameters", all.len())));
    }
    let (m, v) = all.split_at(len);
    Ok(Adam {
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        m: m.to_vec(),
        v: v.to_vec(),
        steps: state.steps,
    })
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
        let m: CheckpointManifest = toml::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(ckpt_err(&path, format!("unknown format `{}`", m.format)));
        }
        if m.config.hash() != m.config_hash {
            return Err(ckpt_err(&path, "embedded config does not match its hash"));
        }
        m.config.validate().map_err(|e| ckpt_err(&path, e.to_string()))?;
        Ok(m)
    }

    pub fn file(&self, dir: &Path, name: &str) -> Result<(PathBuf, String)> {
        let sha = self
            .files
            .get(name)
            .ok_or_else(|| ckpt_err(&dir.join(MANIFEST_FILE), format!("no entry for {name}")))?;
        Ok((dir.join(name), sha.clone()))
    }

    /// Loads the diffusion network parameters only.
    pub fn load_diffusion(&self, dir: &Path) -> Result<(DiffusionNet, ParamSet)> {
        let net = DiffusionNet::new(self.config.diffusion_net());
        let (path, sha) = self.file(dir, DIFFUSION_FILE)?;
        let params = read_params(&path, net.layout(), Some(&sha))?;
        Ok((net, params))
    }
}

impl Trainer {
    /// Writes the full training state into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        files.insert(
            DIFFUSION_FILE.to_string(),
            write_params(&dir.join(DIFFUSION_FILE), &self.theta_d)?,
        );
        files.insert(
            VALUE_FILE.to_string(),
            write_params(&dir.join(VALUE_FILE), &self.theta_v)?,
        );
        files.insert(
            ADAM_D_FILE.to_string(),
            write_adam(&dir.join(ADAM_D_FILE), &self.opt_d)?,
        );
        files.insert(
            ADAM_V_FILE.to_string(),
            write_adam(&dir.join(ADAM_V_FILE), &self.opt_v)?,
        );
        let telemetry = dir.join(TELEMETRY_FILE);
        write_telemetry(&telemetry, &self.telemetry)?;
        files.insert(TELEMETRY_FILE.to_string(), sha256_hex(&std::fs::read(&telemetry)?));
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            iter: self.iter,
            config_hash: self.cfg.hash(),
            corpus_hash: corpus_hash(&self.corpus),
            diffusion_params: self.theta_d.len(),
            value_params: self.theta_v.len(),
            adam_d: opt_state(&self.opt_d),
            adam_v: opt_state(&self.opt_v),
            guard: self.guard.clone(),
            files,
            config: self.cfg.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| ckpt_err(dir, e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`]. When `expected` is given its
    /// hash must match the checkpoint's config.
    pub fn resume(dir: &Path, corpus: Vec<SignalPair>, expected: Option<&TrainConfig>) -> Result<Self> {
        let m = CheckpointManifest::read(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if let Some(cfg) = expected {
            if cfg.hash() != m.config_hash {
                return Err(ckpt_err(&manifest_path, "config hash differs from the checkpoint's"));
            }
        }
        if corpus_hash(&corpus) != m.corpus_hash {
            return Err(ckpt_err(
                &manifest_path,
                "corpus differs from the one the run was trained on",
            ));
        }
        let mut t = Trainer::new(m.config.clone(), corpus)?;
        let (path, sha) = m.file(dir, DIFFUSION_FILE)?;
        t.theta_d = read_params(&path, t.d.layout(), Some(&sha))?;
        let (path, sha) = m.file(dir, VALUE_FILE)?;
        t.theta_v = read_params(&path, ValueNet::new(m.config.value_net()).layout(), Some(&sha))?;
        let (path, sha) = m.file(dir, ADAM_D_FILE)?;
        t.opt_d = read_adam(&path, &sha, &m.adam_d, t.theta_d.len())?;
        let (path, sha) = m.file(dir, ADAM_V_FILE)?;
        t.opt_v = read_adam(&path, &sha, &m.adam_v, t.theta_v.len())?;
        let (path, sha) = m.file(dir, TELEMETRY_FILE)?;
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != sha {
            return Err(ckpt_err(&path, "checksum mismatch"));
        }
        t.telemetry = read_telemetry(&path)?;
        if t.telemetry.len() != m.iter || m.iter > m.config.n_total {
            return Err(ckpt_err(&manifest_path, "iteration count disagrees with telemetry"));
        }
        t.guard = m.guard;
        t.iter = m.iter;
        Ok(t)
    }
}
