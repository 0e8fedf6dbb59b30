use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discretization::{LearnableTimeParams, TimeGrid};
use crate::error::{Error, Result};
use crate::solver::SolverCoefficients;
use crate::teacher::Dataset;
use crate::trainer::{TrainOutput, TrainStats};

use super::config::{ExperimentConfig, TrainMode};

const MAGIC: &[u8; 8] = b"DSLVCKPT";
const VERSION: u32 = 1;

/// Trained parameters plus everything needed to resume or audit the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub mode: TrainMode,
    pub coeffs: SolverCoefficients,
    pub params: Option<LearnableTimeParams>,
    pub grid: TimeGrid,
    pub stats: TrainStats,
    pub diverged: Option<String>,
    /// `(record id, x_T′)` for every training record.
    #[serde(skip)]
    pub x_prime: Vec<(u64, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, mode: TrainMode, out: &TrainOutput, dataset: &Dataset) -> Self {
        Self {
            config_hash: config.hash(),
            mode,
            coeffs: out.coeffs.clone(),
            params: out.params.clone(),
            grid: out.grid.clone(),
            stats: out.stats.clone(),
            diverged: out
                .diverged
                .as_ref()
                .map(|d| format!("iteration {}: {}", d.iteration, d.detail)),
            x_prime: dataset
                .train
                .iter()
                .map(|r| (r.id, r.x_t_prime.clone()))
                .collect(),
        }
    }

    /// Refuses a checkpoint trained under a different config unless forced.
    pub fn check_config(&self, config: &ExperimentConfig, force: bool) -> Result<()> {
        let expected = config.hash();
        if self.config_hash != expected && !force {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained with config {} but the given config hashes to {}; pass --force to evaluate anyway",
                &self.config_hash[..12.min(self.config_hash.len())],
                &expected[..12]
            )));
        }
        let dim = config.problem.model.components[0].mean.len();
        if self.x_prime.first().is_some_and(|(_, x)| x.len() != dim) {
            return Err(Error::Compatibility(format!(
                "checkpoint inputs have dimension {}, config model has {dim}",
                self.x_prime[0].1.len()
            )));
        }
        if self.grid.n() != self.coeffs.n {
            return Err(Error::Compatibility("checkpoint grid and coefficients disagree on N".into()));
        }
        Ok(())
    }

    /// Writes the stored `x_T′` back into a dataset.
    pub fn restore_inputs(&self, dataset: &mut Dataset) -> Result<()> {
        if self.x_prime.len() != dataset.train.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} inputs, dataset has {} training records",
                self.x_prime.len(),
                dataset.train.len()
            )));
        }
        for ((id, x), r) in self.x_prime.iter().zip(&mut dataset.train) {
            if *id != r.id || x.len() != r.x_t.len() {
                return Err(Error::Compatibility(format!("record {} does not match checkpoint", r.id)));
            }
            r.x_t_prime.clone_from(x);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let dim = self.x_prime.first().map_or(0, |(_, x)| x.len());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(body.as_bytes());
        out.extend_from_slice(&(self.x_prime.len() as u64).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for (id, x) in &self.x_prime {
            out.extend_from_slice(&id.to_le_bytes());
            for v in x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(path, d.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(bad("checksum mismatch; file is corrupt"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = payload.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let body_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let body = std::str::from_utf8(take(body_len)?).map_err(|_| bad("body is not UTF-8"))?;
        let mut ck: Checkpoint = toml::from_str(body).map_err(|e| bad(&e.to_string()))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        for _ in 0..count {
            let id = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let x = take(8 * dim)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.x_prime.push((id, x));
        }
        if pos != payload.len() {
            return Err(bad("trailing bytes in checkpoint"));
        }
        ck.coeffs.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
