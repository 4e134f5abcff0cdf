//! JSON checkpoints: configuration echo, parameters, BN statistics and optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use super::model::{build_network, GaeiUnetConfig, Network};
use super::optim::AdamState;
use super::train::TrainConfig;
use crate::elastic::ElasticConfig;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, RunningStats, Tensor4};

pub const CHECKPOINT_FORMAT: &str = "gaei-unet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub dims: [usize; 4],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredStats {
    pub name: String,
    #[serde(flatten)]
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: GaeiUnetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub elastic: ElasticConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<StoredTensor>,
    pub running_stats: Vec<StoredStats>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(
        network: &Network,
        train: &TrainConfig,
        loss: &LossWeights,
        elastic: &ElasticConfig,
        optimizer: &AdamState,
        epoch: usize,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: network.config().clone(),
            train: train.clone(),
            loss: *loss,
            elastic: *elastic,
            epoch,
            params: network
                .params()
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    dims: p.value.dims(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
            running_stats: network
                .batchnorms()
                .iter()
                .map(|b| StoredStats {
                    name: b.name.clone(),
                    stats: b.stats.clone(),
                })
                .collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("invalid checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Copies parameters and running statistics into a network of the same architecture.
    pub fn restore_network(&self, network: &mut Network) -> Result<()> {
        if network.config() != &self.network {
            return Err(Error::Checkpoint(format!(
                "network configuration {:?} does not match checkpoint {:?}",
                network.config(),
                self.network
            )));
        }
        let mut params = network.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter tensors, network has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, stored) in params.iter_mut().zip(&self.params) {
            if p.name != stored.name || p.value.dims() != stored.dims {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.dims(),
                    stored.name,
                    stored.dims
                )));
            }
            p.value = Tensor4::from_vec(stored.dims, stored.values.clone())?;
        }
        let mut bns = network.batchnorms_mut();
        if bns.len() != self.running_stats.len() {
            return Err(Error::Checkpoint("batch-norm layer count differs".into()));
        }
        for (bn, stored) in bns.iter_mut().zip(&self.running_stats) {
            if bn.name != stored.name || bn.stats.mean.len() != stored.stats.mean.len() {
                return Err(Error::Checkpoint(format!("batch-norm {} does not match stored {}", bn.name, stored.name)));
            }
            bn.stats = stored.stats.clone();
        }
        Ok(())
    }

    /// Rebuilds the network; `expected` (when given) must equal the stored configuration.
    pub fn load_network(&self, expected: Option<&GaeiUnetConfig>) -> Result<Network> {
        if let Some(cfg) = expected {
            if cfg != &self.network {
                return Err(Error::Checkpoint(format!(
                    "requested network {cfg:?} does not match checkpoint {:?}",
                    self.network
                )));
            }
        }
        let mut network = build_network(&self.network, &mut RngStream::new(0, 0))?;
        self.restore_network(&mut network)?;
        Ok(network)
    }
}
