//! Residual U-Net with DropBlock, bottleneck context aggregation and the
//! elastic + cross-entropy training objective.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, StoredStats, StoredTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{BatchNorm, Conv, ConvUnit, DropBlockSpec, Pass, ResBlock, UpConv};
pub use loss::{loss_total, loss_total_with_config, LossOutput, LossWeights, CE_EPSILON};
pub use model::{build_network, GaeiUnetConfig, Network, NUM_CLASSES};
pub use optim::{Adam, AdamConfig, AdamState, LrSchedule};
pub use train::{batch_of, evaluate_network, EpochLog, TrainConfig, Trainer};

use serde::{Deserialize, Serialize};

/// Ablation variants: which components are enabled and which loss is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "unet+dropblock")]
    UnetDropBlock,
    #[serde(rename = "unet+agca")]
    UnetAgca,
    #[serde(rename = "gaei")]
    Gaei,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Unet, Variant::UnetDropBlock, Variant::UnetAgca, Variant::Gaei];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetDropBlock => "unet+dropblock",
            Variant::UnetAgca => "unet+agca",
            Variant::Gaei => "gaei",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Sets the architecture flags on `config`.
    pub fn apply(self, config: &mut GaeiUnetConfig) {
        config.use_dropblock = matches!(self, Variant::UnetDropBlock | Variant::Gaei);
        config.use_agca = matches!(self, Variant::UnetAgca | Variant::Gaei);
    }

    /// Only the full variant trains with the elastic term.
    pub fn loss_weights(self) -> LossWeights {
        match self {
            Variant::Gaei => LossWeights::default(),
            _ => LossWeights::cross_entropy_only(),
        }
    }
}
