use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{loss_total, LossOutput, LossWeights};
use super::model::{build_network, GaeiUnetConfig, Network};
use super::optim::{Adam, AdamConfig, LrSchedule};
use crate::data::{augment, AugmentConfig, Sample};
use crate::elastic::{ElasticConfig, ElasticLoss, Field2D};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, EvaluationReport};
use crate::tensor::{Mode, RngStream, Tensor4};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPBLOCK: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// `None` trains on the samples as given.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 8,
            lr_schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.lr_schedule.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted loss over the epoch's steps.
    pub loss: f64,
    pub loss_elastic: f64,
    pub loss_ce: f64,
    pub val_f1: Option<f64>,
    pub val_se: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,loss_elastic,loss_ce,val_F1,val_SE";

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss,
            self.loss_elastic,
            self.loss_ce,
            cell(self.val_f1),
            cell(self.val_se)
        )
    }
}

/// Network, optimizer and loss configuration under training.
pub struct Trainer {
    pub network: Network,
    pub adam: Adam,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub elastic: ElasticConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    elastic_ops: HashMap<(usize, usize), ElasticLoss>,
}

/// Stacks images into `(N, 3, H, W)` and clones their masks.
pub fn batch_of(samples: &[&Sample]) -> Result<(Tensor4, Vec<Field2D>)> {
    let images: Vec<Tensor4> = samples.iter().map(|s| s.image.clone()).collect();
    Ok((Tensor4::stack(&images)?, samples.iter().map(|s| s.mask.clone()).collect()))
}

impl Trainer {
    pub fn new(net: &GaeiUnetConfig, train: TrainConfig, weights: LossWeights, elastic: ElasticConfig) -> Result<Self> {
        train.validate()?;
        weights.validate()?;
        elastic.validate()?;
        let mut rng = RngStream::new(train.seed, STREAM_INIT);
        let network = build_network(net, &mut rng)?;
        let adam = Adam::new(train.adam, &network.params());
        Ok(Trainer {
            network,
            adam,
            train,
            weights,
            elastic,
            epoch: 0,
            elastic_ops: HashMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.network, ckpt.train.clone(), ckpt.loss, ckpt.elastic)?;
        ckpt.restore_network(&mut t.network)?;
        t.adam = Adam::with_state(ckpt.train.adam, ckpt.optimizer.clone(), &t.network.params())?;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.network, &self.train, &self.weights, &self.elastic, &self.adam.state, self.epoch)
    }

    fn elastic_op(&mut self, h: usize, w: usize) -> Result<Option<&ElasticLoss>> {
        if self.weights.beta1 == 0.0 {
            return Ok(None);
        }
        if !self.elastic_ops.contains_key(&(h, w)) {
            self.elastic_ops.insert((h, w), ElasticLoss::new(h, w, self.elastic)?);
        }
        Ok(self.elastic_ops.get(&(h, w)))
    }

    /// Forward, backward and one Adam update at learning rate `lr`.
    pub fn train_step(
        &mut self,
        images: &Tensor4,
        targets: &[Field2D],
        lr: f64,
        rng: &mut RngStream,
        epoch: usize,
        step: usize,
    ) -> Result<LossOutput> {
        self.network.zero_grad();
        let pred = self.network.forward(images, Mode::Train, rng)?;
        let weights = self.weights;
        let op = self.elastic_op(pred.height(), pred.width())?;
        let loss = loss_total(&pred, targets, &weights, op)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                elastic: loss.elastic,
                ce: loss.cross_entropy,
            });
        }
        self.network.backward(&loss.grad_probabilities)?;
        let mut params = self.network.params_mut();
        self.adam.step(&mut params, lr)?;
        Ok(loss)
    }

    /// Runs the next epoch over `samples` (shuffled, augmented) and returns its log row
    /// without validation metrics.
    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Input("no training samples".into()));
        }
        let epoch = self.epoch + 1;
        let lr = self.train.lr_schedule.lr_at(epoch);
        let seed = self.train.seed;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        RngStream::new(seed, STREAM_SHUFFLE).derive(epoch as u64).shuffle(&mut order);
        let aug_root = RngStream::new(seed, STREAM_AUGMENT).derive(epoch as u64);
        let drop_root = RngStream::new(seed, STREAM_DROPBLOCK).derive(epoch as u64);

        let (mut total, mut elastic, mut ce) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, chunk) in order.chunks(self.train.batch_size).enumerate() {
            let batch: Vec<Sample> = match &self.train.augment {
                Some(cfg) => chunk
                    .iter()
                    .map(|&i| augment(&samples[i], cfg, &mut aug_root.derive(i as u64)))
                    .collect::<Result<_>>()?,
                None => chunk.iter().map(|&i| samples[i].clone()).collect(),
            };
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, targets) = batch_of(&refs)?;
            let mut rng = drop_root.derive(step as u64);
            let loss = self.train_step(&images, &targets, lr, &mut rng, epoch, step)?;
            total += loss.total;
            elastic += loss.elastic;
            ce += loss.cross_entropy;
            steps += 1;
        }
        self.epoch = epoch;
        let n = steps as f64;
        Ok(EpochLog {
            epoch,
            lr,
            loss: total / n,
            loss_elastic: elastic / n,
            loss_ce: ce / n,
            val_f1: None,
            val_se: None,
        })
    }

    /// Trains until `train.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        validation: Option<&[Sample]>,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.train.epochs {
            let mut log = self.train_epoch(samples)?;
            if let Some(val) = validation {
                let report = self.evaluate(val)?;
                log.val_f1 = report.aggregate.f1;
                log.val_se = report.aggregate.sensitivity;
            }
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn evaluate(&mut self, samples: &[Sample]) -> Result<EvaluationReport> {
        evaluate_network(&mut self.network, samples)
    }
}

/// Eval-mode predictions for every sample, scored against its mask and FOV.
pub fn evaluate_network(network: &mut Network, samples: &[Sample]) -> Result<EvaluationReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (prob, _) = network.predict(&s.image)?;
        rows.push(evaluate_image(&s.id, &prob, &s.mask, s.fov.as_ref())?);
    }
    Ok(EvaluationReport::from_images(rows))
}
