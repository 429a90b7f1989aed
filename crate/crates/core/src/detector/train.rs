//! Training loop: deterministic batch assembly, augmentation, Adam updates and checkpoints.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossBreakdown, LossConfig};
use super::matching::{build_targets, GroundTruth, ImageTargets};
use super::model::{images_to_tensor, Detector};
use super::{AnchorSet, DetectorConfig, DetectorError};
use crate::datagen::{augment, record_seed, AugmentationConfig, Dataset};
use crate::geometry::PoseRanges;
use crate::nn::{zero_grads, Adam, Checkpoint, HasParams, LrSchedule, Mode, NnError, Tensor};

/// Tags separating the random streams derived from the training seed.
const INIT_STREAM: u64 = 0x1417;
const LABELED_STREAM: u64 = 0x1AB;
const UNLABELED_STREAM: u64 = 0x0B1AB;
const AUGMENT_STREAM: u64 = 0xA06;

const CHECKPOINT_KIND: &str = "shaftpose-detector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 32,
            base_lr: 1e-2,
            seed: 0,
            augmentation: AugmentationConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.batch_size < 2 {
            return Err(DetectorError::Config(
                "batch_size must be at least 2 for batch normalization".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(DetectorError::Config("base_lr must be positive".into()));
        }
        self.augmentation
            .validate()
            .map_err(|e| DetectorError::Config(e.to_string()))?;
        self.loss.validate()
    }
}

/// Training images with precomputed targets, split into pose-labeled and pose-stripped pools.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub images: Vec<RgbImage>,
    pub targets: Vec<ImageTargets>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl TrainingData {
    pub fn new(
        dataset: Dataset,
        anchors: &AnchorSet,
        ranges: &PoseRanges,
        threshold: f64,
    ) -> Result<Self, DetectorError> {
        let mut targets = Vec::with_capacity(dataset.len());
        let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
        for (i, r) in dataset.records.iter().enumerate() {
            let t = build_targets(anchors, &GroundTruth::from_record(r)?, ranges, threshold)?;
            if t.pose_labeled {
                labeled.push(i);
            } else {
                unlabeled.push(i);
            }
            targets.push(t);
        }
        if targets.is_empty() {
            return Err(DetectorError::Data("training set is empty".into()));
        }
        Ok(Self {
            images: dataset.images,
            targets,
            labeled,
            unlabeled,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// How many pose-stripped items each batch carries: proportional to the pool sizes and at
    /// least one of each kind when both pools exist.
    pub fn unlabeled_per_batch(&self, batch: usize) -> usize {
        let (l, u) = (self.labeled.len(), self.unlabeled.len());
        match (l, u) {
            (_, 0) => 0,
            (0, _) => batch,
            _ => ((batch * u) as f64 / (l + u) as f64)
                .round()
                .clamp(1.0, (batch - 1) as f64) as usize,
        }
    }

    /// Dataset indices for `step`: each pool is walked through in a fresh permutation per epoch,
    /// so the batch is a pure function of `(seed, step)`.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let n_unlabeled = self.unlabeled_per_batch(batch);
        let mut out = Vec::with_capacity(batch);
        for (pool, count, stream) in [
            (&self.labeled, batch - n_unlabeled, LABELED_STREAM),
            (&self.unlabeled, n_unlabeled, UNLABELED_STREAM),
        ] {
            if count == 0 {
                continue;
            }
            let p = pool.len() as u64;
            let mut epoch = u64::MAX;
            let mut perm: Vec<usize> = Vec::new();
            for j in 0..count as u64 {
                let pos = step * count as u64 + j;
                if pos / p != epoch {
                    epoch = pos / p;
                    perm = pool.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed ^ stream, epoch));
                    perm.shuffle(&mut rng);
                }
                out.push(perm[(pos % p) as usize]);
            }
        }
        out
    }
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub config: TrainConfig,
    pub ranges: PoseRanges,
    anchors: AnchorSet,
}

impl Trainer {
    pub fn new(
        detector: &DetectorConfig,
        config: TrainConfig,
        ranges: PoseRanges,
    ) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(record_seed(config.seed, INIT_STREAM));
        let model = Detector::new(detector, &mut rng)?;
        Ok(Self {
            anchors: detector.build_anchors()?,
            model,
            adam: Adam::new(),
            step: 0,
            config,
            ranges,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.config.base_lr, self.config.steps)
    }

    /// One optimization step on already-augmented images.
    pub fn train_step(
        &mut self,
        images: &[&RgbImage],
        targets: &[ImageTargets],
    ) -> Result<LossBreakdown, DetectorError> {
        let lr = self.schedule().lr(self.step);
        let x: Tensor<f32> = images_to_tensor(images, self.model.config().input_size)?;
        zero_grads(&mut self.model);
        let out = self.model.forward(&x, Mode::Train)?;
        let (loss, grads) = match total_loss(&out, &self.anchors, targets, &self.config.loss) {
            Ok(v) => v,
            Err(DetectorError::Nn(NnError::NonFinite(_))) => {
                return Err(DetectorError::NonFiniteLoss {
                    step: self.step,
                    lr,
                    conf: f64::NAN,
                    bbox: f64::NAN,
                    pose: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        self.model.backward(&grads)?;
        let mut params = Vec::new();
        self.model.named_params("", &mut params);
        self.adam.step(params, lr).map_err(|e| match e {
            NnError::NonFinite(_) => DetectorError::NonFiniteLoss {
                step: self.step,
                lr,
                conf: loss.conf,
                bbox: loss.bbox,
                pose: loss.pose,
            },
            other => other.into(),
        })?;
        self.step += 1;
        Ok(loss)
    }

    /// Assembles, augments and trains on the batch for the current step.
    pub fn step_on(&mut self, data: &TrainingData) -> Result<LossBreakdown, DetectorError> {
        let bs = self.config.batch_size;
        let idx = data.batch_indices(self.config.seed, self.step, bs);
        let augmented: Vec<RgbImage> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let stream = record_seed(self.config.seed ^ AUGMENT_STREAM, self.step);
                let mut rng = ChaCha8Rng::seed_from_u64(record_seed(stream, j as u64));
                augment(&data.images[i], &mut rng, &self.config.augmentation)
            })
            .collect();
        let refs: Vec<&RgbImage> = augmented.iter().collect();
        let targets: Vec<ImageTargets> = idx.iter().map(|&i| data.targets[i].clone()).collect();
        self.train_step(&refs, &targets)
    }

    /// Trains until `config.steps`, calling `on_step(step, loss)` after every step.
    pub fn fit(
        &mut self,
        data: &TrainingData,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<(), DetectorError> {
        while self.step < self.config.steps {
            let loss = self.step_on(data)?;
            on_step(self.step, &loss);
        }
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let descriptor = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "detector": self.model.config(),
            "train": self.config,
            "ranges": self.ranges,
            "step": self.step,
            "adam_step": self.adam.step,
        });
        let mut ck = Checkpoint::new(descriptor);
        ck.push_model(&mut self.model, "model");
        for (name, (m, v)) in &self.adam.moments {
            ck.push(format!("adam.m.{name}"), m.clone());
            ck.push(format!("adam.v.{name}"), v.clone());
        }
        ck
    }

    /// Restores a trainer bit-exactly, including optimizer moments.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DetectorError> {
        let d = &ck.descriptor;
        let field = |key: &str| {
            d.get(key)
                .cloned()
                .ok_or_else(|| DetectorError::CheckpointMismatch(format!("descriptor lacks {key}")))
        };
        if d.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(DetectorError::CheckpointMismatch(
                "not a detector checkpoint".into(),
            ));
        }
        let parse_err = |e: serde_json::Error| DetectorError::CheckpointMismatch(e.to_string());
        let detector: DetectorConfig = serde_json::from_value(field("detector")?).map_err(parse_err)?;
        let config: TrainConfig = serde_json::from_value(field("train")?).map_err(parse_err)?;
        let ranges: PoseRanges = serde_json::from_value(field("ranges")?).map_err(parse_err)?;
        let step: u64 = serde_json::from_value(field("step")?).map_err(parse_err)?;
        let adam_step: u64 = serde_json::from_value(field("adam_step")?).map_err(parse_err)?;
        let mut t = Self::new(&detector, config, ranges)?;
        ck.load_model(&mut t.model, "model")?;
        t.step = step;
        t.adam.step = adam_step;
        for (name, blob) in &ck.blobs {
            if let Some(param) = name.strip_prefix("adam.m.") {
                let v = ck
                    .get(&format!("adam.v.{param}"))
                    .ok_or_else(|| DetectorError::CheckpointMismatch(format!("adam.v.{param} missing")))?;
                t.adam.moments.insert(param.to_string(), (blob.clone(), v.clone()));
            }
        }
        Ok(t)
    }
}
