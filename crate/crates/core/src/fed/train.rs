use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Model;
use crate::optim::{binarize, dice_score, soft_dice_loss, AdamConfig, AdamState, CosineSchedule, DICE_EPS};
use crate::synthdata::{sample_patches, NodeDataset, Sample};
use crate::tensor::{BatchNormMode, Tape, Tensor};

use super::{ClientUpdate, FedError, NodeSpec, Result};

/// Patch-based dice-loss training settings shared by every trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: Vec<usize>,
    pub patches_per_sample: usize,
    pub pos_ratio: f64,
    pub base_lr: f64,
    pub eta_min: f64,
    pub adam: AdamConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            patch_size: vec![32, 32],
            patches_per_sample: 1,
            pos_ratio: 0.5,
            base_lr: 1e-3,
            eta_min: 0.0,
            adam: AdamConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patches_per_sample == 0 {
            return bad("patches_per_sample must be positive");
        }
        if self.patch_size.is_empty() || self.patch_size.contains(&0) {
            return bad("patch_size must be positive on every axis");
        }
        if !(0.0..=1.0).contains(&self.pos_ratio) {
            return bad("pos_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Stream id of the sampling RNG for a node; shared by federated clients
/// and centralized trainers so that both draw identical patch sequences.
pub fn trainer_rng(seed: u64, node_id: u16) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5e9_0000 + u64::from(node_id));
    rng
}

/// One node's model, optimizer state and annealing schedule. The state
/// persists across federation rounds.
pub struct LocalTrainer {
    model: Model<f32>,
    task: String,
    class_id: u8,
    config: TrainConfig,
    adam: AdamState<f32>,
    schedule: CosineSchedule,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl LocalTrainer {
    /// `total_epochs` is the annealing horizon: every epoch this trainer
    /// will run over its lifetime.
    pub fn new(
        model: Model<f32>,
        task: &str,
        class_id: u8,
        config: TrainConfig,
        total_epochs: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if !model.has_task(task) {
            return Err(FedError::InvalidConfig(format!("model has no head for task {task:?}")));
        }
        if config.patch_size.len() != model.config().spatial_dims {
            return Err(FedError::InvalidConfig(format!(
                "patch_size has {} axes, model is {}-D",
                config.patch_size.len(),
                model.config().spatial_dims
            )));
        }
        let schedule = CosineSchedule::new(config.base_lr, config.eta_min, total_epochs.max(1))?;
        Ok(Self {
            model,
            task: task.to_string(),
            class_id,
            adam: AdamState::new(config.adam),
            config,
            schedule,
            epoch: 0,
            rng,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn check_dataset(&self, samples: &[Sample]) -> Result<()> {
        if let Some(s) = samples.iter().find(|s| !s.annotated_classes.contains(&self.class_id)) {
            return Err(FedError::InvalidConfig(format!(
                "sample {} is not annotated for class {} ({})",
                s.sample_id, self.class_id, self.task
            )));
        }
        Ok(())
    }

    /// One pass over `samples` in shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<f64> {
        self.check_dataset(samples)?;
        if samples.is_empty() {
            return Err(FedError::InvalidConfig(format!("no training samples for {}", self.task)));
        }
        let lr = self.schedule.lr(self.epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut patches = Vec::with_capacity(samples.len() * self.config.patches_per_sample);
        for &i in &order {
            let seed = self.rng.gen();
            patches.extend(sample_patches(
                &samples[i],
                &self.config.patch_size,
                self.config.patches_per_sample,
                self.config.pos_ratio,
                self.class_id,
                seed,
            )?);
        }

        let mut shape = vec![0, 1];
        shape.extend_from_slice(&self.config.patch_size);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in patches.chunks(self.config.batch_size) {
            shape[0] = chunk.len();
            let image: Vec<f32> = chunk.iter().flat_map(|p| p.image.data().iter().copied()).collect();
            let label: Vec<f32> = chunk.iter().flat_map(|p| p.label.data().iter().copied()).collect();
            let image = Tensor::new(&shape, image)?;
            let label = Tensor::new(&shape, label)?;

            let mut tape = Tape::new();
            tape.set_check_finite(false);
            let x = tape.constant(image)?;
            let pass = self.model.forward_on_tape(&mut tape, x, &self.task, BatchNormMode::Train)?;
            let loss = soft_dice_loss(&mut tape, pass.logits, &label, DICE_EPS)?;
            let value = f64::from(tape.value(loss)?.data()[0]);
            if !value.is_finite() {
                return Err(FedError::Diverged {
                    task: self.task.clone(),
                    epoch: self.epoch,
                });
            }
            let grads = tape.backward(loss)?;
            self.model.accumulate_grads(&pass, &grads)?;
            self.adam.step(self.model.trainable_mut(), lr)?;
            total += value;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    /// Per-sample dice of the trainer's own task on full volumes.
    pub fn evaluate(&mut self, samples: &[Sample]) -> Result<Vec<f64>> {
        evaluate_samples(&mut self.model, samples, &self.task.clone(), self.class_id, self.config.threshold)
    }
}

/// Eval-mode forward on whole volumes, one at a time, thresholded
/// `sigmoid(logit) > threshold`, scored against `class_id`.
pub fn evaluate_samples(
    model: &mut Model<f32>,
    samples: &[Sample],
    task: &str,
    class_id: u8,
    threshold: f64,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        if !s.annotated_classes.contains(&class_id) {
            return Err(FedError::InvalidConfig(format!(
                "test sample {} lacks the annotation for class {class_id}",
                s.sample_id
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(s.image.shape());
        let x = s.image.clone().reshape(&shape)?;
        let logits = model.forward(&x, task, BatchNormMode::Eval)?;
        let pred = binarize(logits.data(), threshold);
        scores.push(dice_score(&pred, &s.binary_mask(class_id))?);
    }
    Ok(scores)
}

/// Runs `local_epochs` epochs at a node and packages the resulting
/// parameters. The trainer must hold only the node's own head.
pub fn client_local_train(
    trainer: &mut LocalTrainer,
    dataset: &NodeDataset,
    node: &NodeSpec,
    local_epochs: usize,
    round: u32,
) -> Result<(ClientUpdate, Vec<f64>)> {
    if dataset.task != node.task || trainer.task != node.task {
        return Err(FedError::InvalidConfig(format!(
            "node {} trains {:?} but dataset is {:?}",
            node.node_id, node.task, dataset.task
        )));
    }
    if dataset.class_id != trainer.class_id {
        return Err(FedError::InvalidConfig(format!(
            "dataset class {} differs from trainer class {}",
            dataset.class_id, trainer.class_id
        )));
    }
    if trainer.model.tasks().len() != 1 {
        return Err(FedError::InvalidConfig(format!(
            "node {} model carries heads {:?}; clients hold only their own",
            node.node_id,
            trainer.model.tasks()
        )));
    }
    trainer.check_dataset(&dataset.train)?;
    let losses = (0..local_epochs)
        .map(|_| trainer.train_epoch(&dataset.train))
        .collect::<Result<Vec<_>>>()?;
    let update = ClientUpdate {
        round,
        node_id: node.node_id,
        task: node.task.clone(),
        sample_count: node.sample_count,
        snapshot: trainer.model.extract_snapshot(),
    };
    Ok((update, losses))
}
