use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikesplit_core::arch::ArchitectureSpec;
use spikesplit_core::network::SpikingNetwork;
use spikesplit_core::spike::SurrogateParams;
use spikesplit_core::{FeatureShape, Real};

use crate::backward::{backward, cross_entropy};
use crate::checkpoint::Checkpoint;
use crate::data::{gaussian_blobs, Dataset};
use crate::optim::{cosine_lr, Sgd};
use crate::{Result, TrainError};

/// Synthetic task and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    pub input_shape: FeatureShape,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub timesteps: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub momentum: f64,
    pub surrogate: SurrogateParams,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            input_shape: FeatureShape::new(1, 8, 8),
            n_classes: 2,
            samples_per_class: 64,
            noise: 0.15,
            data_seed: 7,
            init_seed: 1,
            timesteps: 2,
            epochs: 30,
            finetune_epochs: 10,
            batch_size: 16,
            lr: 0.1,
            finetune_lr: 0.05,
            momentum: 0.9,
            surrogate: SurrogateParams::default(),
        }
    }
}

impl ToyTaskSpec {
    pub fn dataset(&self) -> Dataset {
        gaussian_blobs(
            self.input_shape,
            self.n_classes,
            self.samples_per_class,
            self.noise,
            self.data_seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1 for the plain network, 2 for joint fine-tuning with the bottleneck.
    pub step: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Percentage of training samples classified correctly during the epoch
    /// (train-mode normalization).
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TwoStepReport {
    pub step1: Vec<EpochMetrics>,
    pub step2: Vec<EpochMetrics>,
    /// Eval-mode accuracy on the training set after each step.
    pub step1_accuracy: f64,
    pub final_accuracy: f64,
    pub step1_checkpoint: Checkpoint,
    pub checkpoint: Checkpoint,
}

fn argmax<F: Real>(row: &[F]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Runs `epochs` epochs over `data` in the fixed order `order`.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<F: Real>(
    net: &mut SpikingNetwork<F>,
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    epochs: usize,
    base_lr: f64,
    opt: &mut Sgd<F>,
    sg: &SurrogateParams,
    step: u8,
) -> Result<Vec<EpochMetrics>> {
    let classes = net.arch.classes;
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(base_lr, epoch, epochs);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(batch_size.max(1)).enumerate() {
            let (images, labels) = data.batch::<F>(idx);
            let (logits, tape) = net.forward_train(&images)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels, classes);
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, epoch, batch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            correct += labels
                .iter()
                .enumerate()
                .filter(|(b, &y)| argmax(&logits[b * classes..(b + 1) * classes]) == y)
                .count();
            let grads = backward(net, &tape, &dlogits, sg)?;
            opt.step(net, &grads, lr)?;
        }
        metrics.push(EpochMetrics {
            step,
            epoch,
            lr,
            loss: loss_sum / order.len() as f64,
            train_accuracy: 100.0 * correct as f64 / order.len() as f64,
        });
    }
    Ok(metrics)
}

/// Step 1 trains `base` alone; step 2 inserts a bottleneck compressing the
/// split-point feature to `compressed` and fine-tunes everything jointly.
pub fn train_two_step(
    mut base: SpikingNetwork<f32>,
    split: usize,
    compressed: FeatureShape,
    task: &ToyTaskSpec,
    data: &Dataset,
) -> Result<TwoStepReport> {
    if data.feature_shape() != base.arch.input_shape || data.n_classes != base.arch.classes {
        return Err(TrainError::ArchMismatch {
            expected: format!("{} inputs, {} classes", base.arch.input_shape, base.arch.classes),
            found: format!("{} inputs, {} classes", data.feature_shape(), data.n_classes),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(task.data_seed ^ 0x5eed));

    let mut opt = Sgd::new(task.momentum);
    let step1 = train_epochs(&mut base, data, &order, task.batch_size, task.epochs, task.lr, &mut opt, &task.surrogate, 1)?;
    let step1_accuracy = evaluate(&base, data)?;
    let step1_checkpoint = Checkpoint::from_network(&base);

    base.insert_bottleneck(split, compressed, task.init_seed.wrapping_add(1))?;
    let mut opt = Sgd::new(task.momentum);
    let step2 = train_epochs(
        &mut base,
        data,
        &order,
        task.batch_size,
        task.finetune_epochs,
        task.finetune_lr,
        &mut opt,
        &task.surrogate,
        2,
    )?;
    let final_accuracy = evaluate(&base, data)?;
    Ok(TwoStepReport {
        step1,
        step2,
        step1_accuracy,
        final_accuracy,
        step1_checkpoint,
        checkpoint: Checkpoint::from_network(&base),
    })
}

/// Top-1 accuracy in percent with running (eval-mode) statistics.
pub fn evaluate<F: Real>(net: &SpikingNetwork<F>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(spikesplit_core::Error::Empty("dataset").into());
    }
    let classes = net.arch.classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(64) {
        let (images, labels) = data.batch::<F>(chunk);
        let logits = net.forward(&images)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(b, &y)| argmax(&logits[b * classes..(b + 1) * classes]) == y)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, arch: &ArchitectureSpec, data: &Dataset) -> Result<f64> {
    evaluate(&ckpt.to_network::<f32>(arch)?, data)
}

/// Percentage points lost going from `reference` to `current`.
pub fn accuracy_drop(reference: f64, current: f64) -> f64 {
    reference - current
}
