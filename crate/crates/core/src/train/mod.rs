//! Training, evaluation and inference timing.

mod adamw;
mod bench;
mod recipe;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, adamw_update, AdamWConfig, AdamWState};
pub use bench::{bench_inference, BenchReport, BenchRow};
pub use recipe::{two_phase, RecipeConfig, RecipeReport, VariantRun};

use crate::allocation::AllocationEvent;
use crate::attention::Variant;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Mode, ViT};
use crate::persistence::Checkpoint;
use crate::rng::{self, Stream};
use crate::tensor::{set_precision, Precision, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Uptrain,
    Finetune,
}

pub const UPTRAIN_LR: f64 = 1e-4;
pub const FINETUNE_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub phase: Phase,
    pub precision: Precision,
    /// Random flips and padded crops of each batch.
    pub augment: bool,
    pub augment_pad: usize,
}

impl TrainConfig {
    pub fn uptrain() -> Self {
        TrainConfig {
            lr: UPTRAIN_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 500,
            seed: 0,
            phase: Phase::Uptrain,
            precision: Precision::F32,
            augment: false,
            augment_pad: 2,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            lr: FINETUNE_LR,
            phase: Phase::Finetune,
            ..Self::uptrain()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step record streamed while training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: Variant,
    pub phase: Phase,
    /// Global step of the first update.
    pub start_step: u64,
    /// Updates taken.
    pub steps: u64,
    pub losses: Vec<f64>,
    /// Training accuracy over each completed or final partial epoch.
    pub epoch_accuracy: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub events: Vec<AllocationEvent>,
}

impl RunMetrics {
    /// The run with wall-clock timings removed, for comparing trajectories.
    pub fn without_timing(&self) -> RunMetrics {
        RunMetrics {
            step_seconds: Vec::new(),
            ..self.clone()
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.step_seconds.iter().sum()
    }

    /// Fractional reduction of the loss from the first step to the mean of
    /// the last `tail` steps.
    pub fn loss_reduction(&self, tail: usize) -> Option<f64> {
        let first = *self.losses.first()?;
        let tail = tail.clamp(1, self.losses.len());
        let end = self.losses[self.losses.len() - tail..].iter().sum::<f64>() / tail as f64;
        Some(1.0 - end / first)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
}

/// Shuffled epochs of batch indices. Epoch `e` uses its own derived stream.
struct Sampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Sampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut rng::derive(Stream::Shuffle, self.seed, &[self.epoch]));
        self.pos = 0;
    }

    /// Next batch and the epoch it belongs to; the last batch of an epoch may be short.
    fn next(&mut self) -> (Vec<usize>, u64) {
        if self.pos >= self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch).min(self.n);
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        (idx, self.epoch)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `cfg.steps` AdamW updates starting from `start`.
///
/// Global step numbering continues from `start.step`. Uptraining resumes the
/// stored optimizer moments when present; fine-tuning starts fresh ones. A
/// non-finite loss aborts with the checkpoint from before that step.
pub fn train_loop(
    start: Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data is empty"));
    }
    let _precision = set_precision(cfg.precision);
    let adamw = cfg.adamw();
    let mut model = start.model;
    let mut optimizer = match (cfg.phase, start.optimizer) {
        (Phase::Uptrain, Some(state)) => state,
        _ => AdamWState::zeros_like(&model.params),
    };
    let mut sampler = Sampler::new(data.len(), cfg.batch_size, cfg.seed);
    let mut metrics = RunMetrics {
        variant: model.config.attention.variant,
        phase: cfg.phase,
        start_step: start.step,
        steps: 0,
        losses: Vec::with_capacity(cfg.steps as usize),
        epoch_accuracy: Vec::new(),
        step_seconds: Vec::with_capacity(cfg.steps as usize),
        events: Vec::new(),
    };
    let (mut correct, mut seen, mut current_epoch) = (0usize, 0usize, 0u64);

    for local in 0..cfg.steps {
        let step = start.step + local;
        let began = Instant::now();
        let (indices, epoch) = sampler.next();
        if epoch != current_epoch {
            metrics.epoch_accuracy.push(correct as f64 / seen as f64);
            (correct, seen, current_epoch) = (0, 0, epoch);
        }
        let (mut images, labels) = data.batch(&indices)?;
        if cfg.augment {
            images = data::augment(
                &images,
                cfg.augment_pad,
                &mut rng::derive(Stream::Augment, cfg.seed, &[step]),
            )?;
        }
        let alloc_before = model.alloc_states.clone();
        let tape = Tape::new();
        let fwd = model.forward(
            &tape,
            &images,
            Mode::Train { step },
            ForwardOptions::default(),
        )?;
        let loss = fwd.logits.cross_entropy(&labels)?;
        let loss_value = loss.value().item()?;
        if !loss_value.is_finite() {
            model.alloc_states = alloc_before;
            let last_good = Checkpoint {
                model,
                train: Some(cfg.clone()),
                optimizer: Some(optimizer),
                step,
                seed: cfg.seed,
            };
            return Err(Error::Diverged {
                step,
                loss: loss_value,
                last_good: Box::new(last_good),
            });
        }
        let logits = fwd.logits.value();
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        seen += labels.len();
        let grads = tape.backward(loss)?;
        let grads = fwd.params.map(|_, v| grads.wrt(*v));
        metrics.events.extend(fwd.events);
        drop(tape);
        adamw_step(&mut model.params, &grads, &mut optimizer, &adamw)?;

        let seconds = began.elapsed().as_secs_f64();
        metrics.losses.push(loss_value);
        metrics.step_seconds.push(seconds);
        metrics.steps += 1;
        on_step(&StepLog {
            step,
            loss: loss_value,
            seconds,
        });
    }
    if seen > 0 {
        metrics.epoch_accuracy.push(correct as f64 / seen as f64);
    }
    let checkpoint = Checkpoint {
        model,
        train: Some(cfg.clone()),
        optimizer: Some(optimizer),
        step: start.step + cfg.steps,
        seed: cfg.seed,
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
}

/// Accuracy and mean cross-entropy without recording gradients. Windowed
/// allocations stay frozen at their stored values.
pub fn evaluate(model: &mut ViT, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::contract(
            "evaluation needs a nonempty dataset and batch size",
        ));
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let tape = Tape::no_grad();
        let logits = model
            .forward(&tape, &images, Mode::Eval, ForwardOptions::default())?
            .logits;
        loss_sum += logits.cross_entropy(&labels)?.value().item()? * labels.len() as f64;
        let logits = logits.value();
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        examples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariantConfig;
    use crate::data::{synthetic_blobs, Difficulty, SyntheticSpec};
    use crate::model::ViTConfig;

    fn cfg(variant: Variant, kv: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 8,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 3,
            attention: AttentionVariantConfig {
                window: 2,
                ..AttentionVariantConfig::new(variant, 4, kv, 2)
            },
        }
    }

    fn data() -> Dataset {
        synthetic_blobs(&SyntheticSpec {
            num_classes: 3,
            n_per_class: 4,
            size: 8,
            channels: 1,
            seed: 1,
            difficulty: Difficulty::Simple,
        })
        .unwrap()
    }

    fn train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 5,
            lr: 1e-2,
            augment: true,
            ..TrainConfig::uptrain()
        }
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let model = ViT::new(cfg(Variant::Gqa, 2), 1).unwrap();
        let out = train_loop(
            Checkpoint::fresh(model.clone(), 1),
            &data(),
            &train_cfg(0),
            |_| {},
        )
        .unwrap();
        assert_eq!(out.checkpoint.model, model);
        assert_eq!(out.metrics.steps, 0);
    }

    #[test]
    fn runs_are_reproducible_and_events_sit_on_window_boundaries() {
        for variant in [Variant::DgqaEma, Variant::Pgqa, Variant::Kdgqa] {
            let run = || {
                let model = ViT::new(cfg(variant, 2), 3).unwrap();
                train_loop(Checkpoint::fresh(model, 3), &data(), &train_cfg(7), |_| {}).unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a.metrics.without_timing(), b.metrics.without_timing());
            assert_eq!(a.checkpoint.model, b.checkpoint.model);
            assert_eq!(a.metrics.steps, 7);
            // 12 examples in batches of 5: epochs of 3 batches
            assert_eq!(a.metrics.epoch_accuracy.len(), 3);
            let steps: Vec<u64> = a.metrics.events.iter().map(|e| e.step).collect();
            assert_eq!(steps, vec![0, 2, 4, 6]);
        }
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let mut model = ViT::new(cfg(Variant::Gqa, 2), 1).unwrap();
        model.params.head_b = crate::tensor::Tensor::full([3], f64::NAN);
        match train_loop(
            Checkpoint::fresh(model.clone(), 1),
            &data(),
            &train_cfg(3),
            |_| {},
        ) {
            Err(Error::Diverged {
                step, last_good, ..
            }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good.model.params.patch_w, model.params.patch_w);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn evaluate_guards_and_perfect_model() {
        let mut model = ViT::new(cfg(Variant::Gqa, 2), 1).unwrap();
        let d = data();
        assert!(evaluate(&mut model, &d, 0).is_err());
        let r = evaluate(&mut model, &d, 5).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.examples, 12);
    }
}
