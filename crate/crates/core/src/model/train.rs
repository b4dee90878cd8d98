//! Minibatch Adam training over (scene graph, image) pairs. One driver
//! serves initial training, plain fine-tuning, negative-guidance
//! fine-tuning, and masked fine-tuning — the variants differ only in the
//! items (conditioning/target images, guidance regions) they feed in.
//!
//! Determinism: the epoch shuffle and every dropout plan are derived from
//! (seed, epoch, item index) alone, and per-sample gradients computed in
//! parallel are reduced in fixed index order.

use super::forward::{scene_loss, NgRegion, ScenePlan};
use super::{GeneratorModel, ModelError};
use crate::autodiff::{Adam, Tape};
use crate::img::Image;
use crate::scene_graph::SceneGraph;
use crate::synth::Dataset;
use crate::util::splitmix64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Probability that a node's z_v falls back to the learned unknown
    /// vector during training; this trains the synthesis pathway.
    pub zv_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 3e-3,
            seed: 7,
            batch_size: 16,
            zv_dropout: 0.3,
        }
    }
}

/// One training item: the conditioning image the encoder sees, the target
/// the reconstruction is scored against, and any negative-guidance
/// regions.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub graph: SceneGraph,
    pub cond: Image,
    pub target: Image,
    pub ng: Vec<NgRegion>,
}

impl TrainItem {
    pub fn plain(graph: &SceneGraph, image: &Image) -> Self {
        TrainItem {
            graph: graph.clone(),
            cond: image.clone(),
            target: image.clone(),
            ng: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub gen_loss: f64,
    pub ng_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// epoch,loss,wall_ms
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,wall_ms\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.wall_ms));
        }
        out
    }

    /// Extended log with both loss components (negative-guidance runs).
    pub fn to_csv_with_components(&self) -> String {
        let mut out = String::from("epoch,loss,gen_loss,ng_loss,wall_ms\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.loss, e.gen_loss, e.ng_loss, e.wall_ms
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub zv_dropout: f64,
    pub lambda_ng: f64,
}

impl RunSpec {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        RunSpec {
            epochs: cfg.epochs,
            lr: cfg.lr,
            seed: cfg.seed,
            batch_size: cfg.batch_size,
            zv_dropout: cfg.zv_dropout,
            lambda_ng: 0.0,
        }
    }
}

/// (loss, generator part, guidance part, flat gradient) of one item.
type ItemGrad = (f64, f64, f64, Vec<f64>);

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ splitmix64(0x45C0 ^ epoch as u64))
}

fn item_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    splitmix64(epoch_seed(seed, epoch) ^ splitmix64(item as u64 + 0x17))
}

/// Runs the optimization loop in place and returns the per-epoch log.
pub fn run_training(
    model: &mut GeneratorModel,
    items: &[TrainItem],
    spec: &RunSpec,
) -> Result<TrainLog, ModelError> {
    assert!(!items.is_empty(), "training set must be non-empty");
    let mut theta = model.params.flatten();
    let mut adam = Adam::new(theta.len(), spec.lr);
    let mut log = TrainLog::default();

    for epoch in 0..spec.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(spec.seed, epoch));
        order.shuffle(&mut rng);

        let (mut loss_sum, mut gen_sum, mut ng_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(spec.batch_size) {
            let results: Vec<Result<ItemGrad, ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let mut tape = Tape::new();
                    let plan = if spec.zv_dropout > 0.0 {
                        let mut prng =
                            ChaCha8Rng::seed_from_u64(item_seed(spec.seed, epoch, i));
                        ScenePlan::dropout(&item.graph, spec.zv_dropout, &mut prng)
                    } else {
                        ScenePlan::reconstruction(&item.graph)
                    };
                    let (loss, gen_val, ng_val) = scene_loss(
                        model,
                        &mut tape,
                        &item.graph,
                        &item.cond,
                        &item.target,
                        &plan,
                        &item.ng,
                        spec.lambda_ng,
                    )?;
                    let lval = tape.value(loss).item();
                    if !lval.is_finite() {
                        return Err(ModelError::NonFiniteLoss(format!(
                            "epoch {epoch}, item {i}"
                        )));
                    }
                    let grads = tape.backward(loss)?;
                    let flat = model.params.flat_gradient(&tape, &grads);
                    Ok((lval, gen_val, ng_val, flat))
                })
                .collect();

            let mut grad_mean = vec![0.0; theta.len()];
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (lval, gen_val, ng_val, flat) = r?;
                loss_sum += lval;
                gen_sum += gen_val;
                ng_sum += ng_val;
                for (g, f) in grad_mean.iter_mut().zip(&flat) {
                    *g += scale * f;
                }
            }
            adam.step(&mut theta, &grad_mean);
            model.params.unflatten(&theta);
        }

        let n = items.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            gen_loss: gen_sum / n,
            ng_loss: ng_sum / n,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }
    Ok(log)
}

/// Trains a fresh generator on the dataset's training split, minimizing
/// MSE + 0.1 L1 reconstruction loss with z_v dropout.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(GeneratorModel, TrainLog), ModelError> {
    let mut model = GeneratorModel::init(dataset.image_size(), &dataset.vocab, cfg.seed);
    let items: Vec<TrainItem> = dataset.samples[dataset.train_indices()]
        .iter()
        .map(|s| TrainItem::plain(&s.graph, &s.image))
        .collect();
    let log = run_training(&mut model, &items, &RunSpec::from_train(cfg))?;
    Ok((model, log))
}

/// Continues training an existing model on the given items (fresh
/// optimizer state), following the same protocol as `train`.
pub fn finetune(
    model: &mut GeneratorModel,
    items: &[TrainItem],
    spec: &RunSpec,
) -> Result<TrainLog, ModelError> {
    run_training(model, items, spec)
}
