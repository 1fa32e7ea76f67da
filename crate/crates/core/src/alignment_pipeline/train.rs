use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use super::dataset::{normalized_landmarks, pixel_landmarks, Dataset};
use super::{AlignmentContext, Network};
use crate::error::{contract, Error, Result};
use crate::evaluation::nme_gt_box;
use crate::morphable_model::MorphableModel;
use crate::tensor_nn::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingLogRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean objective over the epoch's batches.
    pub loss: f64,
    pub lr: f64,
    /// Mean NME of the epoch's predictions, taken before each update.
    pub nme_train: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingLogRow>,
    /// Mean objective of the very first batch, before any update.
    pub initial_loss: Option<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss,lr,nme_train\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.loss, r.lr, r.nme_train).expect("string write");
        }
        s
    }

    pub fn final_nme(&self) -> Option<f64> {
        self.rows.last().map(|r| r.nme_train)
    }
}

/// Builds a network from `seed` and trains it on `dataset`.
pub fn train(dataset: &Dataset, model: &MorphableModel, config: &PipelineConfig, seed: u64) -> Result<(Network, TrainingLog)> {
    let network = Network::new(config, model, seed)?;
    train_network(network, dataset, model, seed)
}

/// Adam on the configured objective. Per-sample gradients may run in
/// parallel; they are summed in batch order, so the result does not depend
/// on the thread count.
pub fn train_network(mut network: Network, dataset: &Dataset, model: &MorphableModel, seed: u64) -> Result<(Network, TrainingLog)> {
    let config = network.config().clone();
    contract!(!dataset.is_empty(), "training needs a non-empty dataset");
    network.check_model(model)?;
    if dataset.config.image_size != config.image_size || dataset.config.landmarks != config.landmarks {
        return Err(Error::Data(format!(
            "dataset ({}px, {} landmarks) does not match the network ({}px, {} landmarks)",
            dataset.config.image_size, dataset.config.landmarks, config.image_size, config.landmarks
        )));
    }
    let ctx = AlignmentContext::new(model, &config)?;
    let size = config.image_size;
    let targets: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| normalized_landmarks(&s.landmarks_2d(), size))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a1e);
    let adam_cfg = AdamConfig::default();
    let mut state = AdamState::new(network.params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch, step);
        let (mut loss_sum, mut nme_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| network.sample_gradient(&ctx, &dataset.samples[i].image, &targets[i]))
                .collect::<Result<Vec<_>>>()?;
            let b = batch.len() as f64;
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / b;
            if !loss.is_finite() {
                let per_sample: Vec<_> = batch.iter().zip(&results).map(|(i, r)| (*i, r.loss)).collect();
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at epoch {epoch}, step {step}; batch (sample, loss): {per_sample:?}"
                )));
            }
            log.initial_loss.get_or_insert(loss);
            for (&i, r) in batch.iter().zip(&results) {
                let pred = pixel_landmarks(r.stage_predictions.last().expect("final stage"), size);
                nme_sum += nme_gt_box(&pred, &dataset.samples[i].landmarks_2d())? / b;
            }
            let mut grads = network.zeros_like();
            for r in &results {
                for (acc, g) in grads.params_mut().into_iter().zip(r.grads.params()) {
                    acc.add_assign(g)?;
                }
            }
            let mut gp = grads.params_mut();
            let mut sq = 0.0;
            for g in gp.iter_mut() {
                g.scale(1.0 / b);
                sq += g.dot(g);
            }
            if let Some(max) = config.grad_clip {
                let norm = sq.sqrt();
                if norm > max {
                    gp.iter_mut().for_each(|g| g.scale(max / norm));
                }
            }
            let lr_now = config.learning_rate_at(epoch, step);
            let grads_ref: Vec<_> = grads.params();
            adam_step(&mut network.params_mut(), &grads_ref, &mut state, lr_now, &adam_cfg)?;
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        log.rows.push(TrainingLogRow {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            lr,
            nme_train: nme_sum / batches as f64,
        });
    }
    Ok((network, log))
}
