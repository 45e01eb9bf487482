//! Minibatch training loop shared by base classifiers and post-hoc rules.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::adam::OptimizerState;
use crate::models::mlp::MlpModel;
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.0007,
            l2: 0.001,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config("l2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Runs `hp.epochs` passes of shuffled minibatch Adam.
///
/// `example_loss(model, i, grads)` returns the data loss of example `i` and
/// adds its gradient, scaled by `scale`, into `grads`. Each epoch is
/// shuffled by Fisher-Yates from the seed derived for that epoch. The L2
/// penalty applies to weights only. `after_epoch` sees the model at the
/// end of every epoch. Returns the mean data loss per epoch.
pub(crate) fn fit<F, G>(
    model: &mut MlpModel,
    num_examples: usize,
    hp: &TrainingHyperparams,
    seed: RngSeed,
    mut example_loss: F,
    mut after_epoch: G,
) -> Result<Vec<f64>>
where
    F: FnMut(&MlpModel, usize, f64, &mut [f64]) -> Result<f64>,
    G: FnMut(&MlpModel) -> Result<()>,
{
    hp.validate()?;
    if num_examples == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mask = model.weight_mask();
    let mut opt = OptimizerState::new(model.params().len(), hp.learning_rate, hp.l2);
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut grads = vec![0.0; model.params().len()];
    let mut history = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed.derive(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += example_loss(model, i, scale, &mut grads)?;
            }
            opt.step(model.params_mut(), &grads, Some(&mask))?;
        }
        let mean = epoch_loss / num_examples as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDivergence(format!("loss became {mean} in epoch {epoch}")));
        }
        history.push(mean);
        after_epoch(model)?;
    }
    Ok(history)
}
