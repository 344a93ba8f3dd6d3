//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaRecord;
use crate::dataset::{self, CurriculumConfig};
use crate::error::{Error, Result};
use crate::model::forward::Intervention;
use crate::model::loss::{objective, Example, Term};
use crate::model::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::model::ModelState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f32,
    /// Learning rate at the last step as a fraction of `lr`, reached linearly.
    pub final_lr_fraction: f32,
    /// In-context copy curriculum mixed into every epoch.
    pub curriculum: CurriculumConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 4e-3,
            epochs: 36,
            batch: 16,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            final_lr_fraction: 0.1,
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("final_lr_fraction", "must lie in [0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
}

/// Train on question/answer records (plus the configured curriculum).
pub fn train(state: &ModelState, records: &[QaRecord], hyper: &TrainHyper) -> Result<(ModelState, TrainReport)> {
    hyper.validate()?;
    train_on(state, hyper, |epoch| {
        dataset::epoch_examples(state, records, &hyper.curriculum, hyper.seed, epoch)
    })
}

/// Train on examples produced per epoch by `examples_for`.
pub fn train_on<F>(state: &ModelState, hyper: &TrainHyper, mut examples_for: F) -> Result<(ModelState, TrainReport)>
where
    F: FnMut(usize) -> Result<Vec<Example>>,
{
    hyper.validate()?;
    let mut out = state.clone();
    let mut opt = Optimizer::new(hyper.optimizer, hyper.lr);
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        let mut examples = examples_for(epoch)?;
        if examples.is_empty() {
            return Err(Error::Precondition("no training examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        examples.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        let progress = epoch as f32 / hyper.epochs.max(1) as f32;
        opt.set_lr(hyper.lr * (1.0 - (1.0 - hyper.final_lr_fraction) * progress));
        for batch in examples.chunks(hyper.batch) {
            let w = 1.0 / batch.len() as f32;
            let terms: Vec<Term<f32>> = batch.iter().map(|_| Term::Nll { weight: w }).collect();
            let res = objective(&out.config, &out.params, batch, &terms, &Intervention::none(), true)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::non_finite(format!("training step {}", report.steps)),
                    other => other,
                })?;
            let mut grads = res.grads.expect("requested").params;
            clip_grad_norm(&mut grads, hyper.grad_clip);
            opt.step(&mut out.params, &grads);
            if !out.params.all_finite() {
                return Err(Error::non_finite(format!("training step {}", report.steps)));
            }
            total += res.loss as f64;
            batches += 1;
            report.steps += 1;
        }
        let mean = (total / batches as f64) as f32;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((out, report))
}
