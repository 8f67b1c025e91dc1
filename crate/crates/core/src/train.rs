//! Contrastive pretraining loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{GeomAugmentConfig, PhotoAugmentConfig};
use crate::contrastive::{evaluate, sample_batches, LossConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::net::{ModelParams, Sgd};
use crate::phantom::assemble_view_set;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// View sets per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.05, momentum: 0.9, batch: 1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("train.batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "train.lr {} must be finite and >= 0, train.momentum {} in [0, 1)",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the loop started; excluded from every reproducible artifact.
    pub wall_time: f64,
}

/// Everything a pretraining run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSetup {
    pub loss: LossConfig,
    pub geom: GeomAugmentConfig,
    pub photo: PhotoAugmentConfig,
    pub train: TrainConfig,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.geom.validate()?;
        self.photo.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub velocity: ModelParams<f32>,
    pub log: Vec<StepLog>,
}

/// Loss and averaged parameter gradients over a batch of freshly augmented view sets.
pub fn pretrain_gradients<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    samples: &[&Sample],
    setup: &PretrainSetup,
    rng: &mut R,
) -> Result<(f64, ModelParams<f32>)> {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for sample in samples {
        let labels = sample.labels.as_ref();
        if setup.loss.method.supervised() && labels.is_none() {
            return Err(Error::LabelsRequired(format!(
                "method `{}` needs a labelled dataset; sample {} has no mask",
                setup.loss.method.name(),
                sample.id
            )));
        }
        let views = assemble_view_set(&sample.images, &setup.geom, &setup.photo, rng)?;
        let batches = sample_batches(setup.loss.method, &views, setup.loss.samples, rng, labels)?;
        let mut fields = Vec::with_capacity(views.len());
        let mut caches = Vec::with_capacity(views.len());
        for view in views.views() {
            let (field, cache) = params.forward_cached(&view.image)?;
            fields.push(field);
            caches.push(cache);
        }
        let (value, dfields) = evaluate(setup.loss.method, &fields, &batches, &setup.loss)?;
        total += value as f64;
        for (cache, dfield) in caches.iter().zip(&dfields) {
            grads.add_assign(&params.backward(cache, &dfield.data));
        }
    }
    let scale = 1.0 / samples.len() as f32;
    grads.scale(scale);
    Ok((total * scale as f64, grads))
}

/// Momentum SGD over uniformly drawn training samples. `on_step` sees the
/// log row and the parameters after each update.
pub fn pretrain(
    init: ModelParams<f32>,
    samples: &[Sample],
    setup: &PretrainSetup,
    mut on_step: impl FnMut(&StepLog, &ModelParams<f32>, &Sgd<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    setup.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("pretraining needs at least one sample".into()));
    }
    let t = &setup.train;
    let mut params = init;
    let mut opt = Sgd::new(&params, t.lr as f32, t.momentum as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut log = Vec::with_capacity(t.steps);
    let start = Instant::now();
    for step in 1..=t.steps {
        let batch: Vec<&Sample> = (0..t.batch).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let (loss, grads) = pretrain_gradients(&params, &batch, setup, &mut rng)?;
        opt.step(&mut params, &grads)?;
        let row = StepLog { step, loss, lr: t.lr, wall_time: start.elapsed().as_secs_f64() };
        on_step(&row, &params, &opt)?;
        log.push(row);
    }
    Ok(PretrainOutcome { params, velocity: opt.velocity, log })
}
