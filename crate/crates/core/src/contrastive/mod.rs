//! Pixel sampling and dense contrastive objectives over a view set.

mod loss;
mod sampler;

use ndarray::ArrayView2;
use rand::Rng;

pub use loss::{
    loss, loss_dvd, loss_mvd, loss_sdvd, loss_smvd, ntxent_pair, LossConfig, LossOutput, Method, NegativeSet,
};
pub use sampler::{resolve, sample_pixels, PixelBatch};

use crate::error::{Error, Result};
use crate::image::LabelMask;
use crate::net::{EmbeddingField, Real};
use crate::phantom::ViewSet;

/// Batches for one step: one per anchor/target pair for the dual-view
/// methods (each restricted to that pair's intersection), a single batch
/// over every view otherwise.
pub fn sample_batches<R: Rng + ?Sized>(
    method: Method,
    view_set: &ViewSet,
    k: usize,
    rng: &mut R,
    labels: Option<&LabelMask>,
) -> Result<Vec<PixelBatch>> {
    if method.supervised() && labels.is_none() {
        return Err(Error::LabelsRequired(format!("method `{}` needs label masks", method.name())));
    }
    let labels = if method.supervised() { labels } else { None };
    if method.dual_view() {
        (1..view_set.len())
            .map(|t| sample_pixels(view_set, &[0, t], k, rng, labels))
            .collect()
    } else {
        let all: Vec<usize> = (0..view_set.len()).collect();
        Ok(vec![sample_pixels(view_set, &all, k, rng, labels)?])
    }
}

/// Loss over sampled batches plus `d loss / d field` for every view.
pub fn evaluate<T: Real>(
    method: Method,
    fields: &[EmbeddingField<T>],
    batches: &[PixelBatch],
    cfg: &LossConfig,
) -> Result<(T, Vec<EmbeddingField<T>>)> {
    let mut grads: Vec<EmbeddingField<T>> =
        fields.iter().map(|f| EmbeddingField::zeros(f.height, f.width, f.dim())).collect();
    if batches.is_empty() {
        return Err(Error::InvalidConfig("no pixel batches to evaluate".into()));
    }
    let scale = T::of(1.0 / batches.len() as f64);
    let mut value = T::zero();
    for batch in batches {
        let gathered: Vec<_> = batch
            .views
            .iter()
            .zip(&batch.indices)
            .map(|(&v, idx)| fields[v].gather(idx))
            .collect();
        let views: Vec<ArrayView2<T>> = gathered.iter().map(|g| g.view()).collect();
        let out = loss(method, &views, batch.labels.as_deref(), cfg)?;
        value = value + out.value * scale;
        for ((&v, idx), g) in batch.views.iter().zip(&batch.indices).zip(out.grads) {
            grads[v].scatter_add(idx, (g * scale).view());
        }
    }
    Ok((value, grads))
}
