use rand::seq::index;
use rand::Rng;

use crate::affine::{valid_intersection, AffineMap};
use crate::error::{Error, Result};
use crate::image::LabelMask;
use crate::phantom::ViewSet;

/// Sampled canonical-frame locations and their resolved pixel in each active view.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    /// `(row, col)` in the canonical frame.
    pub coords: Vec<(usize, usize)>,
    /// Indices into the view set (0 = anchor) of the active views.
    pub views: Vec<usize>,
    /// `indices[j][i]` is `coords[i]` resolved in view `views[j]`.
    pub indices: Vec<Vec<(usize, usize)>>,
    pub labels: Option<Vec<u8>>,
    /// Set when the intersection held fewer than K pixels.
    pub with_replacement: bool,
}

impl PixelBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Nearest pixel of the exact affine image of `(row, col)`.
#[inline]
pub fn resolve(map: &AffineMap, row: usize, col: usize) -> (usize, usize) {
    let (x, y) = map.map_point((col as f64, row as f64));
    (y.round() as usize, x.round() as usize)
}

/// Draws `k` locations uniformly from the intersection of the active views'
/// valid regions; without replacement whenever the intersection allows.
pub fn sample_pixels<R: Rng + ?Sized>(
    view_set: &ViewSet,
    active: &[usize],
    k: usize,
    rng: &mut R,
    labels: Option<&LabelMask>,
) -> Result<PixelBatch> {
    if active.is_empty() || k == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one active view and k > 0".into()));
    }
    let maps: Vec<AffineMap> = active.iter().map(|&v| *view_set.view(v).map()).collect();
    let sizes: Vec<(usize, usize)> = active.iter().map(|&v| view_set.view(v).size()).collect();
    let region = valid_intersection(&maps, &sizes, view_set.base_size());
    let pool = region.pixels();
    if pool.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let with_replacement = pool.len() < k;
    let coords: Vec<(usize, usize)> = if with_replacement {
        log::warn!("valid intersection has {} pixels < k = {k}; sampling with replacement", pool.len());
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    } else {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    };
    let indices = maps
        .iter()
        .map(|m| coords.iter().map(|&(r, c)| resolve(m, r, c)).collect())
        .collect();
    let labels = labels.map(|mask| coords.iter().map(|&(r, c)| mask.get(r, c)).collect());
    Ok(PixelBatch { coords, views: active.to_vec(), indices, labels, with_replacement })
}
