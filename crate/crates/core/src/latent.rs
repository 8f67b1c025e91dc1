//! K-means clustering, cluster purity and the inter/intra class separation ratio.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::image::{LabelMask, NUM_CLASSES};
use crate::net::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub ids: Vec<usize>,
    /// `k × D`.
    pub centroids: Array2<f64>,
    pub iterations: usize,
    /// Sum of squared distances after each Lloyd iteration.
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::NAN)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn kmeans_objective(x: ArrayView2<f64>, ids: &[usize], centroids: ArrayView2<f64>) -> f64 {
    x.axis_iter(Axis(0)).zip(ids).map(|(p, &c)| sq_dist(p, centroids.row(c))).sum()
}

fn seed_plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.axis_iter(Axis(0)).map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, p) in x.axis_iter(Axis(0)).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

fn assign(x: ArrayView2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    x.axis_iter(Axis(0))
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, m) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = sq_dist(p, m);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Lloyd's algorithm from k-means++ seeding. An emptied cluster keeps its
/// previous centroid.
pub fn kmeans(x: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(x, k, &mut rng);
    let mut ids = assign(x, &centroids);
    let mut history = vec![kmeans_objective(x, &ids, centroids.view())];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &c) in x.axis_iter(Axis(0)).zip(&ids) {
            let mut row = sums.row_mut(c);
            row += &p;
            counts[c] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let mean = &sums.row(c) / cnt as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        let next = assign(x, &centroids);
        history.push(kmeans_objective(x, &next, centroids.view()));
        if next == ids {
            break;
        }
        ids = next;
    }
    Ok(ClusterAssignment { ids, centroids, iterations, objective_history: history })
}

/// Fraction of points that carry their cluster's majority class.
pub fn purity(ids: &[usize], labels: &[u8]) -> Result<f64> {
    if ids.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} cluster ids vs {} labels", ids.len(), labels.len())));
    }
    if ids.is_empty() {
        return Err(Error::TooFewPoints { n: 0, k: 1 });
    }
    let mut table: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
    for (&c, &l) in ids.iter().zip(labels) {
        *table.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / ids.len() as f64)
}

/// Mean pairwise centroid distance over mean per-class RMS spread.
///
/// Returns `+∞` when every class is a single point cloud of zero spread
/// with distinct means, and `0` when both numerator and denominator vanish.
pub fn d_over_sigma(x: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} embeddings vs {} labels", x.nrows(), labels.len())));
    }
    let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::SingleClass);
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut spread = 0.0;
    for rows in groups.values() {
        let sub = x.select(Axis(0), rows);
        let mu = sub.mean_axis(Axis(0)).expect("non-empty class");
        let ms = sub.axis_iter(Axis(0)).map(|p| sq_dist(p, mu.view())).sum::<f64>() / rows.len() as f64;
        spread += ms.sqrt();
        means.push(mu);
    }
    let sigma = spread / groups.len() as f64;
    let (mut d, mut pairs) = (0.0, 0usize);
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            d += sq_dist(means[a].view(), means[b].view()).sqrt();
            pairs += 1;
        }
    }
    let d = d / pairs as f64;
    Ok(if sigma > 0.0 {
        d / sigma
    } else if d > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

/// Equal numbers of pixels from every class present in `mask`: `m /
/// NUM_CLASSES` each, or the size of the smallest present class if that is
/// lower. Drawn without replacement and returned class by class in
/// row-major order.
pub fn sample_stratified<R: Rng + ?Sized>(mask: &LabelMask, m: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let (h, w) = mask.size();
    let pools: Vec<Vec<(usize, usize)>> = (0..NUM_CLASSES as u8)
        .map(|class| (0..h * w).map(|i| (i / w, i % w)).filter(|&(r, c)| mask.get(r, c) == class).collect())
        .filter(|p: &Vec<(usize, usize)>| !p.is_empty())
        .collect();
    let smallest = pools.iter().map(Vec::len).min().unwrap_or(0);
    let take = (m / NUM_CLASSES).max(1).min(smallest);
    let mut out = Vec::with_capacity(take * pools.len());
    for pool in &pools {
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i]));
    }
    out
}

/// Metrics over a pooled set of labelled embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    pub purity: f64,
    #[serde(with = "crate::latent::inf_as_string")]
    pub d_over_sigma: f64,
    pub class_sizes: BTreeMap<u8, usize>,
    pub n_points: usize,
}

/// K-means with `k` clusters, then purity and d/σ over the same points.
pub fn latent_metrics(x: ArrayView2<f64>, labels: &[u8], k: usize, seed: u64) -> Result<LatentMetrics> {
    let clusters = kmeans(x, k, seed, 300)?;
    let mut class_sizes = BTreeMap::new();
    for &l in labels {
        *class_sizes.entry(l).or_insert(0) += 1;
    }
    Ok(LatentMetrics {
        purity: purity(&clusters.ids, labels)?,
        d_over_sigma: d_over_sigma(x, labels)?,
        class_sizes,
        n_points: labels.len(),
    })
}

/// Stratified embeddings of `samples` (factual images, rendered masks) as
/// an `N × D` matrix with labels.
pub fn collect_embeddings(
    params: &ModelParams<f32>,
    samples: &[Sample],
    per_image: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = params.arch.dim;
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for s in samples {
        let field = params.forward(&s.images.factual)?;
        for (r, c) in sample_stratified(&s.images.mask, per_image, &mut rng) {
            rows.extend(field.data.column(r * field.width + c).iter().map(|&v| v as f64));
            labels.push(s.images.mask.get(r, c));
        }
    }
    let x = Array2::from_shape_vec((labels.len(), dim), rows).expect("row-major embeddings");
    Ok((x, labels))
}

/// Latent metrics of a model over held-out samples.
pub fn evaluate_latent(
    params: &ModelParams<f32>,
    samples: &[Sample],
    per_image: usize,
    clusters: usize,
    seed: u64,
) -> Result<LatentMetrics> {
    let (x, labels) = collect_embeddings(params, samples, per_image, seed)?;
    latent_metrics(x.view(), &labels, clusters, seed)
}

/// JSON has no infinity; the sentinel is written as the string `"inf"`.
pub(crate) mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}
