//! Segmentation fine-tuning and overlap/surface metrics.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{mix, Sample};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMask, NUM_CLASSES};
use crate::net::{ForwardCache, ModelParams, Real, Sgd, Tensor};

/// Foreground classes scored by every metric.
pub const SCORED_CLASSES: [u8; 2] = [1, 2];

/// `2|P∩G| / (|P|+|G|)` for one class; 1 when the class is absent from both.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_same_size(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == class, g == class);
        np += ip as usize;
        ng += ig as usize;
        inter += (ip && ig) as usize;
    }
    Ok(if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 })
}

fn check_same_size(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::ShapeMismatch(format!("masks {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Pixels of `class` with a 4-neighbour outside the image or of another class.
pub fn boundary(mask: &LabelMask, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.size();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != class {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if edge
                || mask.get(r - 1, c) != class
                || mask.get(r + 1, c) != class
                || mask.get(r, c - 1) != class
                || mask.get(r, c + 1) != class
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Distance from each point of `from` to its nearest point of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

/// HD95 and ASD between the boundaries of `class` in both masks.
pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<SurfaceDistances> {
    check_same_size(pred, gt)?;
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::EmptySurface { class });
    }
    let (dpg, dgp) = (directed(&bp, &bg), directed(&bg, &bp));
    let hd95 = percentile(&dpg, 95.0).max(percentile(&dgp, 95.0));
    let asd = (dpg.iter().sum::<f64>() + dgp.iter().sum::<f64>()) / (dpg.len() + dgp.len()) as f64;
    Ok(SurfaceDistances { hd95, asd })
}

pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    Ok(surface_distances(pred, gt, class)?.hd95)
}

pub fn asd(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    Ok(surface_distances(pred, gt, class)?.asd)
}

/// Validation indices per fold, stratified by the PE flag. Every index
/// appears in exactly one fold.
pub fn fold_partition(pe: &[bool], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > pe.len() {
        return Err(Error::InvalidConfig(format!("{folds} folds for {} samples", pe.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for flag in [true, false] {
        let mut group: Vec<usize> = (0..pe.len()).filter(|&i| pe[i] == flag).collect();
        group.shuffle(&mut rng);
        for i in group {
            out[next % folds].push(i);
            next += 1;
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// 1×1 convolution from embeddings to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead<T> {
    /// `(NUM_CLASSES, D)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> SegHead<T> {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::<f64>::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((NUM_CLASSES, dim), || T::of(normal.sample(&mut rng))),
            bias: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    /// `(NUM_CLASSES, H·W)` logits from `(D, H·W)` embeddings.
    pub fn logits(&self, z: &Array2<T>) -> Array2<T> {
        let mut out = self.weight.dot(z);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(&self.bias) {
            row.mapv_inplace(|v| v + b);
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor<f32>> {
        vec![
            Tensor {
                name: "seg_head.weight".into(),
                shape: vec![NUM_CLASSES, self.weight.ncols(), 1, 1],
                data: self.weight.iter().map(|v| v.as_f64() as f32).collect(),
            },
            Tensor {
                name: "seg_head.bias".into(),
                shape: vec![NUM_CLASSES],
                data: self.bias.iter().map(|v| v.as_f64() as f32).collect(),
            },
        ]
    }

    pub fn from_tensors(tensors: &[Tensor<f32>], dim: usize) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks `{name}`")))
        };
        let (w, b) = (find("seg_head.weight")?, find("seg_head.bias")?);
        if w.data.len() != NUM_CLASSES * dim || b.data.len() != NUM_CLASSES {
            return Err(Error::ShapeMismatch("segmentation head does not match the embedding width".into()));
        }
        Ok(Self {
            weight: Array2::from_shape_fn((NUM_CLASSES, dim), |(i, j)| T::of(w.data[i * dim + j] as f64)),
            bias: b.data.iter().map(|&v| T::of(v as f64)).collect(),
        })
    }
}

/// Network plus segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub net: ModelParams<T>,
    pub head: SegHead<T>,
}

fn softmax_columns<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.clone();
    for mut col in p.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(T::neg_infinity(), T::max);
        col.mapv_inplace(|v| (v - max).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    p
}

const DICE_SMOOTH: f64 = 1.0;

/// Mean pixel cross-entropy plus `dice_weight · (1 − mean soft Dice over
/// all classes)`, with `d loss / d logits`.
pub fn seg_loss<T: Real>(logits: &Array2<T>, mask: &LabelMask, dice_weight: f64) -> Result<(T, Array2<T>)> {
    let n = mask.data().len();
    if logits.dim() != (NUM_CLASSES, n) {
        return Err(Error::ShapeMismatch(format!("logits {:?} for {n} pixels", logits.dim())));
    }
    let p = softmax_columns(logits);
    let labels = mask.data();
    let inv_n = T::of(1.0 / n as f64);
    let mut ce = T::zero();
    for (j, &l) in labels.iter().enumerate() {
        ce = ce - p[[l as usize, j]].max(T::of(1e-30)).ln();
    }
    let mut value = ce * inv_n;

    // d loss / d p from the Dice term; the cross-entropy part is added in logit space.
    let mut dp = Array2::<T>::zeros(p.raw_dim());
    let smooth = T::of(DICE_SMOOTH);
    let w = T::of(dice_weight / NUM_CLASSES as f64);
    let mut dice_sum = T::zero();
    for c in 0..NUM_CLASSES {
        let row = p.row(c);
        let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
        for (j, &l) in labels.iter().enumerate() {
            let g = if l as usize == c { T::one() } else { T::zero() };
            inter = inter + row[j] * g;
            sp = sp + row[j];
            sg = sg + g;
        }
        let num = T::of(2.0) * inter + smooth;
        let den = sp + sg + smooth;
        dice_sum = dice_sum + num / den;
        for (j, &l) in labels.iter().enumerate() {
            let g = if l as usize == c { T::one() } else { T::zero() };
            let dd = (T::of(2.0) * g * den - num) / (den * den);
            dp[[c, j]] = -w * dd;
        }
    }
    value = value + T::of(dice_weight) * (T::one() - dice_sum / T::of(NUM_CLASSES as f64));

    let mut dlogits = Array2::<T>::zeros(p.raw_dim());
    for j in 0..n {
        let col = p.column(j);
        let inner: T = (0..NUM_CLASSES).map(|c| col[c] * dp[[c, j]]).sum();
        for c in 0..NUM_CLASSES {
            let onehot = if labels[j] as usize == c { T::one() } else { T::zero() };
            dlogits[[c, j]] = col[c] * (dp[[c, j]] - inner) + (col[c] - onehot) * inv_n;
        }
    }
    Ok((value, dlogits))
}

impl<T: Real> SegModel<T> {
    pub fn logits(&self, img: &ImageTensor) -> Result<Array2<T>> {
        Ok(self.head.logits(&self.net.forward(img)?.data))
    }

    /// Loss and gradients for one labelled image.
    pub fn loss_and_grads(
        &self,
        img: &ImageTensor,
        mask: &LabelMask,
        dice_weight: f64,
    ) -> Result<(T, ModelParams<T>, SegHead<T>)> {
        if img.size() != mask.size() {
            return Err(Error::ShapeMismatch("image and mask sizes differ".into()));
        }
        let (field, cache): (_, ForwardCache<T>) = self.net.forward_cached(img)?;
        let logits = self.head.logits(&field.data);
        let (value, dlogits) = seg_loss(&logits, mask, dice_weight)?;
        let head_grad = SegHead { weight: dlogits.dot(&field.data.t()), bias: dlogits.sum_axis(Axis(1)) };
        let dz = self.head.weight.t().dot(&dlogits);
        Ok((value, self.net.backward(&cache, &dz), head_grad))
    }

    pub fn predict(&self, img: &ImageTensor) -> Result<LabelMask> {
        let logits = self.logits(img)?;
        let (h, w) = img.size();
        let labels = logits
            .axis_iter(Axis(1))
            .map(|col| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if col[c] > col[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask::from_vec(h, w, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub dice_weight: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { folds: 5, epochs: 20, lr: 0.02, momentum: 0.9, dice_weight: 1.0, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("eval.folds {} must be >= 2", self.folds)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.dice_weight < 0.0 {
            return Err(Error::InvalidConfig("fine-tuning lr/momentum/dice_weight out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldModel {
    pub fold: usize,
    pub model: SegModel<f32>,
    /// Indices (into the labelled sample list) held out for this fold.
    pub val: Vec<usize>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn labels_of(sample: &Sample) -> Result<&LabelMask> {
    sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::LabelsRequired(format!("fine-tuning needs masks; sample {} has none", sample.id)))
}

/// Trains network and head on `train` (one image per step, shuffled each epoch).
pub fn finetune_fold(
    init: &ModelParams<f32>,
    train: &[&Sample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(SegModel<f32>, Vec<f64>)> {
    let mut model = SegModel { net: init.clone(), head: SegHead::init(init.arch.dim, mix(seed, 0x5e9, 0)) };
    let mut opt = Sgd::new(&model.net, cfg.lr as f32, cfg.momentum as f32);
    let mut head_velocity = model.head.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5e9, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let (lr, mu) = (cfg.lr as f32, cfg.momentum as f32);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = train[i];
            let (value, gnet, ghead) = model.loss_and_grads(&s.images.factual, labels_of(s)?, cfg.dice_weight)?;
            if ghead.weight.iter().chain(&ghead.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient("seg_head".into()));
            }
            opt.step(&mut model.net, &gnet)?;
            head_velocity.weight.zip_mut_with(&ghead.weight, |v, &g| *v = mu * *v + g);
            head_velocity.bias.zip_mut_with(&ghead.bias, |v, &g| *v = mu * *v + g);
            model.head.weight.scaled_add(-lr, &head_velocity.weight);
            model.head.bias.scaled_add(-lr, &head_velocity.bias);
            total += value as f64;
        }
        losses.push(total / train.len().max(1) as f64);
    }
    Ok((model, losses))
}

/// K-fold cross-validated fine-tuning from the same initial network.
pub fn finetune(init: &ModelParams<f32>, samples: &[Sample], cfg: &FinetuneConfig) -> Result<Vec<FoldModel>> {
    cfg.validate()?;
    for s in samples {
        labels_of(s)?;
    }
    let pe: Vec<bool> = samples.iter().map(|s| s.spec.pe).collect();
    let folds = fold_partition(&pe, cfg.folds, cfg.seed)?;
    folds
        .into_iter()
        .enumerate()
        .map(|(fold, val)| {
            let train: Vec<&Sample> =
                (0..samples.len()).filter(|i| val.binary_search(i).is_err()).map(|i| &samples[i]).collect();
            let (model, epoch_losses) = finetune_fold(init, &train, cfg, mix(cfg.seed, 0xf01d, fold as u64))?;
            Ok(FoldModel { fold, model, val, epoch_losses })
        })
        .collect()
}

/// Scores for one held-out sample. Surface distances are `None` when a
/// predicted class is empty for every scored class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub fold: usize,
    pub id: String,
    pub pe: bool,
    pub dsc: f64,
    pub dsc_left: f64,
    pub dsc_right: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn score_sample(pred: &LabelMask, gt: &LabelMask, fold: usize, id: &str, pe: bool) -> Result<SampleMetrics> {
    let dl = dice(pred, gt, SCORED_CLASSES[0])?;
    let dr = dice(pred, gt, SCORED_CLASSES[1])?;
    let mut surf = Vec::new();
    for class in SCORED_CLASSES {
        match surface_distances(pred, gt, class) {
            Ok(s) => surf.push(s),
            Err(Error::EmptySurface { class }) => log::warn!("sample {id}: empty surface for class {class}; not scored"),
            Err(e) => return Err(e),
        }
    }
    let mean = |f: fn(&SurfaceDistances) -> f64| -> Option<f64> {
        (!surf.is_empty()).then(|| surf.iter().map(f).sum::<f64>() / surf.len() as f64)
    };
    Ok(SampleMetrics {
        fold,
        id: id.to_string(),
        pe,
        dsc: (dl + dr) / 2.0,
        dsc_left: dl,
        dsc_right: dr,
        hd95: mean(|s| s.hd95),
        asd: mean(|s| s.asd),
    })
}

/// Per-fold means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub dsc: f64,
    pub dsc_nf: Option<f64>,
    pub dsc_pe: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn fold_metrics(fold: usize, rows: &[SampleMetrics]) -> FoldMetrics {
    FoldMetrics {
        fold,
        dsc: mean_of(rows.iter().map(|r| r.dsc)).unwrap_or(f64::NAN),
        dsc_nf: mean_of(rows.iter().filter(|r| !r.pe).map(|r| r.dsc)),
        dsc_pe: mean_of(rows.iter().filter(|r| r.pe).map(|r| r.dsc)),
        hd95: mean_of(rows.iter().filter_map(|r| r.hd95)),
        asd: mean_of(rows.iter().filter_map(|r| r.asd)),
    }
}

/// Mean and population standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mean = mean_of(values.iter().copied())?;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: Option<MeanStd>,
    pub dsc_nf: Option<MeanStd>,
    pub dsc_pe: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub asd: Option<MeanStd>,
}

impl SegMetrics {
    pub fn from_folds(folds: &[FoldMetrics]) -> Self {
        let collect = |f: fn(&FoldMetrics) -> Option<f64>| MeanStd::of(&folds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            dsc: collect(|f| Some(f.dsc)),
            dsc_nf: collect(|f| f.dsc_nf),
            dsc_pe: collect(|f| f.dsc_pe),
            hd95: collect(|f| f.hd95),
            asd: collect(|f| f.asd),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub per_sample: Vec<SampleMetrics>,
    pub per_fold: Vec<FoldMetrics>,
    pub summary: SegMetrics,
}

/// Scores each fold's model on its held-out samples.
pub fn evaluate(folds: &[FoldModel], samples: &[Sample]) -> Result<SegReport> {
    let mut per_sample = Vec::new();
    let mut per_fold = Vec::new();
    for f in folds {
        let mut rows = Vec::with_capacity(f.val.len());
        for &i in &f.val {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::ShapeMismatch(format!("fold {} refers to sample {i}", f.fold)))?;
            let pred = f.model.predict(&s.images.factual)?;
            rows.push(score_sample(&pred, labels_of(s)?, f.fold, &s.id, s.spec.pe)?);
        }
        per_fold.push(fold_metrics(f.fold, &rows));
        per_sample.extend(rows);
    }
    let summary = SegMetrics::from_folds(&per_fold);
    Ok(SegReport { per_sample, per_fold, summary })
}
