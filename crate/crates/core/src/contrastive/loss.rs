//! The four dense contrastive objectives and their gradients.
//!
//! Every objective reduces to one pooled computation. Sampled embeddings of
//! `V` views are stacked into `N = V·K` rows; row `v·K + i` is location `i`
//! seen in view `v`. For an anchor row `a` with key set `D(a)` and positive
//! set `P(a) ⊆ D(a)`:
//!
//! ```text
//! ℓ(a) = mean_{p ∈ P(a)} −log( exp(s_ap/τ) / Σ_{d ∈ D(a)} exp(s_ad/τ) )
//! ```
//!
//! with `s` the dot product of unit vectors. The mean over positives sits
//! outside the log. Unsupervised objectives pair equal locations, supervised
//! ones pair equal non-background classes.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BACKGROUND;
use crate::net::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dvd,
    Mvd,
    Sdvd,
    Smvd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dvd, Method::Mvd, Method::Sdvd, Method::Smvd];

    pub fn supervised(self) -> bool {
        matches!(self, Method::Sdvd | Method::Smvd)
    }

    /// Whether views are compared pairwise against the anchor.
    pub fn dual_view(self) -> bool {
        matches!(self, Method::Dvd | Method::Sdvd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dvd => "dvd",
            Method::Mvd => "mvd",
            Method::Sdvd => "sdvd",
            Method::Smvd => "smvd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss method `{s}` (dvd, mvd, sdvd, smvd)")))
    }
}

/// Key set for the multi-view objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// Keys are the pixels of every other view.
    #[default]
    OtherViews,
    /// Keys are every pooled pixel except the anchor itself.
    AllViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub method: Method,
    pub temperature: f64,
    /// Sampled locations per view.
    pub samples: usize,
    pub negatives: NegativeSet,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { method: Method::Dvd, temperature: 0.1, samples: 1000, negatives: NegativeSet::OtherViews }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.samples < 2 {
            return Err(Error::InvalidConfig(format!("samples {} must be >= 2", self.samples)));
        }
        Ok(())
    }
}

/// Loss value and `d loss / d z` for every input view (each `K × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grads: Vec<Array2<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Weighting {
    /// Mean within each anchor view, then mean over views.
    PerView,
    /// Mean over all anchors.
    Global,
}

struct Pooled<'a> {
    k: usize,
    labels: Option<&'a [u8]>,
    negatives: NegativeSet,
    weighting: Weighting,
}

impl Pooled<'_> {
    /// Class of pooled row `m`: its label when supervised, else its location.
    fn class_of(&self, m: usize) -> usize {
        match self.labels {
            Some(l) => l[m % self.k] as usize,
            None => m % self.k,
        }
    }

    fn run<T: Real>(&self, views: &[ArrayView2<T>], tau: f64) -> Result<LossOutput<T>> {
        let k = self.k;
        let z = ndarray::concatenate(Axis(0), views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let n = z.nrows();
        let sim = z.dot(&z.t());
        let inv_tau = T::of(1.0 / tau);
        let all_views = self.negatives == NegativeSet::AllViews;
        let view: Vec<usize> = (0..n).map(|m| m / k).collect();
        let class: Vec<usize> = (0..n).map(|m| self.class_of(m)).collect();
        let n_classes = class.iter().max().map_or(0, |&c| c + 1);

        // Pooled rows per (view, class) decide which anchors have a positive.
        let mut count = vec![0usize; views.len() * n_classes];
        for m in 0..n {
            count[view[m] * n_classes + class[m]] += 1;
        }
        let mut total_count = vec![0usize; n_classes];
        for m in 0..n {
            total_count[class[m]] += 1;
        }
        let mut per_view = vec![0usize; views.len()];
        let mut anchors = Vec::new();
        for a in 0..n {
            if self.labels.is_some_and(|l| l[a % k] == BACKGROUND) {
                continue;
            }
            let own = if all_views { 1 } else { count[view[a] * n_classes + class[a]] };
            if total_count[class[a]] > own {
                per_view[view[a]] += 1;
                anchors.push(a);
            }
        }
        if anchors.is_empty() {
            return Err(Error::NoForegroundAnchors);
        }
        let active_views = per_view.iter().filter(|&&c| c > 0).count();
        let weight = |a: usize| -> T {
            match self.weighting {
                Weighting::PerView => T::of(1.0 / (active_views * per_view[view[a]]) as f64),
                Weighting::Global => T::of(1.0 / anchors.len() as f64),
            }
        };

        let mut coef = Array2::<T>::zeros((n, n));
        let mut total = T::zero();
        let mut buf = vec![T::zero(); n];
        for &a in &anchors {
            let (va, ca) = (view[a], class[a]);
            // Keys are every row outside `lo..hi`.
            let (lo, hi) = if all_views { (a, a + 1) } else { (va * k, (va + 1) * k) };
            let row = sim.row(a);
            let row = row.as_slice().expect("contiguous similarity row");
            let mut max = T::neg_infinity();
            for r in [0..lo, hi..n] {
                for (b, &s) in buf[r.clone()].iter_mut().zip(&row[r]) {
                    *b = s * inv_tau;
                    max = max.max(*b);
                }
            }
            let (mut pos_sum, mut pos_count) = (T::zero(), 0usize);
            let mut denom = T::zero();
            for r in [0..lo, hi..n] {
                for m in r.clone() {
                    if class[m] == ca {
                        pos_sum = pos_sum + buf[m];
                        pos_count += 1;
                    }
                }
                let seg = &mut buf[r];
                seg.iter_mut().for_each(|b| *b = *b - max);
                T::exp_slice(seg);
                denom = denom + seg.iter().fold(T::zero(), |acc, &e| acc + e);
            }
            let lse = max + denom.ln();
            let np = T::of(pos_count as f64);
            let wa = weight(a);
            total = total + wa * (lse - pos_sum / np);
            let (scale, pos) = (wa * inv_tau / denom, wa * inv_tau / np);
            let mut crow = coef.row_mut(a);
            let crow = crow.as_slice_mut().expect("contiguous coefficient row");
            for r in [0..lo, hi..n] {
                for m in r {
                    crow[m] = buf[m] * scale - if class[m] == ca { pos } else { T::zero() };
                }
            }
        }
        // d/dz_a of Σ c_am ⟨z_a, z_m⟩ hits both rows.
        let dz = coef.dot(&z) + coef.t().dot(&z);
        let grads = (0..views.len())
            .map(|v| dz.slice(ndarray::s![v * k..(v + 1) * k, ..]).to_owned())
            .collect();
        Ok(LossOutput { value: total, grads })
    }
}

fn check_views<T: Real>(views: &[ArrayView2<T>], labels: Option<&[u8]>, min_views: usize) -> Result<usize> {
    if views.len() < min_views {
        return Err(Error::ShapeMismatch(format!("need at least {min_views} views, got {}", views.len())));
    }
    let (k, d) = views[0].dim();
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 samples per view, got {k}")));
    }
    if views.iter().any(|v| v.dim() != (k, d)) {
        return Err(Error::ShapeMismatch("all views must share K and D".into()));
    }
    if labels.is_some_and(|l| l.len() != k) {
        return Err(Error::ShapeMismatch("one label per sampled location".into()));
    }
    Ok(k)
}

fn supervised_labels(labels: Option<&[u8]>) -> Result<&[u8]> {
    let l = labels.ok_or_else(|| Error::LabelsRequired("supervised objectives need sampled labels".into()))?;
    if l.iter().all(|&c| c == BACKGROUND) {
        return Err(Error::NoForegroundAnchors);
    }
    Ok(l)
}

/// Two-view NT-Xent with same-location positives and cross-view keys,
/// averaged over both directions.
pub fn ntxent_pair<T: Real>(za: ArrayView2<T>, zb: ArrayView2<T>, tau: f64) -> Result<LossOutput<T>> {
    let k = check_views(&[za, zb], None, 2)?;
    let pooled = Pooled { k, labels: None, negatives: NegativeSet::OtherViews, weighting: Weighting::PerView };
    pooled.run(&[za, zb], tau)
}

/// Pairwise objective of the anchor (index 0) against each target, averaged over targets.
fn dual_view<T: Real>(views: &[ArrayView2<T>], labels: Option<&[u8]>, tau: f64) -> Result<LossOutput<T>> {
    let k = check_views(views, labels, 2)?;
    let targets = views.len() - 1;
    let scale = T::of(1.0 / targets as f64);
    let mut value = T::zero();
    let mut grads: Vec<Array2<T>> = views.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
    let pooled = Pooled { k, labels, negatives: NegativeSet::OtherViews, weighting: Weighting::PerView };
    for t in 1..views.len() {
        let out = pooled.run(&[views[0], views[t]], tau)?;
        value = value + out.value * scale;
        grads[0].scaled_add(scale, &out.grads[0]);
        grads[t].scaled_add(scale, &out.grads[1]);
    }
    Ok(LossOutput { value, grads })
}

/// DVD-CL: view 0 is the anchor, the rest are targets.
pub fn loss_dvd<T: Real>(views: &[ArrayView2<T>], cfg: &LossConfig) -> Result<LossOutput<T>> {
    dual_view(views, None, cfg.temperature)
}

/// MVD-CL: all views pooled; positives are the same location in other views.
pub fn loss_mvd<T: Real>(views: &[ArrayView2<T>], cfg: &LossConfig) -> Result<LossOutput<T>> {
    let k = check_views(views, None, 2)?;
    Pooled { k, labels: None, negatives: cfg.negatives, weighting: Weighting::Global }.run(views, cfg.temperature)
}

/// S-DVD-CL: as DVD-CL with equal-class positives and foreground anchors.
pub fn loss_sdvd<T: Real>(views: &[ArrayView2<T>], labels: Option<&[u8]>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_views(views, labels, 2)?;
    dual_view(views, Some(supervised_labels(labels)?), cfg.temperature)
}

/// S-MVD-CL: pooled supervised objective.
pub fn loss_smvd<T: Real>(views: &[ArrayView2<T>], labels: Option<&[u8]>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    let k = check_views(views, labels, 2)?;
    let labels = supervised_labels(labels)?;
    Pooled { k, labels: Some(labels), negatives: cfg.negatives, weighting: Weighting::Global }.run(views, cfg.temperature)
}

pub fn loss<T: Real>(
    method: Method,
    views: &[ArrayView2<T>],
    labels: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    match method {
        Method::Dvd => loss_dvd(views, cfg),
        Method::Mvd => loss_mvd(views, cfg),
        Method::Sdvd => loss_sdvd(views, labels, cfg),
        Method::Smvd => loss_smvd(views, labels, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_two_identity_case() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let out = ntxent_pair(z.view(), z.view(), 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.value - expect).abs() < 1e-12);
        assert!((out.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn all_background_rejected() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = LossConfig::default();
        let err = loss_sdvd(&[z.view(), z.view()], Some(&[0, 0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::NoForegroundAnchors));
        assert!(matches!(loss_sdvd(&[z.view(), z.view()], None, &cfg), Err(Error::LabelsRequired(_))));
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("simclr".parse::<Method>().is_err());
    }
}
