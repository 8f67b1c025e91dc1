//! Synthetic chest-like phantoms with lung labels, and a parametric
//! counterfactual simulator over their acquisition and pathology attributes.
//!
//! Anatomy (body outline, lung ellipses, spine) is fixed by the spec; the
//! scanner profile and the pleural-effusion flag are the intervenable parents.
//! Noise is drawn from the spec seed in a fixed order, so a counterfactual
//! re-render shares every exogenous draw with its factual image.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::augment::{augment_view, AugmentRecord, GeomAugmentConfig, PhotoAugmentConfig};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMask, BACKGROUND, LEFT_LUNG, RIGHT_LUNG};

const AIR: f32 = 0.05;
const BODY: f32 = 0.55;
const LUNG: f32 = 0.2;
const SPINE: f32 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scanner {
    A,
    B,
}

impl Scanner {
    pub fn flipped(self) -> Self {
        match self {
            Scanner::A => Scanner::B,
            Scanner::B => Scanner::A,
        }
    }

    /// `(gamma, contrast, offset, noise scale)`.
    fn profile(self) -> (f32, f32, f32, f32) {
        match self {
            Scanner::A => (1.0, 1.0, 0.0, 1.0),
            Scanner::B => (0.75, 0.9, 0.06, 1.6),
        }
    }

    fn apply(self, v: f32) -> f32 {
        let (gamma, contrast, offset, _) = self.profile();
        if gamma == 1.0 && contrast == 1.0 && offset == 0.0 {
            return v;
        }
        offset + contrast * v.max(0.0).powf(gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axes along the ellipse's own x and y directions.
    pub axes: [f64; 2],
    pub angle_deg: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let [a, b] = self.axes;
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }

    /// Rows strictly below this line belong to the lower `fraction` of the ellipse.
    pub fn fill_line(&self, fraction: f64) -> f64 {
        let (_, hy) = self.half_extent();
        self.center[1] + hy - fraction * 2.0 * hy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[height, width]`.
    pub size: [usize; 2],
    /// `[left, right]` lung, left meaning smaller column.
    pub lungs: [Ellipse; 2],
    pub spine_x: f64,
    pub spine_width: f64,
    pub pe: bool,
    /// Lower fraction of each lung made opaque when `pe` is set.
    pub pe_fill: f64,
    pub scanner: Scanner,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Draws anatomy with mild jitter. `pe_fill` is drawn regardless of `pe`
    /// so that toggling the flag is a pure intervention.
    pub fn random(size: (usize, usize), pe: bool, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a7a7);
        let (h, w) = (size.0 as f64, size.1 as f64);
        let mut jit = |scale: f64| rng.random_range(-scale..=scale);
        let lung = |cx: f64, mirror: f64, jit: &mut dyn FnMut(f64) -> f64| Ellipse {
            center: [cx * w + jit(0.025) * w, 0.47 * h + jit(0.03) * h],
            axes: [0.12 * w + jit(0.015) * w, 0.26 * h + jit(0.025) * h],
            angle_deg: mirror * (6.0 + jit(4.0)),
        };
        let left = lung(0.3, 1.0, &mut jit);
        let right = lung(0.7, -1.0, &mut jit);
        let spine_x = 0.5 * w + jit(0.01) * w - 0.5;
        let spine_width = (0.07 * w).max(1.5);
        let pe_fill = 0.35 + (jit(1.0) + 1.0) * 0.15;
        let scanner = if jit(1.0) < 0.0 { Scanner::A } else { Scanner::B };
        Self {
            size: [size.0, size.1],
            lungs: [left, right],
            spine_x,
            spine_width,
            pe,
            pe_fill,
            scanner,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidSpec(format!("image {h}x{w} below 8x8")));
        }
        if !(0.0..=1.0).contains(&self.pe_fill) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec("pe_fill must be in [0, 1] and noise_sigma >= 0".into()));
        }
        for (i, e) in self.lungs.iter().enumerate() {
            let (hx, hy) = e.half_extent();
            if e.axes.iter().any(|a| !(*a > 0.0))
                || e.center[0] - hx < 0.0
                || e.center[1] - hy < 0.0
                || e.center[0] + hx > w as f64 - 1.0
                || e.center[1] + hy > h as f64 - 1.0
            {
                return Err(Error::InvalidSpec(format!("lung {i} does not lie within the image")));
            }
        }
        if self.lungs[0].center[0] >= self.lungs[1].center[0] {
            return Err(Error::InvalidSpec("left lung centre must lie left of the right one".into()));
        }
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64, r as f64);
                if self.lungs[0].contains(x, y) && self.lungs[1].contains(x, y) {
                    return Err(Error::InvalidSpec(format!("lungs overlap at pixel ({r}, {c})")));
                }
            }
        }
        Ok(())
    }

    fn body(&self) -> Ellipse {
        let [h, w] = self.size;
        Ellipse {
            center: [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
            axes: [0.46 * w as f64, 0.48 * h as f64],
            angle_deg: 0.0,
        }
    }

    /// Whether `(x, y)` is inside the opaque (effusion) part of a lung.
    pub fn in_effusion_zone(&self, x: f64, y: f64) -> bool {
        self.lungs
            .iter()
            .any(|l| l.contains(x, y) && y > l.fill_line(self.pe_fill))
    }
}

fn anatomy_mask(spec: &PhantomSpec) -> LabelMask {
    let [h, w] = spec.size;
    let mut mask = LabelMask::background(h, w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            if spec.lungs[0].contains(x, y) {
                mask.set(r, c, LEFT_LUNG);
            } else if spec.lungs[1].contains(x, y) {
                mask.set(r, c, RIGHT_LUNG);
            }
        }
    }
    mask
}

/// Renders the image and its lung mask. Effusion makes the lower part of
/// each lung body-like in intensity but the mask keeps the full lung.
pub fn render_phantom(spec: &PhantomSpec) -> Result<(ImageTensor, LabelMask)> {
    spec.validate()?;
    let [h, w] = spec.size;
    let mask = anatomy_mask(spec);
    let body = spec.body();
    let (_, _, _, noise_scale) = spec.scanner.profile();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = ImageTensor::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            let mut v = if body.contains(x, y) { BODY } else { AIR };
            if v == BODY && (x - spec.spine_x).abs() <= spec.spine_width / 2.0 {
                v = SPINE;
            }
            if mask.get(r, c) != BACKGROUND {
                v = LUNG;
                if spec.pe && spec.in_effusion_zone(x, y) {
                    v = BODY;
                }
            }
            let n: f64 = noise_rng.sample(StandardNormal);
            let v = spec.scanner.apply(v) + (n * spec.noise_sigma) as f32 * noise_scale;
            img.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    Ok((img, mask))
}

/// Which parents to intervene on. `None` leaves a parent at its factual value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub scanner: Option<Scanner>,
    pub pe: Option<bool>,
}

impl Intervention {
    pub fn flip_scanner(spec: &PhantomSpec) -> Self {
        Self { scanner: Some(spec.scanner.flipped()), pe: None }
    }

    pub fn flip_pe(spec: &PhantomSpec) -> Self {
        Self { scanner: None, pe: Some(!spec.pe) }
    }

    pub fn flip_both(spec: &PhantomSpec) -> Self {
        Self { scanner: Some(spec.scanner.flipped()), pe: Some(!spec.pe) }
    }
}

/// Re-renders the same anatomy and noise with the intervened parents changed.
pub fn counterfactual(spec: &PhantomSpec, intervention: Intervention) -> Result<(ImageTensor, LabelMask)> {
    if intervention.scanner.is_none() && intervention.pe.is_none() {
        return Err(Error::NoIntervention);
    }
    let mut cf = spec.clone();
    if let Some(s) = intervention.scanner {
        cf.scanner = s;
    }
    if let Some(pe) = intervention.pe {
        cf.pe = pe;
    }
    render_phantom(&cf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Factual,
    Scanner,
    Pathology,
    Both,
}

impl ViewTag {
    pub const ALL: [ViewTag; 4] = [ViewTag::Factual, ViewTag::Scanner, ViewTag::Pathology, ViewTag::Both];

    pub fn name(self) -> &'static str {
        match self {
            ViewTag::Factual => "factual",
            ViewTag::Scanner => "scanner",
            ViewTag::Pathology => "pathology",
            ViewTag::Both => "both",
        }
    }
}

/// The factual render and its three counterfactuals, all sharing one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualSet {
    pub factual: ImageTensor,
    pub scanner: ImageTensor,
    pub pathology: ImageTensor,
    pub both: ImageTensor,
    pub mask: LabelMask,
}

impl CounterfactualSet {
    pub fn render(spec: &PhantomSpec) -> Result<Self> {
        let (factual, mask) = render_phantom(spec)?;
        let (scanner, _) = counterfactual(spec, Intervention::flip_scanner(spec))?;
        let (pathology, _) = counterfactual(spec, Intervention::flip_pe(spec))?;
        let (both, _) = counterfactual(spec, Intervention::flip_both(spec))?;
        Ok(Self { factual, scanner, pathology, both, mask })
    }

    pub fn image(&self, tag: ViewTag) -> &ImageTensor {
        match tag {
            ViewTag::Factual => &self.factual,
            ViewTag::Scanner => &self.scanner,
            ViewTag::Pathology => &self.pathology,
            ViewTag::Both => &self.both,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub tag: ViewTag,
    pub image: ImageTensor,
    pub mask: LabelMask,
    pub record: AugmentRecord,
}

impl View {
    pub fn map(&self) -> &AffineMap {
        &self.record.map
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.size()
    }
}

/// Anchor (augmented factual) plus augmented counterfactual targets. The
/// base mask lives in the canonical frame every view map starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub base_mask: LabelMask,
    pub anchor: View,
    pub targets: Vec<View>,
}

impl ViewSet {
    /// Anchor first, then targets.
    pub fn views(&self) -> impl Iterator<Item = &View> {
        std::iter::once(&self.anchor).chain(self.targets.iter())
    }

    pub fn view(&self, i: usize) -> &View {
        if i == 0 {
            &self.anchor
        } else {
            &self.targets[i - 1]
        }
    }

    pub fn len(&self) -> usize {
        1 + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn base_size(&self) -> (usize, usize) {
        self.base_mask.size()
    }
}

/// Augments every image of a rendered set with its own seed drawn from `rng`.
pub fn assemble_view_set<R: RngCore + ?Sized>(
    set: &CounterfactualSet,
    geom: &GeomAugmentConfig,
    photo: &PhotoAugmentConfig,
    rng: &mut R,
) -> Result<ViewSet> {
    let mut views = ViewTag::ALL
        .iter()
        .map(|&tag| {
            let v = augment_view(set.image(tag), &set.mask, geom, photo, rng.next_u64())?;
            Ok(View { tag, image: v.image, mask: v.mask, record: v.record })
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = views.split_off(1);
    Ok(ViewSet {
        base_mask: set.mask.clone(),
        anchor: views.pop().expect("anchor view"),
        targets,
    })
}

pub fn build_view_set<R: RngCore + ?Sized>(
    spec: &PhantomSpec,
    geom: &GeomAugmentConfig,
    photo: &PhotoAugmentConfig,
    rng: &mut R,
) -> Result<ViewSet> {
    assemble_view_set(&CounterfactualSet::render(spec)?, geom, photo, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::apply_geometric_mask;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec::random((64, 64), false, 0.02, seed)
    }

    #[test]
    fn left_lung_area_matches_ellipse_oracle() {
        let s = spec(1);
        let (_, mask) = render_phantom(&s).unwrap();
        let e = s.lungs[0];
        let (a, b) = (e.axes[0], e.axes[1]);
        let th = e.angle_deg.to_radians();
        let mut area = 0;
        for r in 0..64 {
            for c in 0..64 {
                let (dx, dy) = (c as f64 - e.center[0], r as f64 - e.center[1]);
                let u = dx * th.cos() + dy * th.sin();
                let v = dy * th.cos() - dx * th.sin();
                if u * u / (a * a) + v * v / (b * b) <= 1.0 {
                    area += 1;
                }
            }
        }
        assert_eq!(mask.count(LEFT_LUNG), area);
        assert!(area > 0);
    }

    #[test]
    fn zero_fill_effusion_is_null() {
        let mut s = spec(2);
        s.pe_fill = 0.0;
        let (a, _) = render_phantom(&s).unwrap();
        s.pe = true;
        let (b, _) = render_phantom(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec(3);
        assert_eq!(render_phantom(&s).unwrap(), render_phantom(&s).unwrap());
    }

    #[test]
    fn overlapping_lungs_rejected() {
        let mut s = spec(4);
        s.lungs[1] = s.lungs[0];
        s.lungs[1].center[0] += 0.5;
        assert!(matches!(render_phantom(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn empty_intervention_rejected() {
        assert!(matches!(counterfactual(&spec(5), Intervention::default()), Err(Error::NoIntervention)));
    }

    #[test]
    fn scanner_counterfactual_keeps_mask_and_changes_body() {
        let s = spec(6);
        let (f, fm) = render_phantom(&s).unwrap();
        let (cf, cm) = counterfactual(&s, Intervention::flip_scanner(&s)).unwrap();
        assert_eq!(fm, cm);
        let body = s.body();
        for r in 0..64 {
            for c in 0..64 {
                if body.contains(c as f64, r as f64) {
                    assert!(f.get(r, c) != cf.get(r, c), "unchanged body pixel ({r}, {c})");
                }
            }
        }
    }

    #[test]
    fn effusion_difference_confined_to_lower_lungs() {
        let mut s = spec(7);
        s.pe_fill = 0.5;
        let (f, fm) = render_phantom(&s).unwrap();
        let (cf, cm) = counterfactual(&s, Intervention { scanner: None, pe: Some(true) }).unwrap();
        assert_eq!(fm, cm);
        let mut changed = 0;
        for r in 0..64 {
            for c in 0..64 {
                let (x, y) = (c as f64, r as f64);
                let lower = s.lungs.iter().any(|l| l.contains(x, y) && y > l.center[1]);
                let differs = f.get(r, c) != cf.get(r, c);
                assert_eq!(differs, lower, "pixel ({r}, {c})");
                changed += differs as usize;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn view_set_defaults_and_mask_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let s = PhantomSpec::random((32, 32), i % 2 == 0, 0.02, 1000 + i);
            let geom = GeomAugmentConfig { output_size: [32, 32], ..Default::default() };
            let vs = build_view_set(&s, &geom, &PhotoAugmentConfig::default(), &mut rng).unwrap();
            assert_eq!(vs.targets.len(), 3);
            for v in vs.views() {
                let expect = apply_geometric_mask(&vs.base_mask, v.map(), v.size()).unwrap();
                assert_eq!(v.mask, expect);
            }
        }
    }

    #[test]
    fn disabled_augmentation_anchor_is_factual() {
        let s = spec(8);
        let vs = build_view_set(
            &s,
            &GeomAugmentConfig::disabled((64, 64)),
            &PhotoAugmentConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(vs.anchor.image, render_phantom(&s).unwrap().0);
        assert_eq!(vs.anchor.tag, ViewTag::Factual);
    }
}
