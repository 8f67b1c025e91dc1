//! Geometric and photometric augmentation.
//!
//! Geometric draws are recorded as an [`AffineMap`] from the input frame to
//! the output frame so that pixel correspondence survives augmentation.
//! Photometric effects never touch geometry.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMask, BACKGROUND};

/// Slack on the bilinear bounds test so that exact rotations which land a
/// hair outside the grid still sample the edge pixel.
const SAMPLE_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeomAugmentConfig {
    /// Rotation angle is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Crop area as a fraction of the input, drawn uniformly from this range.
    pub crop_scale: [f64; 2],
    /// Place the crop at the centre instead of a uniform random position.
    pub center_crop: bool,
    /// `[height, width]` of the produced view.
    pub output_size: [usize; 2],
}

impl Default for GeomAugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            crop_scale: [0.6, 1.0],
            center_crop: false,
            output_size: [128, 128],
        }
    }
}

impl GeomAugmentConfig {
    /// No rotation, full-frame crop, output equal to `size`.
    pub fn disabled(size: (usize, usize)) -> Self {
        Self {
            rotation_deg: 0.0,
            crop_scale: [1.0, 1.0],
            center_crop: true,
            output_size: [size.0, size.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return bad(format!("rotation_deg {} outside [0, 180]", self.rotation_deg));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
        }
        if self.output_size[0] < 8 || self.output_size[1] < 8 {
            return bad(format!("output_size {:?} below 8x8", self.output_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotoAugmentConfig {
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f32,
    pub blur_sigma: [f32; 2],
    pub solarize_threshold: [f32; 2],
    pub p_jitter: f32,
    pub p_blur: f32,
    pub p_solarize: f32,
}

impl Default for PhotoAugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.2,
            blur_sigma: [0.1, 1.0],
            solarize_threshold: [0.7, 0.95],
            p_jitter: 0.8,
            p_blur: 0.3,
            p_solarize: 0.1,
        }
    }
}

impl PhotoAugmentConfig {
    pub fn disabled() -> Self {
        Self { p_jitter: 0.0, p_blur: 0.0, p_solarize: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, p) in [("p_jitter", self.p_jitter), ("p_blur", self.p_blur), ("p_solarize", self.p_solarize)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.p_jitter > 0.0 && !(self.brightness >= 0.0 && (0.0..1.0).contains(&self.contrast)) {
            return bad("jitter needs brightness >= 0 and contrast in [0, 1)".into());
        }
        let [s0, s1] = self.blur_sigma;
        if self.p_blur > 0.0 && !(s0 >= 0.0 && s0 <= s1) {
            return bad(format!("blur_sigma [{s0}, {s1}] is not a range"));
        }
        let [t0, t1] = self.solarize_threshold;
        if self.p_solarize > 0.0 && !(0.0 <= t0 && t0 <= t1 && t1 <= 1.0) {
            return bad(format!("solarize_threshold [{t0}, {t1}] is not a range in [0, 1]"));
        }
        Ok(())
    }
}

/// Drawn geometric parameters, sufficient to rebuild the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomDraw {
    pub angle_deg: f64,
    /// Crop left/top edge in pixel-area coordinates of the rotated frame.
    pub crop_edge: [f64; 2],
    /// Crop width/height in pixels.
    pub crop_size: [f64; 2],
    pub input_size: [usize; 2],
    pub output_size: [usize; 2],
}

impl GeomDraw {
    /// rotate (about the input centre) → crop → resize.
    pub fn to_map(&self) -> AffineMap {
        let [h, w] = self.input_size;
        let [oh, ow] = self.output_size;
        let rot = AffineMap::rotate_about_center(self.angle_deg.to_radians(), h, w);
        let sx = ow as f64 / self.crop_size[0];
        let sy = oh as f64 / self.crop_size[1];
        // u = (x + 0.5 - edge) * s - 0.5 maps pixel-area extents onto the output grid.
        let crop_resize = AffineMap::new(
            sx,
            0.0,
            (0.5 - self.crop_edge[0]) * sx - 0.5,
            0.0,
            sy,
            (0.5 - self.crop_edge[1]) * sy - 0.5,
        );
        rot.then(&crop_resize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PhotoOp {
    Jitter { brightness: f32, contrast: f32 },
    Blur { sigma: f32 },
    Solarize { threshold: f32 },
}

/// Everything needed to replay one view's augmentation bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub seed: u64,
    pub geometric: GeomDraw,
    pub map: AffineMap,
    pub photometric: Vec<PhotoOp>,
}

pub fn draw_geometric<R: Rng + ?Sized>(
    cfg: &GeomAugmentConfig,
    rng: &mut R,
    input_size: (usize, usize),
) -> Result<(AffineMap, GeomDraw)> {
    cfg.validate()?;
    let (h, w) = input_size;
    let angle_deg = if cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
    } else {
        0.0
    };
    let [lo, hi] = cfg.crop_scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let (cw, ch) = (side * w as f64, side * h as f64);
    if cw < 1.0 || ch < 1.0 {
        return Err(Error::DegenerateCrop { side: cw.min(ch) });
    }
    let (ex, ey) = if cfg.center_crop {
        ((w as f64 - cw) / 2.0, (h as f64 - ch) / 2.0)
    } else {
        (
            rng.random_range(0.0..=(w as f64 - cw)),
            rng.random_range(0.0..=(h as f64 - ch)),
        )
    };
    let draw = GeomDraw {
        angle_deg,
        crop_edge: [ex, ey],
        crop_size: [cw, ch],
        input_size: [h, w],
        output_size: cfg.output_size,
    };
    Ok((draw.to_map(), draw))
}

/// Bilinear sample at continuous `(x, y)`; `None` outside the grid.
fn bilinear(img: &ImageTensor, x: f64, y: f64) -> Option<f32> {
    let (h, w) = img.size();
    let (xmax, ymax) = (w as f64 - 1.0, h as f64 - 1.0);
    if x < -SAMPLE_SLACK || y < -SAMPLE_SLACK || x > xmax + SAMPLE_SLACK || y > ymax + SAMPLE_SLACK {
        return None;
    }
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = img.get(y0, x0) as f64;
    if fx == 0.0 && fy == 0.0 {
        return Some(img.get(y0, x0));
    }
    let v01 = img.get(y0, x1) as f64;
    let v10 = img.get(y1, x0) as f64;
    let v11 = img.get(y1, x1) as f64;
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    Some((top * (1.0 - fy) + bot * fy) as f32)
}

/// Resamples `img` so that output pixel `q` reads the input at `map⁻¹(q)`.
pub fn apply_geometric(img: &ImageTensor, map: &AffineMap, out_size: (usize, usize)) -> Result<ImageTensor> {
    let inv = map.invert()?;
    let (oh, ow) = out_size;
    let mut out = ImageTensor::zeros(oh, ow);
    for r in 0..oh {
        for c in 0..ow {
            let (x, y) = inv.map_point((c as f64, r as f64));
            if let Some(v) = bilinear(img, x, y) {
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour transport of a label mask; outside pixels become background.
pub fn apply_geometric_mask(mask: &LabelMask, map: &AffineMap, out_size: (usize, usize)) -> Result<LabelMask> {
    let inv = map.invert()?;
    let (h, w) = mask.size();
    let (oh, ow) = out_size;
    let mut out = LabelMask::background(oh, ow);
    for r in 0..oh {
        for c in 0..ow {
            let (x, y) = inv.map_point((c as f64, r as f64));
            let (xr, yr) = (x.round(), y.round());
            let label = if xr >= 0.0 && yr >= 0.0 && xr < w as f64 && yr < h as f64 {
                mask.get(yr as usize, xr as usize)
            } else {
                BACKGROUND
            };
            out.set(r, c, label);
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let sigma = sigma as f64;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur, kernel truncated at 3σ, edges replicated.
pub fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.size();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get(y, clampi(x as isize + i as isize - r, w)) as f64)
                .sum();
        }
    }
    let mut out = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
            out.set(y, x, v as f32);
        }
    }
    out.clamp_unit();
    out
}

fn apply_op(img: &ImageTensor, op: &PhotoOp) -> ImageTensor {
    match *op {
        PhotoOp::Jitter { brightness, contrast } => {
            let n = img.data().len().max(1) as f64;
            let mean = (img.data().iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = ((*v - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
            }
            out
        }
        PhotoOp::Blur { sigma } => gaussian_blur(img, sigma),
        PhotoOp::Solarize { threshold } => {
            let mut out = img.clone();
            for v in out.data_mut() {
                if *v >= threshold {
                    *v = 1.0 - *v;
                }
            }
            out
        }
    }
}

/// Replays recorded photometric ops in order.
pub fn replay_photometric(img: &ImageTensor, ops: &[PhotoOp]) -> ImageTensor {
    let mut out = img.clone();
    for op in ops {
        out = apply_op(&out, op);
    }
    out.clamp_unit();
    out
}

/// Draws and applies jitter → blur → solarize, each with its own probability.
pub fn apply_photometric<R: Rng + ?Sized>(
    img: &ImageTensor,
    cfg: &PhotoAugmentConfig,
    rng: &mut R,
) -> (ImageTensor, Vec<PhotoOp>) {
    let mut ops = Vec::new();
    if rng.random::<f32>() < cfg.p_jitter {
        let brightness = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        let contrast = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
        } else {
            1.0
        };
        ops.push(PhotoOp::Jitter { brightness, contrast });
    }
    if rng.random::<f32>() < cfg.p_blur {
        let [a, b] = cfg.blur_sigma;
        let sigma = if b > a { rng.random_range(a..=b) } else { a };
        ops.push(PhotoOp::Blur { sigma });
    }
    if rng.random::<f32>() < cfg.p_solarize {
        let [a, b] = cfg.solarize_threshold;
        let threshold = if b > a { rng.random_range(a..=b) } else { a };
        ops.push(PhotoOp::Solarize { threshold });
    }
    (replay_photometric(img, &ops), ops)
}

/// One augmented view: image, transported mask, and the replay record.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub image: ImageTensor,
    pub mask: LabelMask,
    pub record: AugmentRecord,
}

/// Full per-view augmentation driven by its own seeded stream.
pub fn augment_view(
    img: &ImageTensor,
    mask: &LabelMask,
    geom: &GeomAugmentConfig,
    photo: &PhotoAugmentConfig,
    seed: u64,
) -> Result<AugmentedView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (map, draw) = draw_geometric(geom, &mut rng, img.size())?;
    let out_size = (geom.output_size[0], geom.output_size[1]);
    let warped = apply_geometric(img, &map, out_size)?;
    let (image, photometric) = apply_photometric(&warped, photo, &mut rng);
    let mask = apply_geometric_mask(mask, &map, out_size)?;
    Ok(AugmentedView {
        image,
        mask,
        record: AugmentRecord { seed, geometric: draw, map, photometric },
    })
}

/// Rebuilds a view from its record without touching any RNG.
pub fn replay_view(img: &ImageTensor, mask: &LabelMask, record: &AugmentRecord) -> Result<AugmentedView> {
    let [oh, ow] = record.geometric.output_size;
    let warped = apply_geometric(img, &record.map, (oh, ow))?;
    Ok(AugmentedView {
        image: replay_photometric(&warped, &record.photometric),
        mask: apply_geometric_mask(mask, &record.map, (oh, ow))?,
        record: record.clone(),
    })
}

/// Fresh seed for a per-view stream.
pub fn next_seed<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}
