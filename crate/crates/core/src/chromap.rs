//! Colour-coded overlays of per-pixel embeddings: 2-D projection, minimum
//! volume enclosing ellipse, ellipse-to-disc normalisation and polar HSV
//! colouring.

use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::net::{EmbeddingField, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projector {
    #[default]
    Pca,
    NeighborEmbed,
}

impl std::str::FromStr for Projector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Projector::Pca),
            "neighbor-embed" => Ok(Projector::NeighborEmbed),
            _ => Err(Error::InvalidConfig(format!("unknown projector `{s}` (pca, neighbor-embed)"))),
        }
    }
}

/// `N × 2` projected points.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Array2<f64>,
    /// Set when the data spans fewer than two directions; the missing axis is zero.
    pub degenerate: bool,
}

const RANK_TOL: f64 = 1e-12;

/// Top-two principal directions, each signed so its largest-magnitude
/// loading is positive. Returns `(mean, components 2 × D, eigenvalues)`.
fn principal_axes(x: ArrayView2<f64>) -> (Vec<f64>, [Vec<f64>; 2], [f64; 2]) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() + 1e-12 { c } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    let lambda = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
    (mean.to_vec(), [axis(0), axis(1)], lambda)
}

fn pca(x: ArrayView2<f64>) -> Projection {
    let (mean, axes, lambda) = principal_axes(x);
    let degenerate = lambda[1] <= RANK_TOL * lambda[0].max(f64::MIN_POSITIVE);
    let mut points = Array2::zeros((x.nrows(), 2));
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        for (k, axis) in axes.iter().enumerate() {
            if k == 1 && degenerate {
                continue;
            }
            points[[i, k]] = row.iter().zip(&mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum();
        }
    }
    Projection { points, degenerate }
}

/// Seeded neighbour-graph layout: a k-nearest-neighbour graph with
/// attractive edges and sampled repulsion, started from the PCA layout.
fn neighbor_embed(x: ArrayView2<f64>, seed: u64) -> Projection {
    const NEIGHBORS: usize = 15;
    const EPOCHS: usize = 200;
    const NEGATIVES: usize = 5;
    const A: f64 = 1.577;
    const B: f64 = 0.895;
    let n = x.nrows();
    let init = pca(x);
    if init.degenerate {
        return init;
    }
    let mut y = init.points;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    y.mapv_inplace(|v| 10.0 * v / scale);

    let k = NEIGHBORS.min(n - 1);
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        d.select_nth_unstable_by(k - 1, order);
        d[..k].sort_by(order);
        edges.extend(d[..k].iter().map(|&(_, j)| (i, j)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    for epoch in 0..EPOCHS {
        let lr = 1.0 - epoch as f64 / EPOCHS as f64;
        for &(i, j) in &edges {
            let (dx, dy) = (y[[i, 0]] - y[[j, 0]], y[[i, 1]] - y[[j, 1]]);
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let coef = -2.0 * A * B * d2.powf(B - 1.0) / (1.0 + A * d2.powf(B));
                for (c, delta) in [(0, dx), (1, dy)] {
                    let g = clip(coef * delta) * lr;
                    y[[i, c]] += g;
                    y[[j, c]] -= g;
                }
            }
            for _ in 0..NEGATIVES {
                let m = rng.random_range(0..n);
                if m == i {
                    continue;
                }
                let (dx, dy) = (y[[i, 0]] - y[[m, 0]], y[[i, 1]] - y[[m, 1]]);
                let d2 = dx * dx + dy * dy;
                let coef = 2.0 * B / ((0.001 + d2) * (1.0 + A * d2.powf(B)));
                y[[i, 0]] += clip(coef * dx) * lr;
                y[[i, 1]] += clip(coef * dy) * lr;
            }
        }
    }
    Projection { points: y, degenerate: false }
}

/// Projects `N × D` embeddings to the plane.
pub fn project_2d(x: ArrayView2<f64>, method: Projector, seed: u64) -> Result<Projection> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(Error::TooFewPoints { n, k: 3 });
    }
    if d < 2 {
        return Err(Error::ShapeMismatch(format!("projection needs D >= 2, got {d}")));
    }
    Ok(match method {
        Projector::Pca => pca(x),
        Projector::NeighborEmbed => neighbor_embed(x, seed),
    })
}

/// `{p : (p − c)ᵀ E (p − c) ≤ 1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse2D {
    pub center: Vector2<f64>,
    pub shape: Matrix2<f64>,
}

impl Ellipse2D {
    pub fn residual(&self, p: Vector2<f64>) -> f64 {
        let d = p - self.center;
        (d.transpose() * self.shape * d)[(0, 0)]
    }

    /// Area is `π / √det E`.
    pub fn area(&self) -> f64 {
        std::f64::consts::PI / self.shape.determinant().sqrt()
    }

    /// Symmetric positive-definite square root of the shape matrix.
    pub fn sqrt_shape(&self) -> Matrix2<f64> {
        let eig = SymmetricEigen::new(self.shape);
        let root = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        eig.eigenvectors * root * eig.eigenvectors.transpose()
    }
}

pub const MVEE_TOL: f64 = 1e-6;
pub const MVEE_MAX_ITER: usize = 1000;

fn rows_to_points(points: ArrayView2<f64>) -> Vec<Vector2<f64>> {
    points.axis_iter(Axis(0)).map(|r| Vector2::new(r[0], r[1])).collect()
}

/// Khachiyan's algorithm. The result is rescaled so the farthest point lies
/// exactly on the boundary, which makes containment hold to rounding.
pub fn mvee(points: ArrayView2<f64>, tol: f64, max_iter: usize) -> Result<Ellipse2D> {
    if points.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!("mvee expects N x 2 points, got {:?}", points.dim())));
    }
    let pts = rows_to_points(points);
    let n = pts.len();
    if n < 3 {
        return Err(Error::CollinearPoints);
    }
    let mean = pts.iter().sum::<Vector2<f64>>() / n as f64;
    let cov = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix2<f64>>() / n as f64;
    let scale = cov.trace();
    if scale <= 0.0 || cov.determinant() <= 1e-12 * scale * scale {
        return Err(Error::CollinearPoints);
    }

    let q: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p.x, p.y, 1.0)).collect();
    let d = 2.0;
    let mut u = vec![1.0 / n as f64; n];
    for _ in 0..max_iter {
        let x: Matrix3<f64> = q.iter().zip(&u).map(|(qi, &ui)| ui * qi * qi.transpose()).sum();
        let Some(xinv) = x.try_inverse() else { break };
        let (j, mj) = q
            .iter()
            .map(|qi| (qi.transpose() * xinv * qi)[(0, 0)])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, m)| if m > best.1 { (i, m) } else { best });
        let step = (mj - d - 1.0) / ((d + 1.0) * (mj - 1.0));
        let mut change = 0.0;
        for (i, ui) in u.iter_mut().enumerate() {
            let next = (1.0 - step) * *ui + if i == j { step } else { 0.0 };
            change += (next - *ui) * (next - *ui);
            *ui = next;
        }
        if change.sqrt() < tol {
            break;
        }
    }
    let center: Vector2<f64> = pts.iter().zip(&u).map(|(p, &ui)| ui * p).sum();
    let spread = pts.iter().zip(&u).map(|(p, &ui)| ui * p * p.transpose()).sum::<Matrix2<f64>>()
        - center * center.transpose();
    let shape = spread.try_inverse().ok_or(Error::CollinearPoints)? / d;
    let mut ellipse = Ellipse2D { center, shape };
    let worst = pts.iter().map(|&p| ellipse.residual(p)).fold(0.0, f64::max);
    ellipse.shape /= worst;
    Ok(ellipse)
}

/// `p ↦ E^{1/2} (p − c)`.
pub fn normalize_to_circle(points: ArrayView2<f64>, ellipse: &Ellipse2D) -> Array2<f64> {
    let root = ellipse.sqrt_shape();
    let mut out = Array2::zeros((points.nrows(), 2));
    for (i, p) in rows_to_points(points).into_iter().enumerate() {
        let y = root * (p - ellipse.center);
        out[[i, 0]] = y.x;
        out[[i, 1]] = y.y;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChroColor {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

impl ChroColor {
    pub fn to_rgb(self) -> [f64; 3] {
        hsv_to_rgb(self.hue, self.saturation, self.value)
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue from the polar angle, value from the radius clamped to 1.
pub fn colorize(normalized: ArrayView2<f64>) -> Vec<ChroColor> {
    normalized
        .axis_iter(Axis(0))
        .map(|p| {
            let (x, y) = (p[0], p[1]);
            let mut hue = y.atan2(x).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
            if hue >= 1.0 {
                hue = 0.0;
            }
            ChroColor { hue, saturation: 1.0, value: x.hypot(y).min(1.0) }
        })
        .collect()
}

/// Row-major RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
    }
}

pub const DEFAULT_ALPHA: f64 = 0.6;

/// `(1 − α)·gray + α·colour` per pixel; `colors` is row-major.
pub fn render_overlay(img: &ImageTensor, colors: &[ChroColor], alpha: f64) -> Result<RgbImage> {
    let (h, w) = img.size();
    if colors.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} colours for a {h}x{w} image", colors.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let data = img
        .data()
        .iter()
        .zip(colors)
        .map(|(&g, c)| c.to_rgb().map(|ch| (1.0 - alpha) * g as f64 + alpha * ch))
        .collect();
    Ok(RgbImage { height: h, width: w, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChromapConfig {
    pub projector: Projector,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Fit one projection and ellipse over all rendered images jointly.
    pub global_fit: bool,
}

impl Default for ChromapConfig {
    fn default() -> Self {
        Self {
            projector: Projector::Pca,
            alpha: DEFAULT_ALPHA,
            tol: MVEE_TOL,
            max_iter: MVEE_MAX_ITER,
            seed: 0,
            global_fit: false,
        }
    }
}

/// Intermediate and final products for one point set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChroMap {
    pub projection: Projection,
    pub ellipse: Ellipse2D,
    pub normalized: Array2<f64>,
    pub colors: Vec<ChroColor>,
}

/// Projection, ellipse fit, normalisation and colouring of `N × D` embeddings.
pub fn chromap(x: ArrayView2<f64>, cfg: &ChromapConfig) -> Result<ChroMap> {
    let projection = project_2d(x, cfg.projector, cfg.seed)?;
    let ellipse = mvee(projection.points.view(), cfg.tol, cfg.max_iter)?;
    let normalized = normalize_to_circle(projection.points.view(), &ellipse);
    let colors = colorize(normalized.view());
    Ok(ChroMap { projection, ellipse, normalized, colors })
}

/// One map per field; with `global_fit` the projection and ellipse are
/// fitted on all pixels of all fields together.
pub fn chromap_fields<T: Real>(fields: &[EmbeddingField<T>], cfg: &ChromapConfig) -> Result<Vec<ChroMap>> {
    let rows = |f: &EmbeddingField<T>| f.to_rows().mapv(|v| v.as_f64());
    if !cfg.global_fit {
        return fields.iter().map(|f| chromap(rows(f).view(), cfg)).collect();
    }
    let all: Vec<Array2<f64>> = fields.iter().map(rows).collect();
    let views: Vec<ArrayView2<f64>> = all.iter().map(|a| a.view()).collect();
    let joint = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let fit = chromap(joint.view(), cfg)?;
    let mut start = 0;
    Ok(all
        .iter()
        .map(|a| {
            let range = start..start + a.nrows();
            start = range.end;
            ChroMap {
                projection: Projection {
                    points: fit.projection.points.slice(ndarray::s![range.clone(), ..]).to_owned(),
                    degenerate: fit.projection.degenerate,
                },
                ellipse: fit.ellipse,
                normalized: fit.normalized.slice(ndarray::s![range.clone(), ..]).to_owned(),
                colors: fit.colors[range].to_vec(),
            }
        })
        .collect())
}
