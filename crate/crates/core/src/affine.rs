//! Homogeneous 2D affine maps and the validity regions they induce.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row; `(0, 0)` is
//! the centre of the top-left pixel. A map carries points of the canonical
//! (un-augmented) frame into a view frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Minimum |det| of the linear part for a map to count as invertible.
pub const SINGULAR_EPS: f64 = 1e-12;

/// 3×3 homogeneous affine matrix with the last row fixed to `(0, 0, 1)`.
///
/// Only the upper two rows are stored, so the last-row invariant holds by
/// construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    m: [[f64; 3]; 2],
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineMap {
    pub const fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    /// Builds `[[a, b, tx], [c, d, ty], [0, 0, 1]]`.
    pub const fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        Self { m: [[a, b, tx], [c, d, ty]] }
    }

    pub const fn translate(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    pub const fn scale(sx: f64, sy: f64) -> Self {
        Self::new(sx, 0.0, 0.0, 0.0, sy, 0.0)
    }

    /// Counter-clockwise rotation by `theta` radians about the origin, in the
    /// mathematical sense of the (x, y) plane.
    pub fn rotate(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c, -s, 0.0, s, c, 0.0)
    }

    /// Rotation by `theta` about `(cx, cy)`.
    pub fn rotate_about(theta: f64, cx: f64, cy: f64) -> Self {
        Self::translate(-cx, -cy)
            .then(&Self::rotate(theta))
            .then(&Self::translate(cx, cy))
    }

    /// Rotation about the centre of an `h × w` pixel grid.
    pub fn rotate_about_center(theta: f64, h: usize, w: usize) -> Self {
        Self::rotate_about(theta, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
    }

    /// Row-major 3×3 matrix including the fixed last row.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [self.m[0], self.m[1], [0.0, 0.0, 1.0]]
    }

    /// The nine entries in row-major order.
    pub fn to_row_major(&self) -> [f64; 9] {
        let [r0, r1] = self.m;
        [r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], 0.0, 0.0, 1.0]
    }

    /// Parses nine row-major entries; the last row must be exactly `(0, 0, 1)`.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidConfig(format!(
                "affine map needs 9 entries, got {}",
                v.len()
            )));
        }
        if v[6] != 0.0 || v[7] != 0.0 || v[8] != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "affine last row must be (0, 0, 1), got ({}, {}, {})",
                v[6], v[7], v[8]
            )));
        }
        Ok(Self::new(v[0], v[1], v[2], v[3], v[4], v[5]))
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > SINGULAR_EPS
    }

    /// Matrix product `b · a`: apply `a` first, then `b`.
    pub fn compose(a: &AffineMap, b: &AffineMap) -> AffineMap {
        let (p, q) = (&b.m, &a.m);
        let mut out = [[0.0; 3]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            row[0] = p[i][0] * q[0][0] + p[i][1] * q[1][0];
            row[1] = p[i][0] * q[0][1] + p[i][1] * q[1][1];
            row[2] = p[i][0] * q[0][2] + p[i][1] * q[1][2] + p[i][2];
        }
        AffineMap { m: out }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &AffineMap) -> AffineMap {
        Self::compose(self, next)
    }

    pub fn invert(&self) -> Result<AffineMap> {
        let det = self.det();
        if det.abs() <= SINGULAR_EPS {
            return Err(Error::SingularTransform { det });
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineMap::new(
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ))
    }

    /// Upper two entries of `m · (x, y, 1)ᵀ`, no rounding.
    #[inline]
    pub fn map_point(&self, p: (f64, f64)) -> (f64, f64) {
        let [r0, r1] = &self.m;
        (
            r0[0] * p.0 + r0[1] * p.1 + r0[2],
            r1[0] * p.0 + r1[1] * p.1 + r1[2],
        )
    }

    /// Largest absolute elementwise difference between two maps.
    pub fn max_abs_diff(&self, other: &AffineMap) -> f64 {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for AffineMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_row_major();
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            // `{:?}` on f64 prints the shortest string that round-trips.
            write!(f, "{x:?}")?;
        }
        Ok(())
    }
}

impl FromStr for AffineMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad affine entry `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_row_major(&vals)
    }
}

impl Serialize for AffineMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        AffineMap::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Anchor-frame pixels whose image under every active view's map lands
/// inside that view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidRegion {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl ValidRegion {
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, mask: vec![true; height * width] }
    }

    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), height * width, "mask length must equal H*W");
        Self { height, width, mask }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    /// Valid `(row, col)` pixels in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

/// Closed-interval bounds test `[0, w−1] × [0, h−1]` in continuous coordinates.
#[inline]
pub fn in_bounds(p: (f64, f64), size: (usize, usize)) -> bool {
    let (h, w) = size;
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= w as f64 - 1.0 && p.1 <= h as f64 - 1.0
}

/// Mask over the anchor grid that is true where every `maps[i]` sends the
/// pixel inside `sizes[i]`. An empty result is not an error.
pub fn valid_intersection(
    maps: &[AffineMap],
    sizes: &[(usize, usize)],
    anchor_size: (usize, usize),
) -> ValidRegion {
    assert!(!maps.is_empty(), "valid_intersection needs at least one map");
    assert_eq!(maps.len(), sizes.len(), "one size per map");
    let (h, w) = anchor_size;
    let mut mask = vec![true; h * w];
    for (row, chunk) in mask.chunks_mut(w.max(1)).enumerate() {
        for (col, cell) in chunk.iter_mut().enumerate() {
            let p = (col as f64, row as f64);
            *cell = maps
                .iter()
                .zip(sizes)
                .all(|(m, &s)| in_bounds(m.map_point(p), s));
        }
    }
    ValidRegion { height: h, width: w, mask }
}
