//! Small U-Net style encoder–decoder producing unit-norm per-pixel embeddings.
//!
//! Layout (channels `c1`, `c2`, `mid`, embedding `dim`):
//!
//! ```text
//! enc1  3×3  1 → c1        @ H      relu ─────────────┐ skip
//! pool  2×2 avg                                       │
//! enc2  3×3  c1 → c2       @ H/2    relu ───────┐ skip│
//! pool  2×2 avg                                 │     │
//! mid   3×3  c2 → mid      @ H/4    relu        │     │
//! up ×2, concat ────────────────────────────────┘     │
//! dec2  3×3  mid+c2 → c2   @ H/2    relu              │
//! up ×2, concat ──────────────────────────────────────┘
//! dec1  3×3  c2+c1 → c1    @ H      relu
//! head  1×1  c1 → dim, then per-pixel L2 normalisation
//! ```
//!
//! Everything is generic over [`Real`] so gradient checks can run in f64
//! while training runs in f32.

mod checkpoint;
mod layers;
mod sgd;

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use sgd::{sgd_step, Sgd};

/// Epsilon added to the pixel norm before division.
pub const NORM_EPS: f64 = 1e-8;

const HEAD_BIAS_STD: f64 = 0.1;

pub trait Real:
    num_traits::Float + LinalgScalar + ScalarOperand + Debug + Default + Send + Sync + Sum + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// In-place `exp` over a slice.
    fn exp_slice(xs: &mut [Self]);
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn exp_slice(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = expf(*x));
    }
}

/// Branch-free `exp` for f32 (Cephes polynomial, about 2 ulp) that the
/// compiler can vectorise. Inputs below -87 flush towards zero.
#[inline]
fn expf(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = ((((1.987_569_2e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn exp_slice(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub c1: usize,
    pub c2: usize,
    pub mid: usize,
    pub dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { c1: 16, c2: 32, mid: 32, dim: 16 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.mid, self.dim].contains(&0) {
            return Err(Error::InvalidConfig(format!("architecture has a zero-width layer: {self:?}")));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in canonical order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let ArchConfig { c1, c2, mid, dim } = *self;
        vec![
            ("enc1.weight", vec![c1, 1, 3, 3]),
            ("enc1.bias", vec![c1]),
            ("enc2.weight", vec![c2, c1, 3, 3]),
            ("enc2.bias", vec![c2]),
            ("mid.weight", vec![mid, c2, 3, 3]),
            ("mid.bias", vec![mid]),
            ("dec2.weight", vec![c2, mid + c2, 3, 3]),
            ("dec2.bias", vec![c2]),
            ("dec1.weight", vec![c1, c2 + c1, 3, 3]),
            ("dec1.bias", vec![c1]),
            ("head.weight", vec![dim, c1, 1, 1]),
            ("head.bias", vec![dim]),
        ]
    }
}

// Indices into `ModelParams::tensors`, matching `ArchConfig::layout`.
const ENC1: usize = 0;
const ENC2: usize = 2;
const MID: usize = 4;
const DEC2: usize = 6;
const DEC1: usize = 8;
const HEAD: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.to_string(), shape, data: vec![T::zero(); n] }
    }

    /// Rows = first dimension, columns = product of the rest.
    fn as_matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.data.len() / rows), &self.data).expect("tensor shape")
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Ordered named tensors; gradients and optimizer state share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: ArchConfig) -> Self {
        let tensors = arch.layout().into_iter().map(|(n, s)| Tensor::zeros(n, s)).collect();
        Self { arch, tensors }
    }

    /// Kaiming-normal weights (std = √(2 / fan_in)) and zero biases, except
    /// the head bias, which is drawn small and non-zero so a pixel whose
    /// decoder features are all clipped still has a non-zero pre-norm vector.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        for t in p.tensors.iter_mut() {
            let std = match t.shape.len() {
                4 => (2.0 / (t.shape[1] * t.shape[2] * t.shape[3]) as f64).sqrt(),
                _ if t.name == "head.bias" => HEAD_BIAS_STD,
                _ => continue,
            };
            let normal = Normal::<f64>::new(0.0, std).expect("finite std");
            for v in &mut t.data {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { arch: self.arch, tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x = *x + y);
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = *x * k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Flat `(tensor, element)` addressing for probing individual parameters.
    pub fn get(&self, tensor: usize, index: usize) -> T {
        self.tensors[tensor].data[index]
    }

    pub fn set(&mut self, tensor: usize, index: usize, v: T) {
        self.tensors[tensor].data[index] = v;
    }

    pub fn forward(&self, img: &ImageTensor) -> Result<EmbeddingField<T>> {
        Ok(self.forward_cached(img)?.0)
    }

    pub fn forward_cached(&self, img: &ImageTensor) -> Result<(EmbeddingField<T>, ForwardCache<T>)> {
        let (h, w) = img.size();
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::ShapeMismatch(format!("image {h}x{w}: sides must be positive multiples of 4")));
        }
        let x = Array2::from_shape_vec((1, h * w), img.data().iter().map(|&v| T::of(v as f64)).collect())
            .expect("image buffer");
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let t = &self.tensors;

        let cols1 = layers::im2col(x.view(), h, w);
        let pre1 = conv(&t[ENC1], &t[ENC1 + 1], &cols1);
        let a1 = layers::relu(&pre1);
        let p1 = layers::avg_pool(a1.view(), h, w);

        let cols2 = layers::im2col(p1.view(), h2, w2);
        let pre2 = conv(&t[ENC2], &t[ENC2 + 1], &cols2);
        let a2 = layers::relu(&pre2);
        let p2 = layers::avg_pool(a2.view(), h2, w2);

        let cols3 = layers::im2col(p2.view(), h4, w4);
        let pre3 = conv(&t[MID], &t[MID + 1], &cols3);
        let a3 = layers::relu(&pre3);

        let u2 = layers::concat_rows(layers::upsample(a3.view(), h4, w4, h2, w2).view(), a2.view());
        let cols4 = layers::im2col(u2.view(), h2, w2);
        let pre4 = conv(&t[DEC2], &t[DEC2 + 1], &cols4);
        let a4 = layers::relu(&pre4);

        let u1 = layers::concat_rows(layers::upsample(a4.view(), h2, w2, h, w).view(), a1.view());
        let cols5 = layers::im2col(u1.view(), h, w);
        let pre5 = conv(&t[DEC1], &t[DEC1 + 1], &cols5);
        let a5 = layers::relu(&pre5);

        let head = conv(&t[HEAD], &t[HEAD + 1], &a5);
        let (z, norms) = layers::l2_normalize(&head, T::of(NORM_EPS));
        let field = EmbeddingField { height: h, width: w, data: z };
        let cache = ForwardCache {
            h,
            w,
            cols1,
            pre1,
            cols2,
            pre2,
            cols3,
            pre3,
            cols4,
            pre4,
            cols5,
            pre5,
            a5,
            head,
            norms,
        };
        Ok((field, cache))
    }

    /// Parameter gradients given `d loss / d z` as a `(dim, H·W)` array.
    pub fn backward(&self, cache: &ForwardCache<T>, dz: &Array2<T>) -> ModelParams<T> {
        let ForwardCache { h, w, .. } = *cache;
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let ArchConfig { c1, c2, mid, .. } = self.arch;
        let t = &self.tensors;
        let mut g = self.zeros_like();

        let dhead = layers::l2_normalize_backward(&cache.head, &cache.norms, dz, T::of(NORM_EPS));
        let mut da5 = conv_backward(&t[HEAD], &dhead, &cache.a5, &mut g, HEAD);

        layers::relu_backward(&cache.pre5, &mut da5);
        let dcols5 = conv_backward(&t[DEC1], &da5, &cache.cols5, &mut g, DEC1);
        let du1 = layers::col2im(dcols5.view(), c2 + c1, h, w);
        let (dup1, mut da1) = layers::split_rows(&du1, c2);
        let mut da4 = layers::upsample_backward(dup1.view(), h2, w2, h, w);

        layers::relu_backward(&cache.pre4, &mut da4);
        let dcols4 = conv_backward(&t[DEC2], &da4, &cache.cols4, &mut g, DEC2);
        let du2 = layers::col2im(dcols4.view(), mid + c2, h2, w2);
        let (dup2, da2_skip) = layers::split_rows(&du2, mid);
        let mut da3 = layers::upsample_backward(dup2.view(), h4, w4, h2, w2);

        layers::relu_backward(&cache.pre3, &mut da3);
        let dcols3 = conv_backward(&t[MID], &da3, &cache.cols3, &mut g, MID);
        let dp2 = layers::col2im(dcols3.view(), c2, h4, w4);
        let mut da2 = layers::avg_pool_backward(dp2.view(), h2, w2) + da2_skip;

        layers::relu_backward(&cache.pre2, &mut da2);
        let dcols2 = conv_backward(&t[ENC2], &da2, &cache.cols2, &mut g, ENC2);
        let dp1 = layers::col2im(dcols2.view(), c1, h2, w2);
        da1 = da1 + layers::avg_pool_backward(dp1.view(), h, w);

        layers::relu_backward(&cache.pre1, &mut da1);
        conv_backward(&t[ENC1], &da1, &cache.cols1, &mut g, ENC1);
        g
    }

    /// Recomputes the forward pass, then backpropagates `dz`.
    pub fn backward_from(&self, img: &ImageTensor, dz: &EmbeddingField<T>) -> Result<ModelParams<T>> {
        let (_, cache) = self.forward_cached(img)?;
        if dz.data.dim() != (self.arch.dim, cache.h * cache.w) {
            return Err(Error::ShapeMismatch("upstream gradient does not match the embedding field".into()));
        }
        Ok(self.backward(&cache, &dz.data))
    }
}

fn conv<T: Real>(weight: &Tensor<T>, bias: &Tensor<T>, cols: &Array2<T>) -> Array2<T> {
    let mut out = weight.as_matrix().dot(cols);
    layers::add_bias(&mut out, &bias.data);
    out
}

/// Accumulates weight/bias gradients at `slot` and returns the input gradient.
fn conv_backward<T: Real>(
    weight: &Tensor<T>,
    dout: &Array2<T>,
    input: &Array2<T>,
    grads: &mut ModelParams<T>,
    slot: usize,
) -> Array2<T> {
    let dw = dout.dot(&input.t());
    grads.tensors[slot].data = dw.iter().copied().collect();
    grads.tensors[slot + 1].data = dout.sum_axis(Axis(1)).to_vec();
    weight.as_matrix().t().dot(dout)
}

/// Intermediates kept for the backward pass.
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    cols1: Array2<T>,
    pre1: Array2<T>,
    cols2: Array2<T>,
    pre2: Array2<T>,
    cols3: Array2<T>,
    pre3: Array2<T>,
    cols4: Array2<T>,
    pre4: Array2<T>,
    cols5: Array2<T>,
    pre5: Array2<T>,
    a5: Array2<T>,
    head: Array2<T>,
    norms: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLU units are active, across all layers. Two parameter
    /// settings with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [&self.pre1, &self.pre2, &self.pre3, &self.pre4, &self.pre5]
            .iter()
            .flat_map(|p| p.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// H×W×D per-pixel embeddings stored as `(D, H·W)`; column `r·W + c` is pixel `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingField<T> {
    pub height: usize,
    pub width: usize,
    pub data: Array2<T>,
}

impl<T: Real> EmbeddingField<T> {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self { height, width, data: Array2::zeros((dim, height * width)) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, row: usize, col: usize) -> Vec<T> {
        self.data.column(row * self.width + col).to_vec()
    }

    /// `(K, D)` matrix of the embeddings at `(row, col)` indices.
    pub fn gather(&self, idx: &[(usize, usize)]) -> Array2<T> {
        let mut out = Array2::zeros((idx.len(), self.dim()));
        for (mut row, &(r, c)) in out.axis_iter_mut(Axis(0)).zip(idx) {
            row.assign(&self.data.column(r * self.width + c));
        }
        out
    }

    /// Adds the rows of `g` (K×D) into the pixels at `idx`.
    pub fn scatter_add(&mut self, idx: &[(usize, usize)], g: ArrayView2<T>) {
        for (row, &(r, c)) in g.axis_iter(Axis(0)).zip(idx) {
            let mut col = self.data.column_mut(r * self.width + c);
            col.zip_mut_with(&row, |a, &b| *a = *a + b);
        }
    }

    /// All pixels as an `(H·W, D)` matrix.
    pub fn to_rows(&self) -> Array2<T> {
        self.data.t().to_owned()
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.data
            .axis_iter(Axis(1))
            .map(|c| (c.dot(&c).sqrt().as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
