use cfdense::chromap::{chromap, ChromapConfig};
use cfdense::{ArchConfig, ModelParams, PhantomSpec};
use cfdense::phantom::render_phantom;
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Verdict;

/// Haar-ish orthogonal matrix from the QR factor of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut *rng));
    let q = g.qr().q();
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

fn circular(a: f64) -> f64 {
    let r = a.rem_euclid(1.0);
    r.min(1.0 - r)
}

/// Largest deviation of `h2 - s·h1` from its first value, on the unit circle.
fn offset_spread(h1: &[f64], h2: &[f64], sign: f64) -> f64 {
    let base = h2[0] - sign * h1[0];
    h1.iter().zip(h2).map(|(&a, &b)| circular(b - sign * a - base)).fold(0.0, f64::max)
}

pub fn rotation_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5107);
    let cfg = ChromapConfig::default();
    let mut worst_hue = 0.0f64;
    let mut worst_value = 0.0f64;
    let mut cases = 0;
    for seed in 0..10u64 {
        let arch = ArchConfig::default();
        let params = ModelParams::<f64>::init(arch, seed);
        let (img, _) = render_phantom(&PhantomSpec::random((32, 32), seed % 2 == 0, 0.02, seed)).expect("phantom");
        let x = params.forward(&img).expect("forward").to_rows();
        for _ in 0..3 {
            let q = random_orthogonal(arch.dim, &mut rng);
            let xr = x.dot(&q);
            let (a, b) = (chromap(x.view(), &cfg).expect("chromap"), chromap(xr.view(), &cfg).expect("chromap"));
            let h1: Vec<f64> = a.colors.iter().map(|c| c.hue).collect();
            let h2: Vec<f64> = b.colors.iter().map(|c| c.hue).collect();
            let spread = offset_spread(&h1, &h2, 1.0).min(offset_spread(&h1, &h2, -1.0));
            let drift = a.colors.iter().zip(&b.colors).map(|(c, d)| (c.value - d.value).abs()).fold(0.0, f64::max);
            worst_hue = worst_hue.max(spread);
            worst_value = worst_value.max(drift);
            cases += 1;
        }
    }
    Verdict::new(
        worst_hue < 1e-4 && worst_value < 1e-4,
        format!(
            "{cases} rotated embedding fields (32x32, D=16, PCA): hue offset spread {worst_hue:.2e} turns, \
             value drift {worst_value:.2e} (tol 1e-4)"
        ),
    )
}
