use std::f64::consts::TAU;
use std::time::Instant;

use cfdense::chromap::{mvee, Ellipse2D, MVEE_MAX_ITER, MVEE_TOL};
use cfdense::{valid_intersection, AffineMap};
use nalgebra::{Matrix2, Vector2};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

fn random_link(rng: &mut ChaCha8Rng) -> AffineMap {
    match rng.random_range(0..4) {
        0 => AffineMap::rotate_about(rng.random_range(-3.2..3.2), rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)),
        1 => AffineMap::scale(rng.random_range(0.6..1.6), rng.random_range(0.6..1.6)),
        2 => AffineMap::translate(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)),
        _ => AffineMap::new(1.0, rng.random_range(-0.4..0.4), 0.0, rng.random_range(-0.4..0.4), 1.0, 0.0),
    }
}

/// Applies each link in turn, never forming the composed matrix.
fn apply_chain(links: &[AffineMap], p: (f64, f64)) -> (f64, f64) {
    links.iter().fold(p, |q, m| {
        let a = m.to_row_major();
        (a[0] * q.0 + a[1] * q.1 + a[2], a[3] * q.0 + a[4] * q.1 + a[5])
    })
}

fn inside(p: (f64, f64), (h, w): (usize, usize)) -> bool {
    (0.0..=(w - 1) as f64).contains(&p.0) && (0.0..=(h - 1) as f64).contains(&p.1)
}

pub fn correspondence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut worst_round_trip = 0.0f64;
    let mut worst_compose = 0.0f64;
    let mut mask_mismatches = 0usize;
    let mut pixels = 0usize;
    for _ in 0..1000 {
        let n_views = rng.random_range(1..=3);
        let mut maps = Vec::new();
        let mut sizes = Vec::new();
        let mut chains = Vec::new();
        for _ in 0..n_views {
            let links: Vec<AffineMap> = (0..rng.random_range(2..=6)).map(|_| random_link(&mut rng)).collect();
            let composed = links.iter().skip(1).fold(links[0], |acc, m| acc.then(m));
            let inv = composed.invert().expect("chain links are invertible");
            for _ in 0..8 {
                let p = (rng.random_range(-8.0..40.0), rng.random_range(-8.0..40.0));
                let q = composed.map_point(p);
                let seq = apply_chain(&links, p);
                worst_compose = worst_compose.max((q.0 - seq.0).abs().max((q.1 - seq.1).abs()));
                let back = inv.map_point(q);
                worst_round_trip = worst_round_trip.max((back.0 - p.0).abs().max((back.1 - p.1).abs()));
            }
            maps.push(composed);
            sizes.push((rng.random_range(4..=32), rng.random_range(4..=32)));
            chains.push(links);
        }
        let anchor = (rng.random_range(1..=32), rng.random_range(1..=32));
        let region = valid_intersection(&maps, &sizes, anchor);
        for row in 0..anchor.0 {
            for col in 0..anchor.1 {
                let p = (col as f64, row as f64);
                let expected = chains.iter().zip(&sizes).all(|(links, &s)| inside(apply_chain(links, p), s));
                mask_mismatches += (region.contains(row, col) != expected) as usize;
                pixels += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_round_trip <= 1e-9 && worst_compose <= 1e-9 && mask_mismatches == 0 && secs < 10.0;
    Verdict::new(
        pass,
        format!(
            "1000 chains: round-trip err {worst_round_trip:.2e}, compose err {worst_compose:.2e} (tol 1e-9); \
             intersection mismatches {mask_mismatches}/{pixels}; {secs:.2}s (limit 10s)"
        ),
    )
}

fn points(rows: &[[f64; 2]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j])
}

fn shape_error(e: &Ellipse2D, center: [f64; 2], shape: Matrix2<f64>) -> f64 {
    let dc = (e.center - Vector2::new(center[0], center[1])).abs().max();
    dc.max((e.shape - shape).abs().max())
}

/// Analytic enclosing ellipses: symmetric sets whose uniform weights are optimal.
fn analytic_cases() -> Vec<(&'static str, Array2<f64>, [f64; 2], Matrix2<f64>)> {
    let circle: Vec<[f64; 2]> = (0..64).map(|i| {
        let t = TAU * i as f64 / 64.0;
        [3.0 + 2.0 * t.cos(), -1.0 + 2.0 * t.sin()]
    }).collect();
    let diamond = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    let square = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    // Square corners pushed through x -> A x + t; the ellipse follows as A^-T (I/2) A^-1.
    let a = Matrix2::new(2.0, 0.5, -0.3, 1.0);
    let t = Vector2::new(1.5, -2.0);
    let skewed: Vec<[f64; 2]> = square.iter().map(|p| {
        let q = a * Vector2::new(p[0], p[1]) + t;
        [q.x, q.y]
    }).collect();
    let ai = a.try_inverse().unwrap();
    vec![
        ("circle r=2", points(&circle), [3.0, -1.0], Matrix2::identity() / 4.0),
        ("diamond", points(&diamond), [0.0, 0.0], Matrix2::identity()),
        ("square", points(&square), [0.0, 0.0], Matrix2::identity() / 2.0),
        ("affine square", points(&skewed), [t.x, t.y], ai.transpose() * ai / 2.0),
    ]
}

pub fn mvee_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe111);
    let mut worst_residual = f64::NEG_INFINITY;
    let mut shrink_failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(5..200);
        let (sx, sy, rho) = (rng.random_range(0.1..5.0), rng.random_range(0.1..5.0), rng.random_range(-0.9..0.9));
        let cx = rng.random_range(-10.0..10.0);
        let mut pts = Array2::<f64>::zeros((n, 2));
        for mut row in pts.rows_mut() {
            let (u, v): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            row[0] = cx + sx * u;
            row[1] = sy * (rho * u + (1.0 - rho * rho).sqrt() * v);
        }
        let e = mvee(pts.view(), MVEE_TOL, MVEE_MAX_ITER).expect("non-degenerate set");
        let residuals: Vec<f64> = pts.rows().into_iter().map(|r| e.residual(Vector2::new(r[0], r[1]))).collect();
        let max = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst_residual = worst_residual.max(max - 1.0);
        // Axes scaled by 0.99 means the quadratic form grows by 1/0.99².
        let excluded = residuals.iter().filter(|&&r| r / (0.99 * 0.99) > 1.0).count();
        shrink_failures += (excluded == 0) as usize;
    }
    let mut analytic = Vec::new();
    let mut worst_analytic = 0.0f64;
    for (name, pts, c, shape) in analytic_cases() {
        let e = mvee(pts.view(), MVEE_TOL, MVEE_MAX_ITER).expect("analytic case");
        let err = shape_error(&e, c, shape);
        worst_analytic = worst_analytic.max(err);
        analytic.push(format!("{name} {err:.1e}"));
    }
    let pass = worst_residual <= 1e-6 && shrink_failures == 0 && worst_analytic <= 1e-4;
    Verdict::new(
        pass,
        format!(
            "100 sets: max residual-1 {worst_residual:.2e} (tol 1e-6), sets with nothing outside the 1% shrink {shrink_failures}; \
             analytic [{}] (tol 1e-4)",
            analytic.join(", ")
        ),
    )
}
