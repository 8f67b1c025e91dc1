use std::collections::HashSet;

use cfdense::latent::{d_over_sigma, kmeans, purity};
use cfdense::seg::{dice, surface_distances, SCORED_CLASSES};
use cfdense::LabelMask;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

/// Random label map made of a few overlapping axis-aligned ellipses.
fn blob_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMask {
    let mut data = vec![0u8; h * w];
    for _ in 0..rng.random_range(1..5) {
        let class = rng.random_range(1..=2u8);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(0.5..=(h as f64 / 2.0)), rng.random_range(0.5..=(w as f64 / 2.0)));
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    data[r * w + c] = class;
                }
            }
        }
    }
    // Speckle so boundaries are irregular.
    for v in data.iter_mut() {
        if rng.random_bool(0.03) {
            *v = rng.random_range(0..=2);
        }
    }
    LabelMask::from_vec(h, w, data).unwrap()
}

fn oracle_dice(p: &LabelMask, g: &LabelMask, class: u8) -> f64 {
    let set = |m: &LabelMask| -> HashSet<(usize, usize)> {
        let (h, w) = m.size();
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c) == class).collect()
    };
    let (a, b) = (set(p), set(g));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Class pixels touching the image edge or a 4-neighbour of another class.
fn oracle_surface(m: &LabelMask, class: u8) -> Vec<(i64, i64)> {
    let (h, w) = m.size();
    let at = |r: i64, c: i64| -> Option<u8> {
        (r >= 0 && c >= 0 && r < h as i64 && c < w as i64).then(|| m.get(r as usize, c as usize))
    };
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c) == Some(class)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| at(r + dr, c + dc) != Some(class))
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Every pairwise distance, then the minimum per source point.
fn oracle_directed(a: &[(i64, i64)], b: &[(i64, i64)]) -> Vec<f64> {
    let all: Vec<Vec<f64>> = a
        .iter()
        .map(|p| b.iter().map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt()).collect())
        .collect();
    all.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect()
}

/// Linear-interpolation percentile (the usual "linear" method).
fn oracle_percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < s.len() {
        s[i] + frac * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

fn oracle_purity(ids: &[usize], labels: &[u8]) -> f64 {
    let clusters: HashSet<usize> = ids.iter().copied().collect();
    let mut majority = 0;
    for c in clusters {
        majority += (0..=255u8)
            .map(|l| ids.iter().zip(labels).filter(|&(&i, &y)| i == c && y == l).count())
            .max()
            .unwrap();
    }
    majority as f64 / ids.len() as f64
}

fn oracle_d_over_sigma(x: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let d = x.ncols();
    let mut means = Vec::new();
    let mut sigma = 0.0;
    for &k in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|&i| x[[i, j]]).sum::<f64>() / rows.len() as f64).collect();
        let ms = rows.iter().map(|&i| (0..d).map(|j| (x[[i, j]] - mu[j]).powi(2)).sum::<f64>()).sum::<f64>() / rows.len() as f64;
        sigma += ms.sqrt() / classes.len() as f64;
        means.push(mu);
    }
    let mut dist = Vec::new();
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            dist.push((0..d).map(|j| (means[a][j] - means[b][j]).powi(2)).sum::<f64>().sqrt());
        }
    }
    dist.iter().sum::<f64>() / dist.len() as f64 / sigma
}

pub fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x8e7);
    let (mut dice_bad, mut hd_bad, mut asd_bad, mut compared) = (0, 0, 0, 0);
    let mut surface_cases = 0;
    for _ in 0..300 {
        let (h, w) = (rng.random_range(2..=32), rng.random_range(2..=32));
        let (p, g) = (blob_mask(h, w, &mut rng), blob_mask(h, w, &mut rng));
        for class in SCORED_CLASSES {
            compared += 1;
            dice_bad += (dice(&p, &g, class).unwrap() != oracle_dice(&p, &g, class)) as usize;
            let (sp, sg) = (oracle_surface(&p, class), oracle_surface(&g, class));
            match surface_distances(&p, &g, class) {
                Ok(got) => {
                    surface_cases += 1;
                    let (dpg, dgp) = (oracle_directed(&sp, &sg), oracle_directed(&sg, &sp));
                    let hd = oracle_percentile(&dpg, 95.0).max(oracle_percentile(&dgp, 95.0));
                    let asd = (dpg.iter().sum::<f64>() + dgp.iter().sum::<f64>()) / (dpg.len() + dgp.len()) as f64;
                    hd_bad += (got.hd95 != hd) as usize;
                    asd_bad += (got.asd != asd) as usize;
                }
                Err(_) => {
                    // Must only refuse when one surface really is empty.
                    hd_bad += (!sp.is_empty() && !sg.is_empty()) as usize;
                }
            }
        }
    }
    let mut worst_purity = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for t in 0..30u64 {
        let n = rng.random_range(20..200);
        let d = rng.random_range(2..8);
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let x = Array2::from_shape_fn((n, d), |(i, _)| labels[i] as f64 + rng.random_range(-1.0..1.0));
        let clusters = kmeans(x.view(), 3, t, 300).unwrap();
        worst_purity = worst_purity.max((purity(&clusters.ids, &labels).unwrap() - oracle_purity(&clusters.ids, &labels)).abs());
        let ratio = d_over_sigma(x.view(), &labels).unwrap();
        worst_ratio = worst_ratio.max((ratio - oracle_d_over_sigma(&x, &labels)).abs() / ratio.abs().max(1.0));
    }
    let pass = dice_bad == 0 && hd_bad == 0 && asd_bad == 0 && worst_purity <= 1e-9 && worst_ratio <= 1e-9;
    Verdict::new(
        pass,
        format!(
            "{compared} class comparisons on masks <= 32x32 ({surface_cases} with surfaces): dice/hd95/asd mismatches \
             {dice_bad}/{hd_bad}/{asd_bad}; purity err {worst_purity:.1e}, d/sigma err {worst_ratio:.1e} (tol 1e-9)"
        ),
    )
}
