use std::time::Instant;

use cfdense::augment::{GeomAugmentConfig, PhotoAugmentConfig};
use cfdense::contrastive::{evaluate, loss, ntxent_pair, sample_batches, LossConfig, Method};
use cfdense::phantom::build_view_set;
use cfdense::{ArchConfig, ModelParams, PhantomSpec};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const METHODS: [Method; 4] = [Method::Dvd, Method::Mvd, Method::Sdvd, Method::Smvd];

fn unit_rows(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut z = Array2::from_shape_simple_fn((k, d), || rng.random_range(-1.0..1.0));
    for mut row in z.rows_mut() {
        let n: f64 = row.dot(&row);
        let n = n.sqrt();
        row.mapv_inplace(|v| v / n);
    }
    z
}

fn dot(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| a[[i, c]] * b[[j, c]]).sum()
}

/// −log of the softmax weight of `pos` among `keys` (already divided by τ).
fn nll(pos: f64, keys: &[f64]) -> f64 {
    -(pos.exp() / keys.iter().map(|s| s.exp()).sum::<f64>()).ln()
}

/// Dual-view objective. Positives of anchor `i` are the keys `j` with
/// `same(i, j)`; anchors flagged by `skip` are left out.
fn brute_dual(views: &[Array2<f64>], same: &dyn Fn(usize, usize) -> bool, skip: &dyn Fn(usize) -> bool, tau: f64) -> f64 {
    let k = views[0].nrows();
    let dir = |x: &Array2<f64>, y: &Array2<f64>| -> f64 {
        let (mut total, mut n) = (0.0, 0);
        for i in (0..k).filter(|&i| !skip(i)) {
            let keys: Vec<f64> = (0..k).map(|j| dot(x, i, y, j) / tau).collect();
            let pos: Vec<f64> = (0..k).filter(|&j| same(i, j)).map(|j| keys[j]).collect();
            total += pos.iter().map(|&p| nll(p, &keys)).sum::<f64>() / pos.len() as f64;
            n += 1;
        }
        total / n as f64
    };
    let targets = views.len() - 1;
    (1..views.len()).map(|t| (dir(&views[0], &views[t]) + dir(&views[t], &views[0])) / 2.0).sum::<f64>() / targets as f64
}

/// Pooled objective with keys from the other views only.
fn brute_pooled(views: &[Array2<f64>], same: &dyn Fn(usize, usize) -> bool, skip: &dyn Fn(usize) -> bool, tau: f64) -> f64 {
    let k = views[0].nrows();
    let (mut total, mut anchors) = (0.0, 0);
    for va in 0..views.len() {
        for i in (0..k).filter(|&i| !skip(i)) {
            let mut keys = Vec::new();
            let mut pos = Vec::new();
            for vb in (0..views.len()).filter(|&vb| vb != va) {
                for j in 0..k {
                    let s = dot(&views[va], i, &views[vb], j) / tau;
                    keys.push(s);
                    if same(i, j) {
                        pos.push(s);
                    }
                }
            }
            total += pos.iter().map(|&p| nll(p, &keys)).sum::<f64>() / pos.len() as f64;
            anchors += 1;
        }
    }
    total / anchors as f64
}

fn brute(method: Method, views: &[Array2<f64>], labels: &[u8], tau: f64) -> f64 {
    let by_location = |i: usize, j: usize| i == j;
    let by_class = |i: usize, j: usize| labels[i] == labels[j];
    let never = |_: usize| false;
    let background = |i: usize| labels[i] == 0;
    match method {
        Method::Dvd => brute_dual(views, &by_location, &never, tau),
        Method::Mvd => brute_pooled(views, &by_location, &never, tau),
        Method::Sdvd => brute_dual(views, &by_class, &background, tau),
        Method::Smvd => brute_pooled(views, &by_class, &background, tau),
    }
}

fn as_views(v: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
    v.iter().map(|x| x.view()).collect()
}

fn cfg(method: Method, tau: f64) -> LossConfig {
    LossConfig { method, temperature: tau, ..LossConfig::default() }
}

pub fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut worst = 0.0f64;
    let mut worst_identity = 0.0f64;
    for method in METHODS {
        for _ in 0..50 {
            let (v, k, d) = (rng.random_range(2..=3), rng.random_range(2..=8), rng.random_range(2..=4));
            let tau = rng.random_range(0.05..2.0);
            let z: Vec<_> = (0..v).map(|_| unit_rows(k, d, &mut rng)).collect();
            let mut labels: Vec<u8> = (0..k).map(|_| rng.random_range(0..3)).collect();
            labels[0] = rng.random_range(1..3);
            let lab = method.supervised().then_some(labels.as_slice());
            let got = loss(method, &as_views(&z), lab, &cfg(method, tau)).expect("loss").value;
            worst = worst.max((got - brute(method, &z, &labels, tau)).abs());
        }
    }
    for _ in 0..50 {
        let (k, d) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let tau = rng.random_range(0.05..2.0);
        let two: Vec<_> = (0..2).map(|_| unit_rows(k, d, &mut rng)).collect();
        let three: Vec<_> = (0..3).map(|_| unit_rows(k, d, &mut rng)).collect();
        let distinct: Vec<u8> = (1..=k as u8).collect();
        let value = |m: Method, z: &[Array2<f64>], l: Option<&[u8]>| loss(m, &as_views(z), l, &cfg(m, tau)).unwrap().value;
        let pair = ntxent_pair(two[0].view(), two[1].view(), tau).unwrap().value;
        for diff in [
            value(Method::Dvd, &two, None) - pair,
            value(Method::Mvd, &two, None) - value(Method::Dvd, &two, None),
            value(Method::Sdvd, &three, Some(&distinct)) - value(Method::Dvd, &three, None),
            value(Method::Smvd, &three, Some(&distinct)) - value(Method::Mvd, &three, None),
        ] {
            worst_identity = worst_identity.max(diff.abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst <= 1e-6 && worst_identity <= 1e-6 && secs < 30.0,
        format!(
            "4x50 instances max |loss - brute| {worst:.2e}; identities (DVD=NT-Xent, MVD(V=2)=DVD, \
             S-variants with per-location classes) max diff {worst_identity:.2e} (tol 1e-6); {secs:.2}s (limit 30s)"
        ),
    )
}

/// Central differences of forward + loss in f64 against backpropagation.
pub fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let size = 16;
    let arch = ArchConfig::default();
    let geom = GeomAugmentConfig { output_size: [size, size], ..GeomAugmentConfig::default() };
    let photo = PhotoAugmentConfig::default();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut kinks = 0;
    let mut per_method = Vec::new();
    for (mi, method) in METHODS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a0 + mi as u64);
        // Zero biases put every zero-padded pixel exactly on a ReLU kink, so
        // the check runs at a generic point with random biases.
        let mut params = ModelParams::<f64>::init(arch, 40 + mi as u64);
        for ti in 0..params.tensors.len() {
            if params.tensors[ti].name.ends_with("bias") {
                for i in 0..params.tensors[ti].data.len() {
                    params.set(ti, i, rng.random_range(-0.1..0.1));
                }
            }
        }
        let spec = PhantomSpec::random((size, size), mi % 2 == 1, 0.02, 7 + mi as u64);
        let set = build_view_set(&spec, &geom, &photo, &mut rng).expect("view set");
        let batches = sample_batches(method, &set, 24, &mut rng, Some(&set.base_mask)).expect("batches");
        let loss_cfg = LossConfig { method, temperature: 0.5, samples: 24, ..LossConfig::default() };
        let objective = |p: &ModelParams<f64>| {
            let (fields, pattern): (Vec<_>, Vec<_>) = set
                .views()
                .map(|v| {
                    let (f, cache) = p.forward_cached(&v.image).unwrap();
                    (f, cache.relu_pattern())
                })
                .unzip();
            (evaluate(method, &fields, &batches, &loss_cfg).unwrap().0, pattern)
        };
        let fields: Vec<_> = set.views().map(|v| params.forward(&v.image).unwrap()).collect();
        let (_, dfields) = evaluate(method, &fields, &batches, &loss_cfg).unwrap();
        let mut grads = params.zeros_like();
        for (view, df) in set.views().zip(&dfields) {
            grads.add_assign(&params.backward_from(&view.image, df).unwrap());
        }
        let mut method_worst = 0.0f64;
        let (mut checked, mut attempts) = (0, 0);
        while checked < 40 && attempts < 400 {
            attempts += 1;
            let ti = checked % params.tensors.len();
            let i = rng.random_range(0..params.tensors[ti].data.len());
            let mut hi = params.clone();
            hi.set(ti, i, params.get(ti, i) + h);
            let mut lo = params.clone();
            lo.set(ti, i, params.get(ti, i) - h);
            let ((f_hi, pat_hi), (f_lo, pat_lo)) = (objective(&hi), objective(&lo));
            // The loss is only piecewise smooth; a difference taken across a
            // ReLU switch measures the jump, not the derivative.
            if pat_hi != pat_lo {
                kinks += 1;
                continue;
            }
            let fd = (f_hi - f_lo) / (2.0 * h);
            let an = grads.get(ti, i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            method_worst = method_worst.max(rel);
            checked += 1;
            probes += 1;
        }
        worst = worst.max(method_worst);
        per_method.push(format!("{} {method_worst:.1e}", method.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-4 && probes >= 32 && secs < 120.0,
        format!(
            "{probes} probes (40 per loss, {kinks} redrawn for straddling a ReLU switch) max rel err [{}] \
             (tol 1e-4, denominator floor 1e-6); {secs:.1}s (limit 120s)",
            per_method.join(", ")
        ),
    )
}
