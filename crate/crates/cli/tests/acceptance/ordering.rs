//! Directional reproduction on synthetic phantoms. The DVD-CL checkpoints
//! trained for the latent criterion are reused as the fine-tuning
//! initialisation so each seed is pretrained once.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use cfdense::augment::{GeomAugmentConfig, PhotoAugmentConfig};
use cfdense::dataset::mix;
use cfdense::latent::{evaluate_latent, LatentMetrics};
use cfdense::seg::{evaluate, finetune, FinetuneConfig};
use cfdense::train::{pretrain, PretrainSetup};
use cfdense::{ArchConfig, Dataset, DatasetConfig, LossConfig, Method, ModelParams, TrainConfig};

use crate::Verdict;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SIZE: usize = 32;
const STEPS: usize = 2000;
const TEMPERATURE: f64 = 0.5;
const PIXELS_PER_VIEW: usize = 256;
const FINETUNE_EPOCHS: usize = 5;

struct Pretrained {
    params: ModelParams<f32>,
    secs: f64,
}

/// DVD-CL checkpoints keyed by seed, shared between criteria 6 and 7.
static DVD_CACHE: Mutex<BTreeMap<u64, (ModelParams<f32>, f64)>> = Mutex::new(BTreeMap::new());

fn pretrain_data(seed: u64) -> Dataset {
    Dataset::generate(&DatasetConfig {
        image_size: [SIZE, SIZE],
        n_train: 200,
        n_val: 20,
        seed,
        labels: true,
        ..DatasetConfig::default()
    })
    .expect("phantom dataset")
}

fn run_pretrain(method: Method, seed: u64, data: &Dataset) -> Pretrained {
    if method == Method::Dvd {
        if let Some((params, secs)) = DVD_CACHE.lock().unwrap().get(&seed) {
            return Pretrained { params: params.clone(), secs: *secs };
        }
    }
    let setup = PretrainSetup {
        loss: LossConfig { method, temperature: TEMPERATURE, samples: PIXELS_PER_VIEW, ..LossConfig::default() },
        geom: GeomAugmentConfig { output_size: [SIZE, SIZE], ..GeomAugmentConfig::default() },
        photo: PhotoAugmentConfig::default(),
        train: TrainConfig { steps: STEPS, seed, ..TrainConfig::default() },
    };
    let start = Instant::now();
    let init = ModelParams::init(ArchConfig::default(), seed);
    let params = pretrain(init, &data.train, &setup, |_, _, _| Ok(())).expect("pretraining").params;
    let secs = start.elapsed().as_secs_f64();
    if method == Method::Dvd {
        DVD_CACHE.lock().unwrap().insert(seed, (params.clone(), secs));
    }
    Pretrained { params, secs }
}

fn latent(params: &ModelParams<f32>, data: &Dataset, seed: u64) -> LatentMetrics {
    evaluate_latent(params, &data.val, 2000, 3, seed).expect("latent metrics")
}

pub fn latent_ordering() -> Verdict {
    let mut cpu = 0.0;
    let mut passes = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let data = pretrain_data(seed);
        let mut m = BTreeMap::new();
        for method in [Method::Dvd, Method::Sdvd, Method::Mvd, Method::Smvd] {
            let run = run_pretrain(method, seed, &data);
            let start = Instant::now();
            m.insert(method.name(), latent(&run.params, &data, seed));
            cpu += run.secs + start.elapsed().as_secs_f64();
        }
        let ok = |sup: &str, unsup: &str| {
            let (s, u) = (&m[sup], &m[unsup]);
            s.purity >= 0.90 && s.purity - u.purity >= 0.10 && s.d_over_sigma > u.d_over_sigma
        };
        let pass = ok("sdvd", "dvd") && ok("smvd", "mvd");
        passes += pass as usize;
        rows.push(format!(
            "seed {seed} {}: purity dvd {:.3} sdvd {:.3} mvd {:.3} smvd {:.3}; d/s dvd {:.2} sdvd {:.2} mvd {:.2} smvd {:.2}",
            if pass { "ok" } else { "miss" },
            m["dvd"].purity, m["sdvd"].purity, m["mvd"].purity, m["smvd"].purity,
            m["dvd"].d_over_sigma, m["sdvd"].d_over_sigma, m["mvd"].d_over_sigma, m["smvd"].d_over_sigma,
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    let minutes = cpu / 60.0;
    Verdict::new(
        passes >= 4 && minutes < 15.0,
        format!("{passes}/5 seeds meet purity >= 0.90, gap >= 0.10 and higher d/sigma (need 4); {minutes:.1} CPU-min (limit 15)"),
    )
}

pub fn finetune_ordering() -> Verdict {
    let mut cpu = 0.0;
    let mut passes = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let pre = run_pretrain(Method::Dvd, seed, &pretrain_data(seed));
        cpu += pre.secs;
        let start_ft = Instant::now();
        let labelled = Dataset::generate(&DatasetConfig {
            image_size: [SIZE, SIZE],
            n_train: 70,
            n_val: 0,
            fraction_pe: 50.0 / 70.0,
            seed: mix(seed, 0xf1e, 0),
            labels: true,
            ..DatasetConfig::default()
        })
        .expect("labelled dataset");
        let cfg = FinetuneConfig { folds: 2, epochs: FINETUNE_EPOCHS, seed, ..FinetuneConfig::default() };
        let score = |init: &ModelParams<f32>| {
            let folds = finetune(init, &labelled.train, &cfg).expect("fine-tuning");
            evaluate(&folds, &labelled.train).expect("evaluation").summary.dsc_pe.expect("PE cases").mean
        };
        let random = score(&ModelParams::init(ArchConfig::default(), seed));
        let pretrained = score(&pre.params);
        cpu += start_ft.elapsed().as_secs_f64();
        let gain = 100.0 * (pretrained - random);
        let pass = gain >= 2.0;
        passes += pass as usize;
        rows.push(format!(
            "seed {seed} {}: DSC_PE random {:.2} vs DVD-CL {:.2} ({gain:+.2} points)",
            if pass { "ok" } else { "miss" },
            100.0 * random,
            100.0 * pretrained
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    let minutes = cpu / 60.0;
    Verdict::new(
        passes >= 4 && minutes < 20.0,
        format!(
            "{passes}/5 seeds with DVD-CL init >= 2 DSC_PE points above random init (need 4; 70 phantoms 20/50, \
             2 folds, {FINETUNE_EPOCHS} epochs); {minutes:.1} CPU-min incl. pretraining (limit 20)"
        ),
    )
}
