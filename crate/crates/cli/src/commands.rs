//! The six pipeline commands. Each writes into `<run_dir>/<command>/`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cfdense::chromap::{chromap_fields, render_overlay, RgbImage};
use cfdense::dataset::{read_dataset, write_dataset, Dataset};
use cfdense::latent::{evaluate_latent, LatentMetrics};
use cfdense::net::{load_checkpoint, save_checkpoint};
use cfdense::seg::{evaluate, finetune, FoldModel, SegHead, SegModel, SegReport};
use cfdense::train::pretrain;
use cfdense::{Checkpoint, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::{FinetuneInit, RunConfig};
use crate::error::{io_error, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Pretrain,
    EvalLatent,
    Chromap,
    Finetune,
    EvalSeg,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::EvalLatent => "eval-latent",
            Command::Chromap => "chromap",
            Command::Finetune => "finetune",
            Command::EvalSeg => "eval-seg",
        }
    }
}

/// Resolved locations for one invocation.
#[derive(Clone, Debug)]
pub struct Layout {
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
    pub finetune_data_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, run_dir: PathBuf) -> Self {
        let data_dir = cfg.paths.data_dir.clone().unwrap_or_else(|| run_dir.join("data"));
        Self {
            finetune_data_dir: cfg.paths.finetune_data_dir.clone().unwrap_or_else(|| data_dir.clone()),
            checkpoint: cfg.paths.checkpoint.clone().unwrap_or_else(|| run_dir.join("pretrain").join("model.ckpt")),
            data_dir,
            run_dir,
        }
    }

    pub fn out(&self, command: Command) -> PathBuf {
        self.run_dir.join(command.name())
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serialises");
    text.push('\n');
    write_text(path, &text)
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join("dataset.json").exists() {
        return Err(CliError::new(
            "data.not_found",
            format!("no dataset at {} (run gen-data first or set paths.data_dir)", dir.display()),
        ));
    }
    Ok(read_dataset(dir)?)
}

fn load_pretrained(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::new(
            "checkpoint.not_found",
            format!("no checkpoint at {} (run pretrain first or set paths.checkpoint)", path.display()),
        ));
    }
    Ok(load_checkpoint(path)?)
}

/// Runs one command; returns the directory holding its artifacts.
pub fn execute(command: Command, cfg: &RunConfig, layout: &Layout) -> Result<PathBuf, CliError> {
    let out = layout.out(command);
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let hash = cfg.hash();
    log::info!("{} (config {hash}) -> {}", command.name(), out.display());
    match command {
        Command::GenData => gen_data(cfg, layout, &out, &hash),
        Command::Pretrain => run_pretrain(cfg, layout, &out, &hash),
        Command::EvalLatent => eval_latent(cfg, layout, &out, &hash),
        Command::Chromap => run_chromap(cfg, layout, &out, &hash),
        Command::Finetune => run_finetune(cfg, layout, &out, &hash),
        Command::EvalSeg => eval_seg(cfg, layout, &out, &hash),
    }?;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DataSummary {
    config_hash: String,
    data_dir: PathBuf,
    n_train: usize,
    n_val: usize,
    pe_train: usize,
    pe_val: usize,
    labels: bool,
}

fn gen_data(cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ds = write_dataset(&layout.data_dir, &cfg.data)?;
    let pe = |s: &[cfdense::Sample]| s.iter().filter(|x| x.spec.pe).count();
    write_json(
        &out.join("summary.json"),
        &DataSummary {
            config_hash: hash.into(),
            data_dir: layout.data_dir.clone(),
            n_train: ds.train.len(),
            n_val: ds.val.len(),
            pe_train: pe(&ds.train),
            pe_val: pe(&ds.val),
            labels: ds.has_labels(),
        },
    )
}

#[derive(Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub method: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

fn run_pretrain(cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ds = load_data(&layout.data_dir)?;
    if cfg.loss.method.supervised() && !ds.has_labels() {
        return Err(CliError::new(
            "data.labels_required",
            format!("loss.method `{}` needs a labelled dataset; {} has no masks", cfg.loss.method.name(), layout.data_dir.display()),
        ));
    }
    if ds.config.image_size != cfg.augment.geom.output_size {
        log::info!("views are resampled from {:?} to {:?}", ds.config.image_size, cfg.augment.geom.output_size);
    }
    let log_path = out.join("log.csv");
    let mut writer = csv::Writer::from_path(&log_path).map_err(|e| io_error(&log_path, e))?;
    let init = ModelParams::init(cfg.model, cfg.train.seed);
    let setup = cfg.pretrain_setup();
    let outcome = pretrain(init, &ds.train, &setup, |row, _, _| {
        writer.serialize(row).map_err(|e| cfdense::Error::InvalidConfig(format!("writing training log: {e}")))?;
        if row.step % 100 == 0 {
            log::info!("step {} loss {:.5}", row.step, row.loss);
        }
        Ok(())
    })?;
    writer.flush().map_err(|e| io_error(&log_path, e))?;
    let mut ckpt = Checkpoint::new(outcome.params, cfg.train.seed, cfg.train.steps as u64, hash);
    ckpt.velocity = Some(outcome.velocity);
    save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    write_json(
        &out.join("summary.json"),
        &PretrainSummary {
            config_hash: hash.into(),
            method: cfg.loss.method.name().into(),
            steps: cfg.train.steps,
            final_loss: outcome.log.last().map(|r| r.loss),
        },
    )
}

#[derive(Serialize, Deserialize)]
pub struct LatentReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    #[serde(flatten)]
    pub metrics: LatentMetrics,
}

fn eval_latent(cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ckpt = load_pretrained(&layout.checkpoint)?;
    let ds = load_data(&layout.data_dir)?;
    let samples = if ds.val.is_empty() { &ds.train } else { &ds.val };
    let metrics = evaluate_latent(&ckpt.params, samples, cfg.eval.samples_per_image, cfg.eval.clusters, cfg.eval.seed)?;
    log::info!("purity {:.4}, d/sigma {:.4}", metrics.purity, metrics.d_over_sigma);
    write_json(
        &out.join("metrics.json"),
        &LatentReport { config_hash: hash.into(), checkpoint_hash: ckpt.config_hash.clone(), metrics },
    )
}

/// Writes an 8-bit RGB PNG carrying the config hash as a text chunk.
pub fn write_png(path: &Path, img: &RgbImage, hash: &str) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("cfdense-config-hash".into(), hash.into()).map_err(|e| io_error(path, e))?;
    let mut w = enc.write_header().map_err(|e| io_error(path, e))?;
    w.write_image_data(&img.to_bytes()).map_err(|e| io_error(path, e))?;
    w.finish().map_err(|e| io_error(path, e))
}

#[derive(Serialize, Deserialize)]
struct ChromapEntry {
    id: String,
    png: String,
    center: [f64; 2],
    shape: [[f64; 2]; 2],
    degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct ChromapSummary {
    config_hash: String,
    global_fit: bool,
    images: Vec<ChromapEntry>,
}

fn run_chromap(cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ckpt = load_pretrained(&layout.checkpoint)?;
    let ds = load_data(&layout.data_dir)?;
    let pool = if ds.val.is_empty() { &ds.train } else { &ds.val };
    let samples = &pool[..cfg.chromap.images.min(pool.len())];
    let fields = samples
        .iter()
        .map(|s| ckpt.params.forward(&s.images.factual))
        .collect::<cfdense::Result<Vec<_>>>()?;
    let render = cfg.chromap.render();
    let maps = chromap_fields(&fields, &render)?;
    let mut entries = Vec::new();
    for (s, m) in samples.iter().zip(&maps) {
        let overlay = render_overlay(&s.images.factual, &m.colors, render.alpha)?;
        let name = format!("{}.png", s.id);
        write_png(&out.join(&name), &overlay, hash)?;
        let e = m.ellipse;
        entries.push(ChromapEntry {
            id: s.id.clone(),
            png: name,
            center: [e.center.x, e.center.y],
            shape: [[e.shape[(0, 0)], e.shape[(0, 1)]], [e.shape[(1, 0)], e.shape[(1, 1)]]],
            degenerate: m.projection.degenerate,
        });
    }
    write_json(&out.join("summary.json"), &ChromapSummary { config_hash: hash.into(), global_fit: render.global_fit, images: entries })
}

#[derive(Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub checkpoint: String,
    pub val_ids: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct FoldsFile {
    pub config_hash: String,
    pub init: FinetuneInit,
    pub folds: Vec<FoldRecord>,
}

fn run_finetune(cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ds = load_data(&layout.finetune_data_dir)?;
    if !ds.has_labels() {
        return Err(CliError::new(
            "data.labels_required",
            format!("fine-tuning needs a labelled dataset; {} has no masks", layout.finetune_data_dir.display()),
        ));
    }
    let init = match cfg.eval.init {
        FinetuneInit::Pretrained => load_pretrained(&layout.checkpoint)?.params,
        FinetuneInit::Random => ModelParams::init(cfg.model, cfg.train.seed),
    };
    let folds = finetune(&init, &ds.train, &cfg.eval.finetune())?;
    let mut records = Vec::new();
    for f in &folds {
        let name = format!("fold{}.ckpt", f.fold);
        let mut ckpt = Checkpoint::new(f.model.net.clone(), cfg.eval.seed, cfg.eval.epochs as u64, hash);
        ckpt.extra = f.model.head.to_tensors();
        save_checkpoint(&out.join(&name), &ckpt)?;
        log::info!("fold {}: final epoch loss {:?}", f.fold, f.epoch_losses.last());
        records.push(FoldRecord {
            fold: f.fold,
            checkpoint: name,
            val_ids: f.val.iter().map(|&i| ds.train[i].id.clone()).collect(),
            epoch_losses: f.epoch_losses.clone(),
        });
    }
    write_json(&out.join("folds.json"), &FoldsFile { config_hash: hash.into(), init: cfg.eval.init, folds: records })
}

#[derive(Serialize, Deserialize)]
pub struct SegReportFile {
    pub config_hash: String,
    pub finetune_config_hash: String,
    #[serde(flatten)]
    pub report: SegReport,
}

fn eval_seg(_cfg: &RunConfig, layout: &Layout, out: &Path, hash: &str) -> Result<(), CliError> {
    let ft_dir = layout.out(Command::Finetune);
    let folds_path = ft_dir.join("folds.json");
    let text = fs::read_to_string(&folds_path).map_err(|e| {
        CliError::new("checkpoint.not_found", format!("{}: {e} (run finetune first)", folds_path.display()))
    })?;
    let file: FoldsFile =
        serde_json::from_str(&text).map_err(|e| CliError::new("data.format", format!("{}: {e}", folds_path.display())))?;
    let ds = load_data(&layout.finetune_data_dir)?;
    let mut folds = Vec::new();
    for rec in &file.folds {
        let ckpt = load_checkpoint(&ft_dir.join(&rec.checkpoint))?;
        let head = SegHead::from_tensors(&ckpt.extra, ckpt.arch().dim)?;
        let val = rec
            .val_ids
            .iter()
            .map(|id| {
                ds.train.iter().position(|s| &s.id == id).ok_or_else(|| {
                    CliError::new("data.format", format!("fold {} names sample {id} absent from the dataset", rec.fold))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        folds.push(FoldModel {
            fold: rec.fold,
            model: SegModel { net: ckpt.params, head },
            val,
            epoch_losses: rec.epoch_losses.clone(),
        });
    }
    let report = evaluate(&folds, &ds.train)?;
    let csv_path = out.join("per_sample.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_error(&csv_path, e))?;
    w.write_record(["config_hash", "fold", "id", "pe", "dsc", "dsc_left", "dsc_right", "hd95", "asd"])
        .map_err(|e| io_error(&csv_path, e))?;
    for r in &report.per_sample {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            hash.to_string(),
            r.fold.to_string(),
            r.id.clone(),
            r.pe.to_string(),
            r.dsc.to_string(),
            r.dsc_left.to_string(),
            r.dsc_right.to_string(),
            opt(r.hd95),
            opt(r.asd),
        ])
        .map_err(|e| io_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_error(&csv_path, e))?;
    if let Some(d) = report.summary.dsc {
        log::info!("DSC {:.4} ± {:.4}", d.mean, d.std);
    }
    write_json(
        &out.join("metrics.json"),
        &SegReportFile { config_hash: hash.into(), finetune_config_hash: file.config_hash, report },
    )
}
