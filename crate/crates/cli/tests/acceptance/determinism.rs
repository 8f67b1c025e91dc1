use std::fs;
use std::path::{Path, PathBuf};

use cfdense_cli::{run, Command};

use crate::Verdict;

const OVERRIDES: &[&str] = &[
    "--data.image_size=[32, 32]",
    "--data.n_train=12",
    "--data.n_val=4",
    "--data.fraction_pe=0.5",
    "--augment.geom.output_size=[32, 32]",
    "--loss.method=smvd",
    "--loss.samples=64",
    "--train.steps=25",
    "--train.seed=11",
    "--eval.samples_per_image=300",
    "--eval.folds=2",
    "--eval.epochs=2",
    "--chromap.images=2",
];

const PIPELINE: [Command; 6] =
    [Command::GenData, Command::Pretrain, Command::EvalLatent, Command::Chromap, Command::Finetune, Command::EvalSeg];

/// Artifacts that must be byte-identical; logs carry wall-clock time and are excluded.
fn compared(root: &Path) -> Vec<PathBuf> {
    let mut files = vec![
        "pretrain/model.ckpt".into(),
        "pretrain/summary.json".into(),
        "eval-latent/metrics.json".into(),
        "chromap/summary.json".into(),
        "finetune/folds.json".into(),
        "finetune/fold0.ckpt".into(),
        "finetune/fold1.ckpt".into(),
        "eval-seg/metrics.json".into(),
        "eval-seg/per_sample.csv".into(),
    ];
    let mut pngs: Vec<PathBuf> = fs::read_dir(root.join("chromap"))
        .map(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "png")).collect())
        .unwrap_or_default();
    pngs.sort();
    files.extend(pngs.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()));
    files
}

fn pipeline(root: &Path) -> Result<(), String> {
    let overrides: Vec<String> = OVERRIDES.iter().map(|s| s.to_string()).collect();
    for command in PIPELINE {
        run(command, None, Some(root), &overrides).map_err(|e| format!("{}: {e}", command.name()))?;
    }
    Ok(())
}

pub fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = pipeline(d.path()) {
            return Verdict::new(false, format!("pipeline failed: {e}"));
        }
    }
    let files = compared(dirs[0].path());
    let mut differing = Vec::new();
    for f in &files {
        let (a, b) = (fs::read(dirs[0].path().join(f)), fs::read(dirs[1].path().join(f)));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => differing.push(f.display().to_string()),
        }
    }
    Verdict::new(
        differing.is_empty(),
        format!(
            "two full CLI pipelines (gen-data..eval-seg, SMVD-CL) in separate run dirs: {} artifacts compared, differing [{}]",
            files.len(),
            differing.join(", ")
        ),
    )
}
