//! Run configuration: a TOML file plus dotted-path command-line overrides.

use std::path::{Path, PathBuf};

use cfdense::augment::{GeomAugmentConfig, PhotoAugmentConfig};
use cfdense::chromap::{ChromapConfig, Projector};
use cfdense::seg::FinetuneConfig;
use cfdense::train::PretrainSetup;
use cfdense::{ArchConfig, DatasetConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "CFDENSE_RUN_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub geom: GeomAugmentConfig,
    pub photo: PhotoAugmentConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneInit {
    /// Start from the pretraining checkpoint.
    #[default]
    Pretrained,
    /// Start from a fresh initialisation with `train.seed`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Pixels drawn per held-out image for latent metrics.
    pub samples_per_image: usize,
    /// Clusters for K-means.
    pub clusters: usize,
    pub seed: u64,
    pub init: FinetuneInit,
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub dice_weight: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            samples_per_image: 2000,
            clusters: 3,
            seed: 0,
            init: FinetuneInit::Pretrained,
            folds: f.folds,
            epochs: f.epochs,
            lr: f.lr,
            momentum: f.momentum,
            dice_weight: f.dice_weight,
        }
    }
}

impl EvalSection {
    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            folds: self.folds,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            dice_weight: self.dice_weight,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChromapSection {
    pub projector: Projector,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Fit one projection and ellipse across all rendered images.
    pub global_fit: bool,
    /// Held-out images to render, from the start of the validation split.
    pub images: usize,
}

impl Default for ChromapSection {
    fn default() -> Self {
        let c = ChromapConfig::default();
        Self {
            projector: c.projector,
            alpha: c.alpha,
            tol: c.tol,
            max_iter: c.max_iter,
            seed: c.seed,
            global_fit: c.global_fit,
            images: 4,
        }
    }
}

impl ChromapSection {
    pub fn render(&self) -> ChromapConfig {
        ChromapConfig {
            projector: self.projector,
            alpha: self.alpha,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            global_fit: self.global_fit,
        }
    }
}

/// Locations; none of these take part in the config hash.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub run_dir: Option<PathBuf>,
    /// Dataset for pretraining and latent evaluation; defaults to `<run_dir>/data`.
    pub data_dir: Option<PathBuf>,
    /// Labelled dataset for fine-tuning; defaults to `data_dir`.
    pub finetune_data_dir: Option<PathBuf>,
    /// Pretrained checkpoint; defaults to `<run_dir>/pretrain/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub augment: AugmentSection,
    pub model: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub chromap: ChromapSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        CliError::new("config.not_found", format!("config file {} does not exist", p.display()))
                    } else {
                        CliError::new("config.io", format!("{}: {e}", p.display()))
                    }
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::new("config.parse", format!("{}: {}", p.display(), one_line(&e))))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new("config.invalid", one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain_setup().validate()?;
        self.eval.finetune().validate()?;
        let [h, w] = self.augment.geom.output_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(CliError::new(
                "config.invalid",
                format!("augment.geom.output_size {h}x{w}: sides must be multiples of 4"),
            ));
        }
        Ok(())
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        PretrainSetup {
            loss: self.loss.clone(),
            geom: self.augment.geom.clone(),
            photo: self.augment.photo.clone(),
            train: self.train.clone(),
        }
    }

    /// SHA-256 over the canonical JSON of every section except `paths`,
    /// first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("paths");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }
}

fn one_line(e: &dyn std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets `a.b.c = value`, parsing `value` as a TOML literal when possible
/// and as a bare string otherwise.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::new("config.override", format!("malformed override key `{key}`")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::new("config.override", format!("`{part}` in `{key}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Splits `--a.b value` / `--a.b=value` pairs. Short chromap aliases are
/// accepted for `--projector`, `--alpha`, `--tol` and `--global-fit`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let raw = args[i]
            .strip_prefix("--")
            .ok_or_else(|| CliError::new("config.override", format!("expected `--key value`, got `{}`", args[i])))?;
        let (key, value) = match raw.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None if raw == "global-fit" => (raw.to_string(), "true".to_string()),
            None => {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| CliError::new("config.override", format!("missing value for `--{raw}`")))?;
                (raw.to_string(), v.clone())
            }
        };
        let key = match key.as_str() {
            "projector" | "alpha" | "tol" => format!("chromap.{key}"),
            "global-fit" => "chromap.global_fit".to_string(),
            _ => key,
        };
        out.push((key, value));
        i += 1;
    }
    Ok(out)
}
