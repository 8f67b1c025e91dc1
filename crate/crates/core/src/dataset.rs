//! On-disk phantom dataset.
//!
//! ```text
//! <dir>/dataset.json                 generation config
//! <dir>/<split>/<id>/manifest.json   spec, shapes, seeds, view affine rows
//! <dir>/<split>/<id>/<tensor>.f32    flat little-endian f32, row-major
//! ```
//!
//! Tensors per sample: `factual`, `scanner`, `pathology`, `both`, and `mask`
//! (class ids stored as f32) when labels are written.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::augment::{draw_geometric, GeomAugmentConfig};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMask};
use crate::phantom::{CounterfactualSet, PhantomSpec, ViewTag};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: [usize; 2],
    pub n_train: usize,
    pub n_val: usize,
    pub fraction_pe: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Write lung masks; unlabeled datasets cannot drive supervised objectives.
    pub labels: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 128],
            n_train: 200,
            n_val: 20,
            fraction_pe: 0.5,
            seed: 0,
            noise_sigma: 0.02,
            labels: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_pe) {
            return Err(Error::InvalidConfig(format!("fraction_pe {} outside [0, 1]", self.fraction_pe)));
        }
        if self.image_size[0] < 8 || self.image_size[1] < 8 {
            return Err(Error::InvalidConfig(format!("image_size {:?} below 8x8", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
        }
    }
}

/// A reference geometric draw per view, stored so external tools can
/// reproduce a canonical view set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub tag: ViewTag,
    pub seed: u64,
    pub affine: AffineMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub spec: PhantomSpec,
    pub images: CounterfactualSet,
    /// `None` for unlabeled datasets; `images.mask` is still rendered.
    pub labels: Option<LabelMask>,
    pub views: Vec<ViewEntry>,
}

impl Sample {
    pub fn generate(id: String, spec: PhantomSpec, labels: bool, view_seed: u64) -> Result<Self> {
        let images = CounterfactualSet::render(&spec)?;
        let size = (spec.size[0], spec.size[1]);
        let geom = GeomAugmentConfig { output_size: spec.size, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
        let views = ViewTag::ALL
            .iter()
            .map(|&tag| {
                let seed = rand::RngCore::next_u64(&mut rng);
                let (affine, _) = draw_geometric(&geom, &mut ChaCha8Rng::seed_from_u64(seed), size)?;
                Ok(ViewEntry { tag, seed, affine })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            labels: labels.then(|| images.mask.clone()),
            spec,
            images,
            views,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn has_labels(&self) -> bool {
        self.config.labels
    }

    /// Generates in memory without touching disk.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut out = Dataset { config: cfg.clone(), train: vec![], val: vec![] };
        for (split, n) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
            let n_pe = (cfg.fraction_pe * n as f64).round() as usize;
            let mut flags: Vec<bool> = (0..n).map(|i| i < n_pe).collect();
            flags.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, split.salt(), u64::MAX)));
            let samples = flags
                .iter()
                .enumerate()
                .map(|(i, &pe)| {
                    let seed = mix(cfg.seed, split.salt(), i as u64);
                    let size = (cfg.image_size[0], cfg.image_size[1]);
                    let spec = PhantomSpec::random(size, pe, cfg.noise_sigma, seed);
                    Sample::generate(format!("{i:06}"), spec, cfg.labels, mix(seed, 0x71e3, 0))
                })
                .collect::<Result<Vec<_>>>()?;
            match split {
                Split::Train => out.train = samples,
                Split::Val => out.val = samples,
            }
        }
        Ok(out)
    }
}

/// Per-sample stream derivation from (global seed, salt, index).
pub fn mix(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    spec: PhantomSpec,
    tensors: Vec<TensorEntry>,
    views: Vec<ViewEntry>,
}

pub fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.name()).join(id)
}

fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [h, w] = s.spec.size;
    let mut tensors = Vec::new();
    for tag in ViewTag::ALL {
        let file = format!("{}.f32", tag.name());
        write_f32(&dir.join(&file), s.images.image(tag).data().iter().copied())?;
        tensors.push(TensorEntry { name: tag.name().into(), shape: [h, w], file });
    }
    if let Some(mask) = &s.labels {
        write_f32(&dir.join("mask.f32"), mask.data().iter().map(|&c| c as f32))?;
        tensors.push(TensorEntry { name: "mask".into(), shape: [h, w], file: "mask.f32".into() });
    }
    let manifest = Manifest { id: s.id.clone(), spec: s.spec.clone(), tensors, views: s.views.clone() };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn read_sample(dir: &Path) -> Result<Sample> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let mut images: Vec<Option<ImageTensor>> = vec![None; 4];
    let mut labels = None;
    for t in &manifest.tensors {
        let path = dir.join(&t.file);
        let data = read_f32(&path)?;
        let [h, w] = t.shape;
        if data.len() != h * w {
            return Err(Error::format(&path, format!("expected {} values, found {}", h * w, data.len())));
        }
        if t.name == "mask" {
            let ids = data
                .iter()
                .map(|&v| {
                    if v == v.trunc() && (0.0..3.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::format(&path, format!("illegal class id {v}")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            labels = Some(LabelMask::from_vec(h, w, ids)?);
        } else {
            let slot = ViewTag::ALL
                .iter()
                .position(|tag| tag.name() == t.name)
                .ok_or_else(|| Error::format(&path, format!("unknown tensor `{}`", t.name)))?;
            images[slot] = Some(ImageTensor::from_vec(h, w, data).map_err(|e| Error::format(&path, e.to_string()))?);
        }
    }
    let mut it = images.into_iter().zip(ViewTag::ALL).map(|(img, tag)| {
        img.ok_or_else(|| Error::format(dir.join(MANIFEST), format!("missing tensor `{}`", tag.name())))
    });
    let (factual, scanner, pathology, both) = (it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?);
    // The anatomical mask is a pure function of the spec.
    let mask = crate::phantom::render_phantom(&manifest.spec)?.1;
    Ok(Sample {
        id: manifest.id,
        spec: manifest.spec,
        images: CounterfactualSet { factual, scanner, pathology, both, mask },
        labels,
        views: manifest.views,
    })
}

/// Generates and writes a dataset, returning what was written.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Dataset> {
    let ds = Dataset::generate(cfg)?;
    save_dataset(dir, &ds)?;
    Ok(ds)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(DATASET_FILE), &ds.config)?;
    for split in [Split::Train, Split::Val] {
        for s in ds.split(split) {
            write_sample(&sample_dir(dir, split, &s.id), s)?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let config: DatasetConfig = read_json(&dir.join(DATASET_FILE))?;
    let mut ds = Dataset { config, train: vec![], val: vec![] };
    for split in [Split::Train, Split::Val] {
        let split_dir = dir.join(split.name());
        if !split_dir.exists() {
            continue;
        }
        let mut ids: Vec<PathBuf> = fs::read_dir(&split_dir)
            .map_err(|e| Error::io(&split_dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&split_dir, err)))
            .collect::<Result<Vec<_>>>()?;
        ids.retain(|p| p.is_dir());
        ids.sort();
        let samples = ids.iter().map(|p| read_sample(p)).collect::<Result<Vec<_>>>()?;
        match split {
            Split::Train => ds.train = samples,
            Split::Val => ds.val = samples,
        }
    }
    Ok(ds)
}
