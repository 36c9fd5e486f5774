//! Class-labeled HR/LR datasets, patch sampling, and the synthetic corpus.

pub mod image_io;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use image_io::{load_image, save_image};
pub use synth::{synth_corpus, SynthClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail!(Usage, "unknown split {other:?}"),
        }
    }
}

/// One HR image and its stored LR counterpart, both `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct ImagePair<T> {
    pub id: String,
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ClassDataset<T> {
    pub class_label: String,
    pub split: Split,
    pub scale: usize,
    pub items: Vec<ImagePair<T>>,
}

impl<T: Scalar> ClassDataset<T> {
    /// Checks that every HR side is divisible by `scale` and every LR is HR / scale.
    pub fn new(class_label: &str, split: Split, scale: usize, items: Vec<ImagePair<T>>) -> Result<Self> {
        if scale == 0 {
            bail!(Config, "scale must be positive");
        }
        for item in &items {
            let [hc, hh, hw] = item.hr.dims3()?;
            let [lc, lh, lw] = item.lr.dims3()?;
            if hh % scale != 0 || hw % scale != 0 {
                bail!(Data, "{}: HR {hh}x{hw} not divisible by {scale}", item.id);
            }
            if (lc, lh, lw) != (hc, hh / scale, hw / scale) {
                bail!(
                    Data,
                    "{}: LR {lh}x{lw} does not match HR {hh}x{hw} / {scale}",
                    item.id
                );
            }
        }
        Ok(ClassDataset {
            class_label: class_label.to_string(),
            split,
            scale,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Fails if any HR image is smaller than `hr_patch` on either side.
    pub fn ensure_patchable(&self, hr_patch: usize) -> Result<()> {
        for item in &self.items {
            let [_, h, w] = item.hr.dims3()?;
            if h < hr_patch || w < hr_patch {
                bail!(
                    Data,
                    "{}: HR image {h}x{w} is smaller than the {hr_patch}x{hr_patch} patch",
                    item.id
                );
            }
        }
        Ok(())
    }

    /// Union of several datasets under a new label.
    pub fn union(label: &str, parts: &[&ClassDataset<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Data, "union of zero datasets");
        };
        let mut items = Vec::new();
        for p in parts {
            if p.scale != first.scale {
                bail!(Data, "union of datasets with different scales");
            }
            items.extend(p.items.iter().cloned());
        }
        ClassDataset::new(label, first.split, first.scale, items)
    }
}

/// Anything HR/LR pairs can be drawn from.
pub trait PairSource<T: Scalar> {
    fn scale(&self) -> usize;

    /// Picks one pair; returns the index of its class and the pair.
    fn draw<'s>(&'s self, rng: &mut dyn rand::RngCore) -> (usize, &'s ImagePair<T>);

    fn class_labels(&self) -> Vec<String>;
}

impl<T: Scalar> PairSource<T> for ClassDataset<T> {
    fn scale(&self) -> usize {
        self.scale
    }

    fn draw<'s>(&'s self, rng: &mut dyn rand::RngCore) -> (usize, &'s ImagePair<T>) {
        (0, &self.items[rng.random_range(0..self.items.len())])
    }

    fn class_labels(&self) -> Vec<String> {
        vec![self.class_label.clone()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub hr_patch: usize,
    pub scale: usize,
    pub batch: usize,
    pub seed: u64,
}

impl PatchSpec {
    /// 96x96 HR patches, x4, minibatch 8.
    pub fn new(seed: u64) -> Self {
        PatchSpec {
            hr_patch: 96,
            scale: 4,
            batch: 8,
            seed,
        }
    }

    pub fn lr_patch(&self) -> usize {
        self.hr_patch / self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.hr_patch == 0 || self.batch == 0 {
            bail!(Config, "patch spec values must be positive");
        }
        if !self.hr_patch.is_multiple_of(self.scale) {
            bail!(
                Config,
                "HR patch {} not divisible by scale {}",
                self.hr_patch,
                self.scale
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Minibatch<T> {
    /// `[B, 3, p/s, p/s]`
    pub lr: Tensor<T>,
    /// `[B, 3, p, p]`
    pub hr: Tensor<T>,
    /// Class index of each sample within the source.
    pub classes: Vec<usize>,
    /// HR crop origin `(y, x)` of each sample.
    pub origins: Vec<(usize, usize)>,
}

fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Result<Vec<T>> {
    let [c, h, w] = img.dims3()?;
    if y0 + size > h || x0 + size > w {
        bail!(Data, "crop {size}x{size} at ({y0},{x0}) outside {h}x{w}");
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&img.data()[row + x0..row + x0 + size]);
        }
    }
    Ok(out)
}

/// Random aligned HR/LR patch pairs; a pure function of `(spec.seed, step)`.
///
/// The HR crop origin is uniform over positions on the LR grid, so the LR crop
/// is exactly the matching region of the stored LR image.
pub fn sample_minibatch<T: Scalar, S: PairSource<T> + ?Sized>(
    source: &S,
    spec: &PatchSpec,
    step: u64,
) -> Result<Minibatch<T>> {
    spec.validate()?;
    if source.scale() != spec.scale {
        bail!(
            Config,
            "patch spec scale x{} but data is x{}",
            spec.scale,
            source.scale()
        );
    }
    let lp = spec.lr_patch();
    let mut rng = rng::stream(spec.seed, &[0xBA7C, step]);
    let mut lr = Vec::with_capacity(spec.batch * 3 * lp * lp);
    let mut hr = Vec::with_capacity(spec.batch * 3 * spec.hr_patch * spec.hr_patch);
    let mut classes = Vec::with_capacity(spec.batch);
    let mut origins = Vec::with_capacity(spec.batch);
    for _ in 0..spec.batch {
        let (class, pair) = source.draw(&mut rng);
        let [_, lh, lw] = pair.lr.dims3()?;
        if lh < lp || lw < lp {
            bail!(Data, "{}: image smaller than the patch size", pair.id);
        }
        let ly = rng.random_range(0..=lh - lp);
        let lx = rng.random_range(0..=lw - lp);
        lr.extend(crop(&pair.lr, ly, lx, lp)?);
        hr.extend(crop(&pair.hr, ly * spec.scale, lx * spec.scale, spec.hr_patch)?);
        classes.push(class);
        origins.push((ly * spec.scale, lx * spec.scale));
    }
    Ok(Minibatch {
        lr: Tensor::new(&[spec.batch, 3, lp, lp], lr)?,
        hr: Tensor::new(&[spec.batch, 3, spec.hr_patch, spec.hr_patch], hr)?,
        classes,
        origins,
    })
}

/// One line of a dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_label: String,
    pub split: Split,
    pub id: String,
    pub hr: PathBuf,
    pub lr: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scale: usize,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Distinct class labels in order of first appearance.
    pub fn class_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.class_label) {
                out.push(e.class_label.clone());
            }
        }
        out
    }

    /// Loads every entry of `split`, grouped by class in order of first appearance.
    pub fn load<T: Scalar>(&self, base_dir: &Path, split: Split) -> Result<Vec<ClassDataset<T>>> {
        let mut groups: BTreeMap<usize, (String, Vec<ImagePair<T>>)> = BTreeMap::new();
        let labels = self.class_labels();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let key = labels.iter().position(|l| *l == e.class_label).expect("label listed");
            let pair = ImagePair {
                id: e.id.clone(),
                hr: load_image(&base_dir.join(&e.hr))?,
                lr: load_image(&base_dir.join(&e.lr))?,
            };
            groups
                .entry(key)
                .or_insert_with(|| (e.class_label.clone(), Vec::new()))
                .1
                .push(pair);
        }
        groups
            .into_values()
            .map(|(label, items)| ClassDataset::new(&label, split, self.scale, items))
            .collect()
    }
}

/// Writes the datasets as PNGs under `dir` plus a `dataset.toml` manifest; returns the manifest path.
pub fn write_datasets<T: Scalar>(datasets: &[&ClassDataset<T>], dir: &Path) -> Result<PathBuf> {
    let Some(first) = datasets.first() else {
        bail!(Data, "nothing to write");
    };
    let mut manifest = DatasetManifest {
        scale: first.scale,
        entries: Vec::new(),
    };
    for ds in datasets {
        let sub = PathBuf::from(&ds.class_label).join(ds.split.as_str());
        for item in &ds.items {
            let hr = sub.join(format!("{}_hr.png", item.id));
            let lr = sub.join(format!("{}_lr.png", item.id));
            save_image(&item.hr, &dir.join(&hr))?;
            save_image(&item.lr, &dir.join(&lr))?;
            manifest.entries.push(ManifestEntry {
                class_label: ds.class_label.clone(),
                split: ds.split,
                id: item.id.clone(),
                hr,
                lr,
            });
        }
    }
    let path = dir.join("dataset.toml");
    manifest.write(&path)?;
    Ok(path)
}
