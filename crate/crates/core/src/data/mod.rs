//! Datasets: the JSON manifest, image files, and the synthetic generators.

pub mod imageio;
mod manifest;
mod synth;

pub use manifest::{load_manifest, Category, DatasetManifest, EventLabel, ManifestEntry, MANIFEST_VERSION};
pub use synth::{generate_pretrain, generate_synthetic, SyntheticDataset, SyntheticSpec, PRETRAIN_CLASSES};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{ChannelNorm, Task};
use crate::roi::BBox;
use crate::tensor::{Rng, Tensor};

/// One decoded image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub event: EventLabel,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub rigid: Vec<BBox>,
    pub nonrigid: Vec<BBox>,
}

impl Sample {
    pub fn new(entry: &ManifestEntry, image: Tensor<f32>) -> Self {
        Sample {
            id: entry.image.clone(),
            event: entry.event,
            image,
            rigid: entry.gt_boxes(Task::Rigid),
            nonrigid: entry.gt_boxes(Task::NonRigid),
        }
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    /// Ground truth of a detection head; empty for the event task.
    pub fn gt(&self, task: Task) -> &[BBox] {
        match task {
            Task::Rigid => &self.rigid,
            Task::NonRigid => &self.nonrigid,
            Task::Event => &[],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Accepts either a manifest file or a directory containing `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

impl Dataset {
    /// Decodes every image of the manifest up front, so a missing file or a
    /// box outside its image fails here rather than during training.
    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let path = base.join(&e.image);
            if !path.is_file() {
                return Err(Error::schema(Some(i), "image", format!("file `{}` does not exist", path.display())));
            }
            let image = imageio::read_image(&path)?;
            manifest.check_entry_size(i, image.shape()[2], image.shape()[1])?;
            samples.push(Sample::new(e, image));
        }
        Ok(Dataset { samples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mp = manifest_path(path.as_ref());
        let manifest = load_manifest(&mp)?;
        Self::from_manifest(&manifest, mp.parent().unwrap_or(Path::new(".")))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices_of(&self, label: EventLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].event == label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stratified split: `train_frac` of each event class goes to the first
    /// set, in shuffled order.
    pub fn split(&self, train_frac: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for label in [EventLabel::Benign, EventLabel::Malicious] {
            let mut idx = self.indices_of(label);
            rng.shuffle(&mut idx);
            let k = (idx.len() as f64 * train_frac).round() as usize;
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_norm(&self) -> ChannelNorm {
        channel_norm(self.samples.iter().map(|s| &s.image))
    }
}

/// Per-channel mean and standard deviation over `[3, H, W]` images. A
/// channel with zero variance gets unit scale.
pub fn channel_norm<'a>(images: impl Iterator<Item = &'a Tensor<f32>>) -> ChannelNorm {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        let plane = img.shape()[1] * img.shape()[2];
        for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
            for &v in chunk {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        n += plane;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    ChannelNorm {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    }
}
