use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::config::SamplingConfig;
use crate::data::{Dataset, EventLabel, Sample};
use crate::error::{Error, Result};
use crate::layers::BatchRoi;
use crate::network::{ChannelNorm, Network, Task, TaskRois};
use crate::roi::{grid_proposals, label_rois, load_proposals, multiscale_windows, sample_rois, BBox, LabeledRoi, ProposalSet};
use crate::tensor::{Rng, Scalar, Tensor};

/// Rigid-object proposals: a precomputed file or the dense grid stand-in.
#[derive(Clone, Debug)]
pub enum Proposals {
    Grid {
        scales: Vec<f64>,
        stride: f64,
        cache: HashMap<(usize, usize), Vec<BBox>>,
    },
    File(ProposalSet),
}

impl Proposals {
    pub fn from_config(cfg: &SamplingConfig, base: &Path) -> Result<Self> {
        match &cfg.proposals {
            Some(p) => Ok(Proposals::File(load_proposals(base.join(p))?)),
            None => Ok(Proposals::grid(&cfg.proposal_scales, cfg.proposal_stride)),
        }
    }

    pub fn grid(scales: &[f64], stride: f64) -> Self {
        Proposals::Grid {
            scales: scales.to_vec(),
            stride,
            cache: HashMap::new(),
        }
    }

    /// Proposals for one image, clamped to its bounds.
    pub fn for_sample(&mut self, s: &Sample) -> Result<Vec<BBox>> {
        let (w, h) = (s.width(), s.height());
        match self {
            Proposals::Grid { scales, stride, cache } => {
                if let Some(b) = cache.get(&(w, h)) {
                    return Ok(b.clone());
                }
                let b = grid_proposals(w, h, scales, *stride)?;
                cache.insert((w, h), b.clone());
                Ok(b)
            }
            Proposals::File(set) => {
                // Proposal rows may name the image by its manifest path or its file stem.
                let stem = Path::new(&s.id).file_stem().and_then(|x| x.to_str()).unwrap_or(&s.id).to_string();
                let key = if set.get(&s.id).is_some() { s.id.clone() } else { stem };
                set.clamp_to(&key, w, h);
                Ok(set.get(&key).map(<[BBox]>::to_vec).unwrap_or_default())
            }
        }
    }
}

/// One training iteration's images and labeled RoIs, before pixel data is
/// gathered. Image 0 is benign and image 1 malicious.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub images: [usize; 2],
    pub events: [EventLabel; 2],
    /// `(batch index, roi)` pairs.
    pub rigid: Vec<(usize, LabeledRoi)>,
    pub nonrigid: Vec<(usize, LabeledRoi)>,
}

impl BatchPlan {
    /// RoI counts `(event, rigid, nonrigid)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (2, self.rigid.len(), self.nonrigid.len())
    }
}

/// Draws one benign and one malicious image uniformly, samples
/// `rois_per_image` labeled rigid proposals per image, and labels the five
/// multi-scale windows of each image for the non-rigid stream.
pub fn compose_batch(ds: &Dataset, proposals: &mut Proposals, cfg: &SamplingConfig, rng: &mut Rng) -> Result<BatchPlan> {
    let benign = ds.indices_of(EventLabel::Benign);
    let malicious = ds.indices_of(EventLabel::Malicious);
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::config(format!(
            "training needs both event classes ({} benign, {} malicious images)",
            benign.len(),
            malicious.len()
        )));
    }
    let images = [benign[rng.below(benign.len())], malicious[rng.below(malicious.len())]];
    let mut rigid = Vec::new();
    let mut nonrigid = Vec::new();
    for (b, &idx) in images.iter().enumerate() {
        let s = &ds.samples[idx];
        let mut pool = proposals.for_sample(s)?;
        if cfg.include_gt {
            pool.extend(s.rigid.iter().map(|g| BBox { class_id: None, ..*g }));
        }
        if pool.is_empty() {
            pool.push(BBox::new(0.0, 0.0, s.width() as f64, s.height() as f64));
        }
        let labeled = label_rois(&pool, &s.rigid, cfg.rigid_iou);
        let sampled = sample_rois(&labeled, cfg.rois_per_image, cfg.fg_fraction, rng);
        rigid.extend(sampled.into_iter().map(|r| (b, r)));

        let windows = multiscale_windows(s.width(), s.height())?;
        nonrigid.extend(label_rois(&windows, &s.nonrigid, cfg.nonrigid_iou).into_iter().map(|r| (b, r)));
    }
    Ok(BatchPlan {
        images,
        events: [EventLabel::Benign, EventLabel::Malicious],
        rigid,
        nonrigid,
    })
}

/// Pixel data, RoIs and labels ready for [`Network::forward_train`].
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    pub images: Tensor<T>,
    pub rois: TaskRois,
    pub labels: BTreeMap<Task, Vec<usize>>,
}

/// Normalizes and zero-pads images to a common size, then stacks them.
pub fn stack_images<T: Scalar>(images: &[&Tensor<f32>], norm: Option<&ChannelNorm>) -> Result<Tensor<T>> {
    let c = images.first().map(|t| t.shape()[0]).ok_or_else(|| Error::invalid("empty image batch"))?;
    let h = images.iter().map(|t| t.shape()[1]).max().unwrap_or(0);
    let w = images.iter().map(|t| t.shape()[2]).max().unwrap_or(0);
    let mut out = Tensor::<T>::zeros(&[images.len(), c, h, w])?;
    for (n, img) in images.iter().enumerate() {
        let mut x: Tensor<T> = (*img).cast();
        if let Some(norm) = norm {
            norm.apply(&mut x)?;
        }
        let (ih, iw) = (img.shape()[1], img.shape()[2]);
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..ih {
                let src = &x.data()[(ch * ih + y) * iw..][..iw];
                dst[((n * c + ch) * h + y) * w..][..iw].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

fn to_batch_rois(list: &[(usize, LabeledRoi)]) -> (Vec<BatchRoi>, Vec<usize>) {
    list.iter()
        .map(|(b, r)| (BatchRoi::new(*b, r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2), r.label))
        .unzip()
}

impl BatchPlan {
    /// Gathers the planned images and the RoIs of the `tasks` streams.
    pub fn materialize<T: Scalar>(&self, ds: &Dataset, norm: Option<&ChannelNorm>, tasks: &[Task]) -> Result<Batch<T>> {
        let samples: Vec<&Sample> = self.images.iter().map(|&i| &ds.samples[i]).collect();
        let images = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), norm)?;
        let mut rois = TaskRois::new();
        let mut labels = BTreeMap::new();
        for &task in tasks {
            let (r, l) = match task {
                Task::Event => (
                    Network::<T>::whole_image_rois(&samples.iter().map(|s| (s.width(), s.height())).collect::<Vec<_>>()),
                    self.events.iter().map(|e| e.index()).collect(),
                ),
                Task::Rigid => to_batch_rois(&self.rigid),
                Task::NonRigid => to_batch_rois(&self.nonrigid),
            };
            rois.insert(task, r);
            labels.insert(task, l);
        }
        Ok(Batch { images, rois, labels })
    }
}
