use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fusion::ImageScore;
use super::metrics::{average_precision, detection_map, Detection, GroundTruth, RankedPrediction};
use crate::data::{Category, Dataset, EventLabel, Sample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::network::{Network, Task};
use crate::roi::{label_rois, multiscale_windows, nms, BBox};
use crate::tensor::{Scalar, Tensor};
use crate::train::{stack_images, Proposals};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Detection match threshold for the rigid head.
    pub rigid_iou: f64,
    /// Match threshold for non-rigid detection and RoI labels.
    pub nonrigid_iou: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rigid_iou: 0.5,
            nonrigid_iou: 0.2,
            nms_iou: 0.3,
            max_detections: 100,
        }
    }
}

/// Metric report. Fields of heads the network lacks are null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub images: usize,
    pub ap_event: Option<f64>,
    pub map_rigid: Option<f64>,
    pub ap_rigid: BTreeMap<String, f64>,
    /// Mean over fire and smoke of the AP of classifying the five windows
    /// of each image against their IoU labels.
    pub ap_nonrigid: Option<f64>,
    pub ap_nonrigid_classes: BTreeMap<String, f64>,
    /// Detection mAP over the windows, for comparison.
    pub map_nonrigid: Option<f64>,
    pub ap_nonrigid_detection: BTreeMap<String, f64>,
    /// Which non-rigid number is the headline one.
    pub nonrigid_metric: String,
    pub config: EvalConfig,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

fn prepare<T: Scalar>(net: &Network<T>, s: &Sample) -> Result<Tensor<T>> {
    stack_images(&[&s.image], net.norm())
}

/// Benign and malicious probabilities of every image.
pub fn event_scores<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<Vec<ImageScore>> {
    ds.samples
        .iter()
        .map(|s| {
            let p = net.forward_infer(&prepare(net, s)?)?;
            Ok(ImageScore {
                image_id: s.id.clone(),
                score_benign: p[0].as_f64(),
                score_malicious: p[1].as_f64(),
            })
        })
        .collect()
}

/// Post-ReLU event `fc7` activations of every image.
pub fn event_features<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.samples
        .iter()
        .map(|s| Ok(net.infer_event(&prepare(net, s)?)?.fc7.data().iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Runs one detection head over `boxes` and keeps, per class, the top
/// `max` boxes after NMS.
fn detect<T: Scalar>(net: &Network<T>, s: &Sample, task: Task, boxes: &[BBox], cfg: &EvalConfig) -> Result<Vec<Detection>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let probs = class_probs(net, s, task, boxes)?;
    let classes = probs.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for c in 1..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        for i in nms(boxes, &scores, cfg.nms_iou).into_iter().take(cfg.max_detections) {
            out.push(Detection {
                image_id: s.id.clone(),
                bbox: BBox { class_id: Some(c), score: Some(scores[i]), ..boxes[i] },
                class_id: c,
                score: scores[i],
            });
        }
    }
    Ok(out)
}

fn class_probs<T: Scalar>(net: &Network<T>, s: &Sample, task: Task, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
    let rois: Vec<_> = boxes
        .iter()
        .map(|b| crate::layers::BatchRoi::new(0, b.x1, b.y1, b.x2, b.y2))
        .collect();
    let out = net.forward_task(&prepare(net, s)?, task, &rois)?;
    let k = out.probs.shape()[1];
    Ok(out.probs.data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
}

fn ground_truth(ds: &Dataset, task: Task) -> GroundTruth {
    ds.samples
        .iter()
        .map(|s| {
            let mut per_class: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
            for b in s.gt(task) {
                per_class.entry(b.class_id.unwrap_or(0)).or_default().push(*b);
            }
            (s.id.clone(), per_class)
        })
        .collect()
}

fn class_names(task: Task, per_class: &BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
    per_class
        .iter()
        .map(|(&c, &ap)| {
            let name = Category::from_class(task, c).map_or_else(|| format!("class{c}"), |k| k.name().to_string());
            (name, ap)
        })
        .collect()
}

/// Mean AP over classes with at least one positive, or None if none has.
fn mean_defined(per_class: &BTreeMap<String, f64>) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64)
}

fn detection_metric(dets: &[Detection], gt: &GroundTruth, iou: f64) -> Result<Option<BTreeMap<usize, f64>>> {
    match detection_map(dets, gt, iou) {
        Ok(r) => Ok(Some(r.per_class)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates every head the network has on `ds`. Rigid detection runs on
/// `proposals`; non-rigid detection and classification on the five
/// multi-scale windows.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, proposals: &mut Proposals, cfg: &EvalConfig) -> Result<Report> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let spec = net.spec();
    let ap_event = if spec.has_head(Task::Event) {
        let preds: Vec<RankedPrediction> = event_scores(net, ds)?
            .iter()
            .zip(&ds.samples)
            .map(|(sc, s)| RankedPrediction::new(sc.score_malicious, s.event == EventLabel::Malicious))
            .collect();
        match average_precision(&preds) {
            Ok(ap) => Some(ap),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let mut ap_rigid = BTreeMap::new();
    if spec.has_head(Task::Rigid) {
        let mut dets = Vec::new();
        for s in &ds.samples {
            dets.extend(detect(net, s, Task::Rigid, &proposals.for_sample(s)?, cfg)?);
        }
        if let Some(pc) = detection_metric(&dets, &ground_truth(ds, Task::Rigid), cfg.rigid_iou)? {
            ap_rigid = class_names(Task::Rigid, &pc);
        }
    }

    let mut ap_cls = BTreeMap::new();
    let mut ap_det = BTreeMap::new();
    if spec.has_head(Task::NonRigid) {
        let mut dets = Vec::new();
        let mut ranked: BTreeMap<usize, Vec<RankedPrediction>> = BTreeMap::new();
        for s in &ds.samples {
            let windows = multiscale_windows(s.width(), s.height())?;
            let probs = class_probs(net, s, Task::NonRigid, &windows)?;
            let labels = label_rois(&windows, &s.nonrigid, cfg.nonrigid_iou);
            for (p, l) in probs.iter().zip(&labels) {
                for (c, &score) in p.iter().enumerate().skip(1) {
                    ranked.entry(c).or_default().push(RankedPrediction::new(score, l.label == c));
                }
            }
            dets.extend(detect(net, s, Task::NonRigid, &windows, cfg)?);
        }
        let mut per_class = BTreeMap::new();
        for (c, preds) in &ranked {
            if let Ok(ap) = average_precision(preds) {
                per_class.insert(*c, ap);
            }
        }
        ap_cls = class_names(Task::NonRigid, &per_class);
        if let Some(pc) = detection_metric(&dets, &ground_truth(ds, Task::NonRigid), cfg.nonrigid_iou)? {
            ap_det = class_names(Task::NonRigid, &pc);
        }
    }

    Ok(Report {
        images: ds.len(),
        ap_event,
        map_rigid: mean_defined(&ap_rigid),
        ap_rigid,
        ap_nonrigid: mean_defined(&ap_cls),
        ap_nonrigid_classes: ap_cls,
        map_nonrigid: mean_defined(&ap_det),
        ap_nonrigid_detection: ap_det,
        nonrigid_metric: "ap_nonrigid (window classification)".into(),
        config: cfg.clone(),
    })
}
