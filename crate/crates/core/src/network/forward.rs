use std::collections::BTreeMap;

use super::{Gradients, Network, Task};
use crate::error::{Error, Result};
use crate::layers::{
    maxpool2d, maxpool2d_backward, relu, relu_backward, roi_pool, roi_pool_backward, softmax_cross_entropy,
    softmax_rows, BatchRoi, FcParams,
};
use crate::tensor::{Scalar, Tensor};

/// RoIs per task for one batch.
pub type TaskRois = BTreeMap<Task, Vec<BatchRoi>>;

/// Labels and loss weight for one task stream.
#[derive(Clone, Copy, Debug)]
pub struct TaskTarget<'a, T> {
    pub labels: &'a [usize],
    pub weight: T,
}

struct StageCache<T> {
    input: Tensor<T>,
    pre_relu: Tensor<T>,
    pool_argmax: Option<Vec<usize>>,
}

struct StreamCache<T> {
    argmax: Vec<Option<usize>>,
    pooled: Tensor<T>,
    fc6_pre: Tensor<T>,
    fc6_act: Tensor<T>,
    fc7_pre: Tensor<T>,
    fc7_act: Tensor<T>,
    logits: Tensor<T>,
}

/// Activations recorded by [`Network::forward_train`]. Borrowing the
/// network keeps its parameters fixed until the backward pass is done.
pub struct ForwardPass<'n, T: Scalar> {
    net: &'n Network<T>,
    stages: Vec<StageCache<T>>,
    feat: Tensor<T>,
    streams: BTreeMap<Task, StreamCache<T>>,
    ops: u64,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub per_task: BTreeMap<Task, T>,
    /// Weighted sum of the per-task losses.
    pub total: T,
    pub grads: Gradients<T>,
}

/// Output of a single stream at inference.
#[derive(Clone, Debug)]
pub struct TaskOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// Post-ReLU `fc7` activations, one row per RoI.
    pub fc7: Tensor<T>,
    /// Multiply-accumulates spent.
    pub ops: u64,
}

struct Backbone<T> {
    feat: Tensor<T>,
    stages: Vec<StageCache<T>>,
    ops: u64,
}

impl<T: Scalar> Network<T> {
    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("image batch must be [N, C, H, W], got {s:?}")));
        }
        if s[1] != self.spec.backbone.in_channels {
            return Err(Error::invalid(format!(
                "image batch has {} channels, network expects {}",
                s[1], self.spec.backbone.in_channels
            )));
        }
        let min = self.spec.min_input_size();
        if s[2] < min || s[3] < min {
            return Err(Error::invalid(format!(
                "image {}x{} (HxW) is below the minimum input size {min}x{min}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    fn run_backbone(&self, images: &Tensor<T>, keep: bool) -> Result<Backbone<T>> {
        let mut x = images.clone();
        let mut stages = Vec::new();
        let mut ops = 0;
        for (conv, stage) in self.convs.iter().zip(&self.spec.backbone.stages) {
            let s = x.shape();
            ops += conv.macs(s[0], s[2], s[3]);
            let pre = conv.forward(&x)?;
            let act = relu(&pre);
            let (next, argmax) = match stage.pool {
                Some(k) => {
                    let p = maxpool2d(&act, k, k)?;
                    (p.output, Some(p.argmax))
                }
                None => (act, None),
            };
            if keep {
                stages.push(StageCache {
                    input: x,
                    pre_relu: pre,
                    pool_argmax: argmax,
                });
            }
            x = next;
        }
        Ok(Backbone { feat: x, stages, ops })
    }

    fn run_stream(&self, task: Task, feat: &Tensor<T>, rois: &[BatchRoi]) -> Result<(StreamCache<T>, u64)> {
        let head = self
            .head(task)
            .ok_or_else(|| Error::invalid(format!("network has no {task} head")))?;
        let pooled = roi_pool(feat, rois, &self.spec.roi_pool)?;
        let r = rois.len();
        let flat = pooled.output.reshape(&[r, self.spec.pooled_features()])?;
        let fc6_pre = self.fc6.forward(&flat)?;
        let fc6_act = relu(&fc6_pre);
        let fc7_pre = head.fc7.forward(&fc6_act)?;
        let fc7_act = relu(&fc7_pre);
        let logits = head.fc8.forward(&fc7_act)?;
        let ops = self.fc6.macs(r) + head.fc7.macs(r) + head.fc8.macs(r);
        Ok((
            StreamCache {
                argmax: pooled.argmax,
                pooled: flat,
                fc6_pre,
                fc6_act,
                fc7_pre,
                fc7_act,
                logits,
            },
            ops,
        ))
    }

    /// Whole-image RoI for each image of a batch, given per-image `(width, height)`.
    pub fn whole_image_rois(sizes: &[(usize, usize)]) -> Vec<BatchRoi> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &(w, h))| BatchRoi::new(i, 0.0, 0.0, w as f64, h as f64))
            .collect()
    }

    /// Training forward pass: one backbone pass over the batch, then one RoI
    /// pooling call and one head per task present in `rois`. Tasks absent
    /// from `rois` are skipped; an empty RoI list for a task is an error.
    /// The event stream takes exactly one RoI per image.
    pub fn forward_train(&self, images: &Tensor<T>, rois: &TaskRois) -> Result<ForwardPass<'_, T>> {
        self.check_images(images)?;
        if rois.is_empty() {
            return Err(Error::invalid("forward_train needs RoIs for at least one task"));
        }
        let n = images.shape()[0];
        for (&task, list) in rois {
            if !self.spec.has_head(task) {
                return Err(Error::invalid(format!("RoIs given for {task}, but the network has no {task} head")));
            }
            if list.is_empty() {
                return Err(Error::invalid(format!("missing RoIs for the {task} head")));
            }
        }
        if let Some(ev) = rois.get(&Task::Event) {
            let mut idx: Vec<usize> = ev.iter().map(|r| r.batch_idx).collect();
            idx.sort_unstable();
            if idx != (0..n).collect::<Vec<_>>() {
                return Err(Error::invalid(format!(
                    "event stream needs exactly one whole-image RoI per image ({n} images, {} RoIs)",
                    ev.len()
                )));
            }
        }
        let bb = self.run_backbone(images, true)?;
        let mut ops = bb.ops;
        let mut streams = BTreeMap::new();
        for (&task, list) in rois {
            let (cache, o) = self.run_stream(task, &bb.feat, list)?;
            ops += o;
            streams.insert(task, cache);
        }
        Ok(ForwardPass {
            net: self,
            stages: bb.stages,
            feat: bb.feat,
            streams,
            ops,
        })
    }

    /// Runs the backbone and a single head without recording activations.
    pub fn forward_task(&self, images: &Tensor<T>, task: Task, rois: &[BatchRoi]) -> Result<TaskOutput<T>> {
        self.check_images(images)?;
        if rois.is_empty() {
            return Err(Error::invalid(format!("missing RoIs for the {task} head")));
        }
        let bb = self.run_backbone(images, false)?;
        let (cache, o) = self.run_stream(task, &bb.feat, rois)?;
        Ok(TaskOutput {
            probs: softmax_rows(&cache.logits)?,
            logits: cache.logits,
            fc7: cache.fc7_act,
            ops: bb.ops + o,
        })
    }

    fn single_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match image.shape() {
            [c, h, w] => image.clone().reshape(&[1, *c, *h, *w]),
            [1, _, _, _] => Ok(image.clone()),
            s => Err(Error::invalid(format!("expected one [C, H, W] image, got {s:?}"))),
        }
    }

    /// Event-stream output for one image with the whole image as its RoI.
    /// Detection heads are never evaluated.
    pub fn infer_event(&self, image: &Tensor<T>) -> Result<TaskOutput<T>> {
        if !self.spec.has_head(Task::Event) {
            return Err(Error::invalid("inference needs an event head"));
        }
        let batch = self.single_image(image)?;
        let s = batch.shape();
        let rois = Self::whole_image_rois(&[(s[3], s[2])]);
        self.forward_task(&batch, Task::Event, &rois)
    }

    /// Event class probabilities (benign, malicious) for one image of any
    /// size at or above [`super::NetworkSpec::min_input_size`].
    pub fn forward_infer(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.infer_event(image)?.probs.into_data())
    }
}

impl<'n, T: Scalar> ForwardPass<'n, T> {
    pub fn logits(&self, task: Task) -> Option<&Tensor<T>> {
        self.streams.get(&task).map(|s| &s.logits)
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.streams.keys().copied().collect()
    }

    /// Multiply-accumulates spent in this pass.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn feature_map(&self) -> &Tensor<T> {
        &self.feat
    }

    /// Backpropagates the given logit gradients. Shared parameters (backbone
    /// and fc6) receive the sum of the contributions of every stream; head
    /// parameters receive only their own stream's. Parameters untouched by
    /// any stream get zero gradients.
    pub fn backward(&self, dlogits: &BTreeMap<Task, Tensor<T>>) -> Result<Gradients<T>> {
        let net = self.net;
        let mut grads = Gradients::default();
        for (path, t) in net.params() {
            grads.by_path.insert(path, t.zeros_like());
        }
        let mut dfeat = self.feat.zeros_like();
        for (&task, dl) in dlogits {
            let cache = self
                .streams
                .get(&task)
                .ok_or_else(|| Error::State(format!("no forward activations for the {task} stream")))?;
            if dl.shape() != cache.logits.shape() {
                return Err(Error::invalid(format!(
                    "{task} logit gradient shape {:?} does not match logits {:?}",
                    dl.shape(),
                    cache.logits.shape()
                )));
            }
            let head = net.head(task).expect("stream exists only for configured heads");
            let prefix = task.head_prefix();
            let fc_back = |p: &FcParams<T>, x: &Tensor<T>, dy: &Tensor<T>, name: &str, g: &mut Gradients<T>| {
                let r = p.backward(x, dy)?;
                g.accumulate(format!("{name}/weights"), r.dweights)?;
                g.accumulate(format!("{name}/bias"), r.dbias)?;
                Ok::<_, Error>(r.dx)
            };
            let d = fc_back(&head.fc8, &cache.fc7_act, dl, &format!("{prefix}fc8"), &mut grads)?;
            let d = relu_backward(&cache.fc7_pre, &d)?;
            let d = fc_back(&head.fc7, &cache.fc6_act, &d, &format!("{prefix}fc7"), &mut grads)?;
            let d = relu_backward(&cache.fc6_pre, &d)?;
            let d = fc_back(&net.fc6, &cache.pooled, &d, "shared/fc6", &mut grads)?;
            dfeat.add_assign(&roi_pool_backward(self.feat.shape(), &cache.argmax, &d)?)?;
        }

        let mut d = dfeat;
        for (i, (stage, conv)) in self.stages.iter().zip(&net.convs).enumerate().rev() {
            if let Some(argmax) = &stage.pool_argmax {
                d = maxpool2d_backward(stage.pre_relu.shape(), argmax, &d)?;
            }
            d = relu_backward(&stage.pre_relu, &d)?;
            let r = conv.backward(&stage.input, &d)?;
            grads.accumulate(format!("backbone/conv{}/weights", i + 1), r.dweights)?;
            grads.accumulate(format!("backbone/conv{}/bias", i + 1), r.dbias)?;
            d = r.dx;
        }
        Ok(grads)
    }

    /// Softmax cross-entropy per stream, weighted sum, and gradients of that
    /// sum. Streams without a target contribute nothing.
    pub fn loss_backward(&self, targets: &BTreeMap<Task, TaskTarget<'_, T>>) -> Result<LossOutput<T>> {
        let mut per_task = BTreeMap::new();
        let mut total = T::zero();
        let mut dlogits = BTreeMap::new();
        for (&task, target) in targets {
            let logits = self
                .logits(task)
                .ok_or_else(|| Error::State(format!("backward for {task} without a forward pass of that stream")))?;
            let out = softmax_cross_entropy(logits, target.labels)?;
            per_task.insert(task, out.loss);
            total = total + target.weight * out.loss;
            dlogits.insert(task, out.dlogits.map(|g| g * target.weight));
        }
        let grads = self.backward(&dlogits)?;
        Ok(LossOutput { per_task, total, grads })
    }
}
