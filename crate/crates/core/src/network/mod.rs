//! Network assembly: a conv backbone, one shared RoI pooling layer, a shared
//! `fc6`, and per-task `fc7`/`fc8` heads.
//!
//! Parameter paths:
//!
//! ```text
//! backbone/conv{i}/{weights,bias}
//! shared/fc6/{weights,bias}
//! head-{event,rigid,nonrigid}/{fc7,fc8}/{weights,bias}
//! ```

mod checkpoint;
mod forward;
mod spec;

pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{ForwardPass, LossOutput, TaskOutput, TaskRois, TaskTarget};
pub use spec::{BackboneSpec, ConvStage, HeadSpec, HiddenInit, InitSpec, NetworkSpec, Task, NONRIGID_CLASSES, RIGID_CLASSES};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvParams, FcParams};
use crate::tensor::{gaussian_init, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T = f32> {
    pub spec: HeadSpec,
    pub fc7: FcParams<T>,
    pub fc8: FcParams<T>,
}

/// Per-channel input normalization measured on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    /// Applies `(x - mean) / std` to a `[C, H, W]` or `[N, C, H, W]` tensor.
    pub fn apply<T: Scalar>(&self, x: &mut Tensor<T>) -> Result<()> {
        let c = self.mean.len();
        let (channels, plane) = match x.shape() {
            [ch, h, w] => (*ch, h * w),
            [_, ch, h, w] => (*ch, h * w),
            s => return Err(Error::invalid(format!("cannot normalize tensor of shape {s:?}"))),
        };
        if channels != c {
            return Err(Error::invalid(format!(
                "normalization has {c} channels, input has {channels}"
            )));
        }
        for (i, chunk) in x.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (T::from_f64(self.mean[ch] as f64), T::from_f64(self.std[ch] as f64));
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T = f32> {
    pub by_path: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.by_path.get(path)
    }

    pub(crate) fn accumulate(&mut self, path: String, g: Tensor<T>) -> Result<()> {
        match self.by_path.get_mut(&path) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.by_path.insert(path, g);
                Ok(())
            }
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.by_path.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    convs: Vec<ConvParams<T>>,
    fc6: FcParams<T>,
    heads: Vec<Head<T>>,
    norm: Option<ChannelNorm>,
}

fn fc_init<T: Scalar>(out_dim: usize, in_dim: usize, std: f64, rng: &mut Rng) -> Result<FcParams<T>> {
    FcParams::new(gaussian_init(&[out_dim, in_dim], 0.0, std, rng)?, Tensor::zeros(&[out_dim])?)
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network: conv, fc6 and fc7 weights from
    /// the `hidden` distribution, every fc8 from `N(0, fc8_std^2)`, biases zero.
    pub fn build(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let init = spec.init;
        let mut convs = Vec::with_capacity(spec.backbone.stages.len());
        let mut in_ch = spec.backbone.in_channels;
        for stage in &spec.backbone.stages {
            let w = gaussian_init(&[stage.out_ch, in_ch, stage.kernel, stage.kernel], 0.0, init.hidden.std(in_ch * stage.kernel * stage.kernel), rng)?;
            convs.push(ConvParams::new(w, Tensor::zeros(&[stage.out_ch])?, stage.stride, stage.pad)?);
            in_ch = stage.out_ch;
        }
        let fc6 = fc_init(spec.fc6_dim, spec.pooled_features(), init.hidden.std(spec.pooled_features()), rng)?;
        let mut heads = Vec::with_capacity(spec.heads.len());
        for h in &spec.heads {
            let fc7 = fc_init(h.fc7_dim, spec.fc6_dim, init.hidden.std(spec.fc6_dim), rng)?;
            let fc8 = fc_init(h.num_classes, h.fc7_dim, init.fc8_std, rng)?;
            heads.push(Head { spec: *h, fc7, fc8 });
        }
        Ok(Network {
            spec,
            convs,
            fc6,
            heads,
            norm: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn convs(&self) -> &[ConvParams<T>] {
        &self.convs
    }

    pub fn fc6(&self) -> &FcParams<T> {
        &self.fc6
    }

    pub fn head(&self, task: Task) -> Option<&Head<T>> {
        self.heads.iter().find(|h| h.spec.task == task)
    }

    pub fn heads(&self) -> &[Head<T>] {
        &self.heads
    }

    pub fn norm(&self) -> Option<&ChannelNorm> {
        self.norm.as_ref()
    }

    pub fn set_norm(&mut self, norm: Option<ChannelNorm>) {
        self.norm = norm;
    }

    /// All parameters in path order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("backbone/conv{}/weights", i + 1), &c.weights));
            out.push((format!("backbone/conv{}/bias", i + 1), &c.bias));
        }
        out.push(("shared/fc6/weights".into(), &self.fc6.weights));
        out.push(("shared/fc6/bias".into(), &self.fc6.bias));
        for h in &self.heads {
            let p = h.spec.task.head_prefix();
            out.push((format!("{p}fc7/weights"), &h.fc7.weights));
            out.push((format!("{p}fc7/bias"), &h.fc7.bias));
            out.push((format!("{p}fc8/weights"), &h.fc8.weights));
            out.push((format!("{p}fc8/bias"), &h.fc8.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("backbone/conv{}/weights", i + 1), &mut c.weights));
            out.push((format!("backbone/conv{}/bias", i + 1), &mut c.bias));
        }
        out.push(("shared/fc6/weights".into(), &mut self.fc6.weights));
        out.push(("shared/fc6/bias".into(), &mut self.fc6.bias));
        for h in &mut self.heads {
            let p = h.spec.task.head_prefix();
            out.push((format!("{p}fc7/weights"), &mut h.fc7.weights));
            out.push((format!("{p}fc7/bias"), &mut h.fc7.bias));
            out.push((format!("{p}fc8/weights"), &mut h.fc8.weights));
            out.push((format!("{p}fc8/bias"), &mut h.fc8.bias));
        }
        out
    }

    pub fn param_paths(&self) -> Vec<String> {
        self.params().into_iter().map(|(p, _)| p).collect()
    }

    pub fn param(&self, path: &str) -> Option<&Tensor<T>> {
        self.params().into_iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.params_mut().into_iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies backbone and `fc6` parameters (and input normalization) from
    /// `other`, leaving heads at their initial values. This is the warm
    /// start between optimization stages. Returns the copied paths.
    pub fn transfer_shared_from<U: Scalar>(&mut self, other: &Network<U>) -> Result<Vec<String>> {
        if self.spec.backbone != other.spec.backbone || self.spec.roi_pool != other.spec.roi_pool || self.spec.fc6_dim != other.spec.fc6_dim {
            return Err(Error::invalid(
                "cannot transfer shared layers between networks with different backbone, pooling or fc6",
            ));
        }
        let src: BTreeMap<String, &Tensor<U>> = other
            .params()
            .into_iter()
            .filter(|(p, _)| p.starts_with("backbone/") || p.starts_with("shared/"))
            .collect();
        let mut copied = Vec::new();
        for (path, dst) in self.params_mut() {
            if let Some(s) = src.get(&path) {
                *dst = s.cast();
                copied.push(path);
            }
        }
        self.norm = other.norm.clone();
        Ok(copied)
    }

    /// Same network with a different element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weights: c.weights.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                    pad: c.pad,
                })
                .collect(),
            fc6: FcParams {
                weights: self.fc6.weights.cast(),
                bias: self.fc6.bias.cast(),
            },
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    spec: h.spec,
                    fc7: FcParams {
                        weights: h.fc7.weights.cast(),
                        bias: h.fc7.bias.cast(),
                    },
                    fc8: FcParams {
                        weights: h.fc8.weights.cast(),
                        bias: h.fc8.bias.cast(),
                    },
                })
                .collect(),
            norm: self.norm.clone(),
        }
    }

    /// Replaces parameters from a path map. Every path of the network must
    /// be present with a matching shape.
    pub(crate) fn assign_params(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (path, dst) in self.params_mut() {
            let src = tensors
                .get(&path)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{path}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{path}` has shape {:?}, network expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
