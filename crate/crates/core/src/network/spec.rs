use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::RoiPoolSpec;

/// The three streams of the unified network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Event,
    Rigid,
    #[serde(rename = "nonrigid")]
    NonRigid,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Event, Task::Rigid, Task::NonRigid];

    pub fn name(self) -> &'static str {
        match self {
            Task::Event => "event",
            Task::Rigid => "rigid",
            Task::NonRigid => "nonrigid",
        }
    }

    /// Parameter-path prefix of this task's head, e.g. `head-event/`.
    pub fn head_prefix(self) -> String {
        format!("head-{}/", self.name())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "event" => Ok(Task::Event),
            "rigid" => Ok(Task::Rigid),
            "nonrigid" | "non-rigid" => Ok(Task::NonRigid),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (expected event, rigid or nonrigid)"
            ))),
        }
    }
}

/// One conv stage: conv -> ReLU -> optional `pool x pool` max pool with
/// stride `pool`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default)]
    pub pool: Option<usize>,
}

impl ConvStage {
    pub const fn new(out_ch: usize, kernel: usize, stride: usize, pad: usize, pool: Option<usize>) -> Self {
        ConvStage {
            out_ch,
            kernel,
            stride,
            pad,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
}

impl BackboneSpec {
    /// Three 3x3 conv stages (16, 32, 64 channels), each followed by a 2x2
    /// pool. Downsamples by 8.
    pub fn tiny() -> Self {
        BackboneSpec {
            in_channels: 3,
            stages: vec![
                ConvStage::new(16, 3, 1, 1, Some(2)),
                ConvStage::new(32, 3, 1, 1, Some(2)),
                ConvStage::new(64, 3, 1, 1, Some(2)),
            ],
        }
    }

    /// Five conv stages in the classic layout (large strided first kernel,
    /// pools after conv1, conv2 and conv5) at reduced width. Downsamples by 16.
    pub fn alexnet_like() -> Self {
        BackboneSpec {
            in_channels: 3,
            stages: vec![
                ConvStage::new(32, 5, 2, 2, Some(2)),
                ConvStage::new(64, 5, 1, 2, Some(2)),
                ConvStage::new(96, 3, 1, 1, None),
                ConvStage::new(96, 3, 1, 1, None),
                ConvStage::new(64, 3, 1, 1, Some(2)),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "alexnet-like" | "alexnet" => Ok(Self::alexnet_like()),
            other => Err(Error::config(format!(
                "unknown backbone preset `{other}` (expected tiny or alexnet-like)"
            ))),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_ch)
    }

    /// Product of conv strides and pool strides; must be a power of two.
    pub fn downsample(&self) -> Result<usize> {
        let f: usize = self
            .stages
            .iter()
            .map(|s| s.stride * s.pool.unwrap_or(1))
            .product();
        if !f.is_power_of_two() {
            return Err(Error::invalid(format!(
                "backbone downsampling factor {f} is not a power of two"
            )));
        }
        Ok(f)
    }

    pub fn spatial_scale(&self) -> Result<f64> {
        Ok(1.0 / self.downsample()? as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() {
            return Err(Error::invalid("backbone needs input channels and at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_ch == 0 || s.kernel == 0 || s.stride == 0 || s.pool == Some(0) {
                return Err(Error::invalid(format!("backbone stage {} has a zero extent", i + 1)));
            }
        }
        self.downsample().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    pub fc7_dim: usize,
    pub num_classes: usize,
}

/// Number of rigid object classes (police, helmet, car).
pub const RIGID_CLASSES: usize = 3;
/// Number of non-rigid object classes (fire, smoke).
pub const NONRIGID_CLASSES: usize = 2;

impl HeadSpec {
    /// Head with the standard class count for `task`: 2 event classes,
    /// rigid and non-rigid classes plus background.
    pub fn standard(task: Task, fc7_dim: usize) -> Self {
        let num_classes = match task {
            Task::Event => 2,
            Task::Rigid => RIGID_CLASSES + 1,
            Task::NonRigid => NONRIGID_CLASSES + 1,
        };
        HeadSpec {
            task,
            fc7_dim,
            num_classes,
        }
    }
}

/// Weight distribution of the conv, fc6 and fc7 layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenInit {
    /// `N(0, 2 / fan_in)`.
    He,
    /// `N(0, std^2)`.
    Gaussian(f64),
}

impl HiddenInit {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            HiddenInit::He => (2.0 / fan_in.max(1) as f64).sqrt(),
            HiddenInit::Gaussian(s) => s,
        }
    }
}

/// Initial weight scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub hidden: HiddenInit,
    /// Final classification layer of every head.
    pub fc8_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            hidden: HiddenInit::He,
            fc8_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub backbone: BackboneSpec,
    pub fc6_dim: usize,
    pub heads: Vec<HeadSpec>,
    pub roi_pool: RoiPoolSpec,
    #[serde(default)]
    pub init: InitSpec,
}

impl NetworkSpec {
    /// Backbone + shared fc6 + the given standard heads, pooled to a square
    /// `pooled x pooled` grid.
    pub fn with_heads(backbone: BackboneSpec, fc6_dim: usize, fc7_dim: usize, pooled: usize, tasks: &[Task]) -> Result<Self> {
        let spatial_scale = backbone.spatial_scale()?;
        let spec = NetworkSpec {
            backbone,
            fc6_dim,
            heads: tasks.iter().map(|&t| HeadSpec::standard(t, fc7_dim)).collect(),
            roi_pool: RoiPoolSpec {
                out_h: pooled,
                out_w: pooled,
                spatial_scale,
            },
            init: InitSpec::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale unified network: tiny backbone, 6x6 pooling, all three heads.
    pub fn iod_tiny() -> Self {
        Self::with_heads(BackboneSpec::tiny(), 128, 64, 6, &Task::ALL).expect("preset is valid")
    }

    /// Single-task event network on the tiny backbone.
    pub fn event_tiny() -> Self {
        Self::with_heads(BackboneSpec::tiny(), 128, 64, 6, &[Task::Event]).expect("preset is valid")
    }

    pub fn head(&self, task: Task) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.task == task)
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.head(task).is_some()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads.iter().map(|h| h.task).collect()
    }

    pub fn pooled_features(&self) -> usize {
        self.backbone.out_channels() * self.roi_pool.out_h * self.roi_pool.out_w
    }

    /// Smallest image side for which whole-image RoI pooling is well defined:
    /// the downsampling factor times the pooled grid size.
    pub fn min_input_size(&self) -> usize {
        let ds = self.backbone.downsample().unwrap_or(1);
        ds * self.roi_pool.out_h.max(self.roi_pool.out_w)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.roi_pool.validate()?;
        let expect = self.backbone.spatial_scale()?;
        if (self.roi_pool.spatial_scale - expect).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "roi_pool spatial_scale {} does not match backbone scale {expect}",
                self.roi_pool.spatial_scale
            )));
        }
        if self.fc6_dim == 0 {
            return Err(Error::invalid("fc6_dim must be positive"));
        }
        if self.heads.is_empty() {
            return Err(Error::invalid("network needs at least one head"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.num_classes < 2 || h.fc7_dim == 0 {
                return Err(Error::invalid(format!(
                    "head {} needs fc7_dim > 0 and at least 2 classes",
                    h.task
                )));
            }
            if self.heads[..i].iter().any(|o| o.task == h.task) {
                return Err(Error::invalid(format!("duplicate {} head", h.task)));
            }
        }
        let hidden_ok = match self.init.hidden {
            HiddenInit::He => true,
            HiddenInit::Gaussian(s) => s >= 0.0,
        };
        if !(hidden_ok && self.init.fc8_std >= 0.0) {
            return Err(Error::invalid("init standard deviations must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        assert_eq!(BackboneSpec::tiny().downsample().unwrap(), 8);
        assert_eq!(BackboneSpec::alexnet_like().downsample().unwrap(), 16);
        assert_eq!(NetworkSpec::iod_tiny().min_input_size(), 48);
        assert_eq!(NetworkSpec::iod_tiny().heads.len(), 3);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mut b = BackboneSpec::tiny();
        b.stages[0].pool = Some(3);
        assert!(b.validate().is_err());
    }

    #[test]
    fn rejects_inconsistent_scale_and_duplicate_heads() {
        let mut s = NetworkSpec::iod_tiny();
        s.roi_pool.spatial_scale = 0.25;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::iod_tiny();
        s.heads.push(HeadSpec::standard(Task::Event, 8));
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::iod_tiny();
        s.heads[0].num_classes = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!("dog".parse::<Task>().is_err());
    }
}
