use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BackboneSpec, HeadSpec, HiddenInit, NetworkSpec, Task};
use crate::roi::{DEFAULT_PROPOSAL_SCALES, DEFAULT_PROPOSAL_STRIDE};

/// One optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub name: String,
    pub base_lr: f64,
    pub iterations: usize,
    pub step_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Parameter-path prefixes that are updated; empty means all.
    #[serde(default)]
    pub trainable: Vec<String>,
    pub active_heads: Vec<Task>,
}

fn default_gamma() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}

impl StageConfig {
    pub fn new(name: &str, base_lr: f64, iterations: usize, step_size: usize, active_heads: &[Task]) -> Self {
        StageConfig {
            name: name.to_string(),
            base_lr,
            iterations,
            step_size,
            gamma: default_gamma(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            trainable: Vec::new(),
            active_heads: active_heads.to_vec(),
        }
    }

    pub fn with_trainable(mut self, prefixes: &[&str]) -> Self {
        self.trainable = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("stage `{}`: {m}", self.name)));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.step_size == 0 {
            return bad("step_size must be positive".into());
        }
        if self.iterations > 0 && self.step_size > self.iterations {
            return bad(format!("step_size {} exceeds iterations {}", self.step_size, self.iterations));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if self.active_heads.is_empty() {
            return bad("active_heads is empty".into());
        }
        Ok(())
    }

    /// Whether the parameter at `path` is updated in this stage.
    pub fn trains(&self, path: &str) -> bool {
        self.trainable.is_empty() || self.trainable.iter().any(|p| path.starts_with(p.as_str()))
    }
}

/// Step-decay schedule: `base_lr * gamma^floor(iter / step_size)`.
pub fn lr_at(stage: &StageConfig, iter: usize) -> f64 {
    stage.base_lr * stage.gamma.powi((iter / stage.step_size.max(1)) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: String,
    pub fc6_dim: usize,
    pub fc7_dim: usize,
    pub pooled: usize,
    pub hidden_init: HiddenInit,
    pub fc8_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: "tiny".into(),
            fc6_dim: 128,
            fc7_dim: 64,
            pooled: 6,
            hidden_init: HiddenInit::He,
            fc8_std: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, tasks: &[Task]) -> Result<NetworkSpec> {
        let backbone = BackboneSpec::preset(&self.backbone)?;
        let mut spec = NetworkSpec::with_heads(backbone, self.fc6_dim, self.fc7_dim, self.pooled, tasks)
            .map_err(|e| Error::config(e.to_string()))?;
        spec.init.hidden = self.hidden_init;
        spec.init.fc8_std = self.fc8_std;
        spec.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(spec)
    }

    /// Single-head classifier with `classes` outputs for warm-start training.
    pub fn pretrain_spec(&self, classes: usize) -> Result<NetworkSpec> {
        let mut spec = self.spec(&[Task::Event])?;
        spec.heads = vec![HeadSpec {
            task: Task::Event,
            fc7_dim: self.fc7_dim,
            num_classes: classes,
        }];
        spec.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Rigid RoIs sampled per image.
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub rigid_iou: f64,
    pub nonrigid_iou: f64,
    pub proposal_scales: Vec<f64>,
    pub proposal_stride: f64,
    /// Proposal file; grid proposals are used when absent.
    pub proposals: Option<String>,
    /// Adds ground-truth boxes to the rigid proposal pool.
    pub include_gt: bool,
    pub loss_weights: BTreeMap<Task, f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rois_per_image: 64,
            fg_fraction: 0.25,
            rigid_iou: 0.5,
            nonrigid_iou: 0.2,
            proposal_scales: DEFAULT_PROPOSAL_SCALES.to_vec(),
            proposal_stride: DEFAULT_PROPOSAL_STRIDE,
            proposals: None,
            include_gt: true,
            loss_weights: Task::ALL.iter().map(|&t| (t, 1.0)).collect(),
        }
    }
}

impl SamplingConfig {
    pub fn weight(&self, task: Task) -> f64 {
        self.loss_weights.get(&task).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rois_per_image == 0 {
            return Err(Error::config("rois_per_image must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::config("fg_fraction must be in [0, 1]"));
        }
        for (name, t) in [("rigid_iou", self.rigid_iou), ("nonrigid_iou", self.nonrigid_iou)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1], got {t}")));
            }
        }
        if self.loss_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Synthetic warm-start task used in place of large-scale pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub images: usize,
    pub size: usize,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            images: 64,
            size: 48,
            batch: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Warm start, rigid-only fine-tuning, then all heads.
    Cascade,
    /// Warm start, then the event head alone.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub pretrain: StageConfig,
    pub rigid_only: StageConfig,
    pub unified: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub stages: Stages,
}

fn default_mode() -> TrainMode {
    TrainMode::Cascade
}

impl Default for TrainConfig {
    /// Desk-scale schedule: the two fine-tuning stages keep the reference
    /// iteration/step ratios at 1/100 of the iteration counts.
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Cascade,
            seed: 0,
            network: NetworkConfig::default(),
            sampling: SamplingConfig::default(),
            pretrain: PretrainConfig::default(),
            stages: Stages {
                pretrain: StageConfig::new("pretrain", 0.01, 200, 150, &[Task::Event]),
                rigid_only: StageConfig::new("rigid_only", 0.01, 300, 200, &[Task::Rigid])
                    .with_trainable(&["backbone/", "shared/", "head-rigid/"]),
                unified: StageConfig::new("unified", 0.001, 120, 80, &Task::ALL),
            },
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for (name, s) in [
            ("pretrain", &mut cfg.stages.pretrain),
            ("rigid_only", &mut cfg.stages.rigid_only),
            ("unified", &mut cfg.stages.unified),
        ] {
            if s.name.is_empty() {
                s.name = name.to_string();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stage_list(&self) -> [&StageConfig; 3] {
        [&self.stages.pretrain, &self.stages.rigid_only, &self.stages.unified]
    }

    /// The single-task event baseline: same warm start and seed, then the
    /// unified stage's schedule with only the event head.
    pub fn single_task(&self) -> TrainConfig {
        let mut cfg = self.clone();
        cfg.mode = TrainMode::Single;
        cfg.stages.unified.active_heads = vec![Task::Event];
        cfg
    }

    /// Tasks of the network trained after the warm start.
    pub fn target_tasks(&self) -> Vec<Task> {
        match self.mode {
            TrainMode::Cascade => Task::ALL.to_vec(),
            TrainMode::Single => vec![Task::Event],
        }
    }

    /// Checks every stage against the network it will train, before any
    /// training starts.
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.pretrain.images == 0 || self.pretrain.batch == 0 {
            return Err(Error::config("pretrain images and batch must be positive"));
        }
        let spec = self.network.spec(&self.target_tasks())?;
        if self.pretrain.size < spec.min_input_size() {
            return Err(Error::config(format!(
                "pretrain size {} is below the network minimum input size {}",
                self.pretrain.size,
                spec.min_input_size()
            )));
        }
        for s in self.stage_list() {
            s.validate()?;
        }
        if self.stages.pretrain.active_heads != [Task::Event] {
            return Err(Error::config("stage `pretrain` trains a single classifier head; active_heads must be [\"event\"]"));
        }
        let later: &[&StageConfig] = match self.mode {
            TrainMode::Cascade => &[&self.stages.rigid_only, &self.stages.unified],
            TrainMode::Single => &[&self.stages.unified],
        };
        for s in later {
            for t in &s.active_heads {
                if !spec.has_head(*t) {
                    return Err(Error::config(format!(
                        "stage `{}` activates the {t} head, which the {:?} network does not have",
                        s.name, self.mode
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let s = StageConfig::new("s", 0.01, 30000, 20000, &[Task::Rigid]);
        assert!((lr_at(&s, 25000) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(&s, 0), 0.01);
        let flat = StageConfig { gamma: 1.0, ..s.clone() };
        assert!((0..30000).step_by(997).all(|i| lr_at(&flat, i) == 0.01));
        let mut prev = f64::INFINITY;
        for i in 0..30000 {
            let lr = lr_at(&s, i);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let text = r#"
            mode = "cascade"
            [stages.pretrain]
            base_lr = 0.01
            iterations = 10
            step_size = 5
            active_heads = ["event"]
            [stages.rigid_only]
            base_lr = 0.01
            iterations = 30
            step_size = 20
            trainable = ["backbone/", "shared/", "head-rigid/"]
            active_heads = ["rigid"]
            [stages.unified]
            base_lr = 0.0001
            iterations = 12
            step_size = 8
            active_heads = ["event", "rigid", "nonrigid"]
        "#;
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.stages.unified.name, "unified");
        assert_eq!(cfg.stages.unified.momentum, 0.9);
        assert_eq!(cfg.sampling.rois_per_image, 64);
    }

    #[test]
    fn head_missing_from_spec_is_a_config_error() {
        let mut cfg = TrainConfig {
            mode: TrainMode::Single,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        cfg.stages.unified.active_heads = vec![Task::Event];
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_stage_values() {
        let mut cfg = TrainConfig::default();
        cfg.stages.unified.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.stages.rigid_only.step_size = 301;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::parse("mode = \"cascade\"\nbogus = 1").is_err());
    }
}
