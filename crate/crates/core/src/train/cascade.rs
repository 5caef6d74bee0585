use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::batch::{compose_batch, stack_images, Proposals};
use super::config::{lr_at, StageConfig, TrainConfig, TrainMode};
use super::sgd::Sgd;
use crate::data::{channel_norm, generate_pretrain, Dataset, PRETRAIN_CLASSES};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::network::{save, ChannelNorm, Network, Task, TaskRois, TaskTarget};
use crate::tensor::Rng;

/// Losses of one iteration. Streams not active in the stage are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub iter: usize,
    pub stage: String,
    pub lr: f64,
    pub loss_event: Option<f64>,
    pub loss_rigid: Option<f64>,
    pub loss_nonrigid: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn stage(&self, name: &str) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.stage == name).collect()
    }

    /// CSV with header `iter,stage,lr,loss_event,loss_rigid,loss_nonrigid,loss_total`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::State(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["iter", "stage", "lr", "loss_event", "loss_rigid", "loss_nonrigid", "loss_total"])
                .map_err(|e| Error::State(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Result of a training run: one network per completed stage, in order.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stages: Vec<(String, Network)>,
    pub log: MetricLog,
}

impl TrainOutcome {
    pub fn final_network(&self) -> &Network {
        &self.stages.last().expect("at least one stage").1
    }

    pub fn network(&self, stage: &str) -> Option<&Network> {
        self.stages.iter().find(|(n, _)| n == stage).map(|(_, n)| n)
    }

    /// Writes `stage{k}.iodc` per stage, `final.iodc` and `metrics.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (k, (_, net)) in self.stages.iter().enumerate() {
            save(net, dir.join(format!("stage{}.iodc", k + 1)))?;
        }
        save(self.final_network(), dir.join("final.iodc"))?;
        write_atomic(dir.join("metrics.csv"), self.log.to_csv()?.as_bytes())
    }
}

fn record(log: &mut MetricLog, stage: &StageConfig, iter: usize, lr: f64, per_task: &BTreeMap<Task, f32>, total: f32) {
    let get = |t| per_task.get(&t).map(|&v| v as f64);
    log.rows.push(MetricRow {
        iter,
        stage: stage.name.clone(),
        lr,
        loss_event: get(Task::Event),
        loss_rigid: get(Task::Rigid),
        loss_nonrigid: get(Task::NonRigid),
        loss_total: total as f64,
    });
    if iter.is_multiple_of(50) || iter + 1 == stage.iterations {
        log::info!("stage {} iter {iter}: lr {lr:.2e} loss {total:.4}", stage.name);
    }
}

fn check_finite(stage: &StageConfig, iter: usize, total: f32) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::State(format!("stage `{}` diverged at iteration {iter} (loss {total})", stage.name)))
    }
}

/// Trains a fresh single-head classifier on the synthetic pretraining task.
/// Only its backbone and `fc6` are carried into later stages.
pub fn pretrain(cfg: &TrainConfig, norm: &ChannelNorm, log: &mut MetricLog) -> Result<Network> {
    let stage = &cfg.stages.pretrain;
    let root = Rng::new(cfg.seed);
    let mut net = Network::build(cfg.network.pretrain_spec(PRETRAIN_CLASSES)?, &mut root.fork(1))?;
    net.set_norm(Some(norm.clone()));
    if stage.iterations == 0 {
        return Ok(net);
    }
    let (images, labels) = generate_pretrain(cfg.pretrain.images, cfg.pretrain.size, cfg.seed)?;
    let mut rng = root.fork(2);
    let mut sgd = Sgd::new(stage.momentum, stage.weight_decay);
    for it in 0..stage.iterations {
        let lr = lr_at(stage, it);
        let idx: Vec<usize> = (0..cfg.pretrain.batch).map(|_| rng.below(images.len())).collect();
        let batch = stack_images(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>(), Some(norm))?;
        let sizes = vec![(cfg.pretrain.size, cfg.pretrain.size); idx.len()];
        let rois = TaskRois::from([(Task::Event, Network::<f32>::whole_image_rois(&sizes))]);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let targets = BTreeMap::from([(Task::Event, TaskTarget { labels: &y, weight: 1.0 })]);
        let out = net.forward_train(&batch, &rois)?.loss_backward(&targets)?;
        check_finite(stage, it, out.total)?;
        sgd.step(&mut net, &out.grads, lr, |p| stage.trains(p))?;
        record(log, stage, it, lr, &out.per_task, out.total);
    }
    Ok(net)
}

/// Runs one detection/event stage on `net` in place. Parameters outside
/// the stage's trainable prefixes are never modified.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    net: &mut Network,
    stage: &StageConfig,
    ds: &Dataset,
    proposals: &mut Proposals,
    cfg: &TrainConfig,
    rng: &mut Rng,
    log: &mut MetricLog,
) -> Result<()> {
    for t in &stage.active_heads {
        if !net.spec().has_head(*t) {
            return Err(Error::config(format!("stage `{}` activates the {t} head, which the network lacks", stage.name)));
        }
    }
    let norm = net.norm().cloned();
    let mut sgd = Sgd::new(stage.momentum, stage.weight_decay);
    for it in 0..stage.iterations {
        let lr = lr_at(stage, it);
        let plan = compose_batch(ds, proposals, &cfg.sampling, rng)?;
        let batch = plan.materialize::<f32>(ds, norm.as_ref(), &stage.active_heads)?;
        let targets: BTreeMap<Task, TaskTarget<'_, f32>> = batch
            .labels
            .iter()
            .map(|(&t, l)| {
                (
                    t,
                    TaskTarget {
                        labels: l.as_slice(),
                        weight: cfg.sampling.weight(t) as f32,
                    },
                )
            })
            .collect();
        let out = net.forward_train(&batch.images, &batch.rois)?.loss_backward(&targets)?;
        check_finite(stage, it, out.total)?;
        sgd.step(net, &out.grads, lr, |p| stage.trains(p))?;
        record(log, stage, it, lr, &out.per_task, out.total);
    }
    Ok(())
}

/// Everything after the warm start, for either mode. `pretrained` supplies
/// the backbone, `fc6` and input normalization.
pub fn finetune(pretrained: &Network, ds: &Dataset, cfg: &TrainConfig, base: &Path, log: &mut MetricLog) -> Result<Vec<(String, Network)>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut net = Network::build(cfg.network.spec(&cfg.target_tasks())?, &mut root.fork(3))?;
    net.transfer_shared_from(pretrained)?;
    let mut proposals = Proposals::from_config(&cfg.sampling, base)?;
    let mut out = Vec::new();
    match cfg.mode {
        TrainMode::Cascade => {
            run_stage(&mut net, &cfg.stages.rigid_only, ds, &mut proposals, cfg, &mut root.fork(4), log)?;
            out.push((cfg.stages.rigid_only.name.clone(), net.clone()));
            run_stage(&mut net, &cfg.stages.unified, ds, &mut proposals, cfg, &mut root.fork(5), log)?;
            out.push((cfg.stages.unified.name.clone(), net));
        }
        TrainMode::Single => {
            run_stage(&mut net, &cfg.stages.unified, ds, &mut proposals, cfg, &mut root.fork(5), log)?;
            out.push((cfg.stages.unified.name.clone(), net));
        }
    }
    Ok(out)
}

/// Full run: channel statistics from `ds`, warm start on the synthetic
/// pretraining task, then the mode's fine-tuning stages. `base` resolves
/// relative proposal-file paths.
pub fn cascaded_train(ds: &Dataset, cfg: &TrainConfig, base: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let norm = channel_norm(ds.samples.iter().map(|s| &s.image));
    let mut log = MetricLog::default();
    let pre = pretrain(cfg, &norm, &mut log)?;
    let mut stages = vec![(cfg.stages.pretrain.name.clone(), pre.clone())];
    stages.extend(finetune(&pre, ds, cfg, base, &mut log)?);
    Ok(TrainOutcome { stages, log })
}
