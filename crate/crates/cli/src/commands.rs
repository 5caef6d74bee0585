use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iod_core::data::{generate_synthetic, imageio, Dataset, EventLabel, SyntheticSpec};
use iod_core::eval::{
    concat_features, event_ap, event_features, evaluate, event_scores, feature_fusion_train, fuse_score_lists,
    read_scores, search_weights, uniform_weights, write_scores, EvalConfig, HingeOptions, ImageScore,
};
use iod_core::fsutil::write_atomic;
use iod_core::gradsuite::{run_component, run_suite, COMPONENTS};
use iod_core::network::load;
use iod_core::train::{cascaded_train, stack_images, Proposals, TrainConfig};
use iod_core::{Network, Task};

use crate::{EvalArgs, FuseFeaturesArgs, FuseScoresArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};

/// A failed command with its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type CmdResult<T = ()> = Result<T, Failure>;

const VALIDATION: u8 = 1;
const RUNTIME: u8 = 2;

/// Errors while reading user-supplied inputs are validation errors.
fn input<T>(r: iod_core::Result<T>) -> CmdResult<T> {
    r.map_err(|e| Failure {
        code: VALIDATION,
        message: e.to_string(),
    })
}

/// Errors while running are classified by kind.
fn run<T>(r: iod_core::Result<T>) -> CmdResult<T> {
    r.map_err(|e| Failure {
        code: if e.is_validation() { VALIDATION } else { RUNTIME },
        message: e.to_string(),
    })
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: VALIDATION,
        message: message.into(),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: RUNTIME,
        message: format!("cannot create `{}`: {e}", dir.display()),
    })
}

/// `ckpt/stage3` resolves to `ckpt/stage3.iodc` when only the latter exists.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_file() {
        return p.to_path_buf();
    }
    let mut with_ext = p.as_os_str().to_owned();
    with_ext.push(".iodc");
    let with_ext = PathBuf::from(with_ext);
    if with_ext.is_file() {
        with_ext
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> CmdResult<Network> {
    let path = checkpoint_path(p);
    input(load(&path)).map_err(|f| invalid(format!("checkpoint `{}`: {}", path.display(), f.message)))
}

fn load_data(p: &Path) -> CmdResult<Dataset> {
    let ds = input(Dataset::load(p))?;
    if ds.is_empty() {
        return Err(invalid(format!("dataset `{}` has no entries", p.display())));
    }
    Ok(ds)
}

fn event_labels(ds: &Dataset) -> BTreeMap<String, bool> {
    ds.samples.iter().map(|s| (s.id.clone(), s.event == EventLabel::Malicious)).collect()
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let spec = SyntheticSpec {
        count: a.count,
        min_size: a.min_size,
        max_size: a.max_size,
        noise: a.noise,
        seed: a.seed,
    };
    let min_input = input(TrainConfig::default().network.spec(&Task::ALL))?.min_input_size();
    let data = input(generate_synthetic(&spec, min_input))?;
    create_dir(&a.out)?;
    run(data.save(&a.out))?;
    println!("wrote {} images and manifest.json to {}", data.images.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let (mut cfg, base) = match &a.config {
        Some(p) => (input(TrainConfig::load(p))?, p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        None => (TrainConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.single {
        cfg = cfg.single_task();
    }
    input(cfg.validate())?;
    let ds = load_data(&a.data)?;
    create_dir(&a.out)?;
    let out = run(cascaded_train(&ds, &cfg, &base))?;
    run(out.save(&a.out))?;
    run(write_atomic(a.out.join("config.toml"), cfg.to_toml().as_bytes()))?;
    for (k, (name, _)) in out.stages.iter().enumerate() {
        let rows = out.log.stage(name);
        match (rows.first(), rows.last()) {
            (Some(f), Some(l)) => println!(
                "stage{} {name}: {} iterations, loss {:.4} -> {:.4}",
                k + 1,
                rows.len(),
                f.loss_total,
                l.loss_total
            ),
            _ => println!("stage{} {name}: 0 iterations", k + 1),
        }
    }
    println!("checkpoints and metrics.csv written to {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let net = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let mut proposals = match &a.proposals {
        Some(p) => Proposals::File(input(iod_core::roi::load_proposals(p))?),
        None => {
            let s = iod_core::train::SamplingConfig::default();
            Proposals::grid(&s.proposal_scales, s.proposal_stride)
        }
    };
    let cfg = EvalConfig {
        rigid_iou: a.rigid_iou,
        nonrigid_iou: a.nonrigid_iou,
        ..EvalConfig::default()
    };
    let report = run(evaluate(&net, &ds, &mut proposals, &cfg))?;
    run(report.save(&a.report))?;
    if let Some(p) = &a.scores {
        run(write_scores(p, &run(event_scores(&net, &ds))?))?;
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "ap_event {}  map_rigid {}  ap_nonrigid {}  map_nonrigid {}",
        fmt(report.ap_event),
        fmt(report.map_rigid),
        fmt(report.ap_nonrigid),
        fmt(report.map_nonrigid)
    );
    Ok(())
}

pub fn fuse_scores(a: FuseScoresArgs) -> CmdResult {
    let lists = a.inputs.iter().map(|p| input(read_scores(p))).collect::<CmdResult<Vec<_>>>()?;
    let labels = a.data.as_deref().map(load_data).transpose()?.map(|ds| event_labels(&ds));
    let weights = match (&a.weights, a.search) {
        (Some(w), _) => w.clone(),
        (None, true) => {
            let (w, ap) = run(search_weights(&lists, labels.as_ref().expect("clap requires --data")))?;
            println!("searched weights {w:?} (AP {ap:.4})");
            w
        }
        (None, false) => uniform_weights(lists.len()),
    };
    let fused = run(fuse_score_lists(&lists, &weights))?;
    run(write_scores(&a.out, &fused))?;
    if let Some(labels) = &labels {
        for (p, l) in a.inputs.iter().zip(&lists) {
            println!("{}: AP {:.4}", p.display(), run(event_ap(l, labels))?);
        }
        println!("fused: AP {:.4}", run(event_ap(&fused, labels))?);
    }
    Ok(())
}

pub fn fuse_features(a: FuseFeaturesArgs) -> CmdResult {
    let nets = a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<CmdResult<Vec<_>>>()?;
    let train = load_data(&a.train)?;
    let test = load_data(&a.data)?;
    let features = |ds: &Dataset| -> CmdResult<Vec<Vec<f64>>> {
        let per = nets.iter().map(|n| run(event_features(n, ds))).collect::<CmdResult<Vec<_>>>()?;
        run(concat_features(&per))
    };
    let labels: Vec<bool> = train.samples.iter().map(|s| s.event == EventLabel::Malicious).collect();
    let opts = HingeOptions {
        c: a.c,
        learning_rate: a.learning_rate,
        max_epochs: a.epochs,
    };
    let clf = run(feature_fusion_train(&features(&train)?, &labels, &opts))?;
    println!("classifier: {} epochs, final hinge {:.4}", clf.epochs, clf.final_hinge);
    let scores = features(&test)?
        .iter()
        .zip(&test.samples)
        .map(|(f, s)| {
            let m = run(clf.score(f))?;
            Ok(ImageScore {
                image_id: s.id.clone(),
                score_benign: -m,
                score_malicious: m,
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    run(write_scores(&a.out, &scores))?;
    if let Ok(ap) = event_ap(&scores, &event_labels(&test)) {
        println!("fused: AP {ap:.4}");
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(invalid("--seeds must be positive"));
    }
    let seeds: Vec<u64> = (1..=a.seeds).collect();
    let results = match &a.component {
        Some(c) if !COMPONENTS.contains(&c.as_str()) => {
            return Err(invalid(format!("unknown component `{c}` (expected one of {})", COMPONENTS.join(", "))))
        }
        Some(c) => vec![run(run_component(c, &seeds))?],
        None => run(run_suite(&seeds))?,
    };
    for r in &results {
        println!(
            "{:<4} {:<16} max rel {:.2e}  max abs {:.2e}  tol {:.0e}  ({} seeds, worst: {})",
            if r.pass { "ok" } else { "FAIL" },
            r.component,
            r.max_rel_error,
            r.max_abs_error,
            r.tolerance,
            r.seeds,
            r.worst
        );
    }
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&results).expect("results serialize");
        run(write_atomic(p, text.as_bytes()))?;
    }
    if results.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure {
            code: RUNTIME,
            message: "gradient check failed".into(),
        })
    }
}

pub fn infer(a: InferArgs) -> CmdResult {
    let net = load_checkpoint(&a.checkpoint)?;
    let image = input(imageio::read_image(&a.image))?;
    let min = net.spec().min_input_size();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < min || w < min {
        return Err(invalid(format!("image is {w}x{h}, the network needs at least {min}x{min}")));
    }
    let batch = run(stack_images::<f32>(&[&image], net.norm()))?;
    let p = run(net.forward_infer(&batch))?;
    let out = serde_json::json!({
        "image": a.image.display().to_string(),
        "score_benign": p[0],
        "score_malicious": p[1],
        "event": if p[1] > p[0] { "malicious" } else { "benign" },
    });
    println!("{out}");
    Ok(())
}
