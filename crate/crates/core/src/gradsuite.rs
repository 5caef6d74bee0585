//! Finite-difference checks of every backward pass, run in `f64` over many
//! seeds. Shared by the test suite and the `gradcheck` command.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::layers::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, roi_pool, roi_pool_backward, softmax_cross_entropy, BatchRoi, ConvParams, FcParams, RoiPoolSpec,
};
use crate::network::{BackboneSpec, ConvStage, HiddenInit, Network, NetworkSpec, Task, TaskRois, TaskTarget};
use crate::tensor::{gaussian_init, Rng, Tensor};

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

pub const COMPONENTS: [&str; 7] = ["relu", "conv2d", "maxpool2d", "roi_pool", "fully_connected", "softmax_ce", "network"];

/// Worst result of one component over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub seeds: usize,
    pub tolerance: f64,
    /// Relative error, counted as zero where the absolute difference is
    /// within [`crate::gradcheck::ABS_ERROR_FLOOR`].
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Seed and parameter of the worst coordinate.
    pub worst: String,
    pub pass: bool,
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    gaussian_init(shape, 0.0, 1.0, rng).expect("valid shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

type Reports = Vec<(String, GradCheckReport)>;

fn check(f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, g: &Tensor<f64>, tol: f64) -> Result<GradCheckReport> {
    finite_diff_check(f, x, g, EPS, tol)
}

fn relu_case(rng: &mut Rng) -> Result<Reports> {
    let x = randn(&[2, 3, 4, 5], rng);
    let proj = randn(x.shape(), rng);
    let g = relu_backward(&x, &proj)?;
    Ok(vec![("x".into(), check(|p| dot(&relu(p), &proj), &x, &g, LAYER_TOLERANCE)?)])
}

fn conv_case(rng: &mut Rng) -> Result<Reports> {
    let stride = rng.range_inclusive(1, 2);
    let pad = rng.range_inclusive(0, 1);
    let k = [1, 3][rng.below(2)];
    let x = randn(&[2, 2, 6, 7], rng);
    let p = ConvParams::new(randn(&[3, 2, k, k], rng), randn(&[3], rng), stride, pad)?;
    let proj = randn(conv2d(&x, &p)?.shape(), rng);
    let g = conv2d_backward(&x, &p, &proj)?;
    let mut out = vec![("x".into(), check(|v| dot(&conv2d(v, &p).unwrap(), &proj), &x, &g.dx, LAYER_TOLERANCE)?)];
    let f_w = |w: &Tensor<f64>| {
        let q = ConvParams::new(w.clone(), p.bias.clone(), stride, pad).unwrap();
        dot(&conv2d(&x, &q).unwrap(), &proj)
    };
    out.push(("weights".into(), check(f_w, &p.weights, &g.dweights, LAYER_TOLERANCE)?));
    let f_b = |b: &Tensor<f64>| {
        let q = ConvParams::new(p.weights.clone(), b.clone(), stride, pad).unwrap();
        dot(&conv2d(&x, &q).unwrap(), &proj)
    };
    out.push(("bias".into(), check(f_b, &p.bias, &g.dbias, LAYER_TOLERANCE)?));
    Ok(out)
}

fn maxpool_case(rng: &mut Rng) -> Result<Reports> {
    let x = randn(&[2, 2, 6, 8], rng);
    let (win, stride) = [(2, 2), (3, 2), (2, 1)][rng.below(3)];
    let y = maxpool2d(&x, win, stride)?;
    let proj = randn(y.output.shape(), rng);
    let g = maxpool2d_backward(x.shape(), &y.argmax, &proj)?;
    let f = |v: &Tensor<f64>| dot(&maxpool2d(v, win, stride).unwrap().output, &proj);
    Ok(vec![("x".into(), check(f, &x, &g, LAYER_TOLERANCE)?)])
}

fn roi_pool_case(rng: &mut Rng) -> Result<Reports> {
    let feat = randn(&[2, 3, 7, 9], rng);
    let spec = RoiPoolSpec {
        out_h: rng.range_inclusive(1, 3),
        out_w: rng.range_inclusive(1, 3),
        spatial_scale: 0.5,
    };
    let rois: Vec<BatchRoi> = (0..4)
        .map(|_| {
            let x1 = rng.uniform(0.0, 14.0);
            let y1 = rng.uniform(0.0, 10.0);
            BatchRoi::new(rng.below(2), x1, y1, rng.uniform(x1, 18.0), rng.uniform(y1, 14.0))
        })
        .collect();
    let y = roi_pool(&feat, &rois, &spec)?;
    let proj = randn(y.output.shape(), rng);
    let g = roi_pool_backward(feat.shape(), &y.argmax, &proj)?;
    let f = |v: &Tensor<f64>| dot(&roi_pool(v, &rois, &spec).unwrap().output, &proj);
    Ok(vec![("features".into(), check(f, &feat, &g, LAYER_TOLERANCE)?)])
}

fn fc_case(rng: &mut Rng) -> Result<Reports> {
    let x = randn(&[5, 7], rng);
    let p = FcParams::new(randn(&[4, 7], rng), randn(&[4], rng))?;
    let proj = randn(&[5, 4], rng);
    let g = fully_connected_backward(&x, &p, &proj)?;
    let mut out = vec![(
        "x".into(),
        check(|v| dot(&fully_connected(v, &p).unwrap(), &proj), &x, &g.dx, LAYER_TOLERANCE)?,
    )];
    let f_w = |w: &Tensor<f64>| dot(&fully_connected(&x, &FcParams::new(w.clone(), p.bias.clone()).unwrap()).unwrap(), &proj);
    out.push(("weights".into(), check(f_w, &p.weights, &g.dweights, LAYER_TOLERANCE)?));
    let f_b = |b: &Tensor<f64>| dot(&fully_connected(&x, &FcParams::new(p.weights.clone(), b.clone()).unwrap()).unwrap(), &proj);
    out.push(("bias".into(), check(f_b, &p.bias, &g.dbias, LAYER_TOLERANCE)?));
    Ok(out)
}

fn softmax_case(rng: &mut Rng) -> Result<Reports> {
    let rows = rng.range_inclusive(1, 6);
    let classes = rng.range_inclusive(2, 5);
    let logits = randn(&[rows, classes], rng).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
    let out = softmax_cross_entropy(&logits, &labels)?;
    let f = |v: &Tensor<f64>| softmax_cross_entropy(v, &labels).unwrap().loss;
    Ok(vec![("logits".into(), check(f, &logits, &out.dlogits, LAYER_TOLERANCE)?)])
}

/// Small three-head network used for the end-to-end check: two conv stages
/// of four channels, 2x2 pooled grid, `fc6` of 8 and `fc7` of 6 units.
pub fn micro_spec() -> NetworkSpec {
    let backbone = BackboneSpec {
        in_channels: 3,
        stages: vec![ConvStage::new(4, 3, 1, 1, Some(2)), ConvStage::new(4, 3, 1, 1, Some(2))],
    };
    let mut s = NetworkSpec::with_heads(backbone, 8, 6, 2, &Task::ALL).expect("micro spec is valid");
    s.init.hidden = HiddenInit::Gaussian(0.3);
    s.init.fc8_std = 0.3;
    s
}

fn random_rois(rng: &mut Rng, n: usize, per_image: usize, size: f64) -> Vec<BatchRoi> {
    (0..n * per_image)
        .map(|i| {
            let x1 = rng.uniform(0.0, size - 4.0).floor();
            let y1 = rng.uniform(0.0, size - 4.0).floor();
            let x2 = (x1 + rng.uniform(3.0, size - x1)).ceil().min(size);
            let y2 = (y1 + rng.uniform(3.0, size - y1)).ceil().min(size);
            BatchRoi::new(i / per_image, x1, y1, x2, y2)
        })
        .collect()
}

/// Batch, RoIs and labels for one network check.
pub struct NetworkCase {
    pub images: Tensor<f64>,
    pub rois: TaskRois,
    pub labels: BTreeMap<Task, Vec<usize>>,
    pub weights: BTreeMap<Task, f64>,
}

impl NetworkCase {
    pub fn random(net: &Network<f64>, rng: &mut Rng) -> Self {
        let (n, size) = (2, 12);
        let images = randn(&[n, 3, size, size], rng);
        let mut rois = TaskRois::new();
        rois.insert(Task::Event, Network::<f64>::whole_image_rois(&vec![(size, size); n]));
        rois.insert(Task::Rigid, random_rois(rng, n, 3, size as f64));
        rois.insert(Task::NonRigid, random_rois(rng, n, 5, size as f64));
        let mut labels = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for (&task, list) in &rois {
            let classes = net.spec().head(task).expect("micro spec has all heads").num_classes;
            labels.insert(task, list.iter().map(|_| rng.below(classes)).collect());
            weights.insert(task, rng.uniform(0.5, 1.5));
        }
        NetworkCase {
            images,
            rois,
            labels,
            weights,
        }
    }

    pub fn targets(&self) -> BTreeMap<Task, TaskTarget<'_, f64>> {
        self.labels
            .iter()
            .map(|(&t, l)| (t, TaskTarget { labels: l, weight: self.weights[&t] }))
            .collect()
    }

    pub fn loss(&self, net: &Network<f64>) -> Result<f64> {
        let pass = net.forward_train(&self.images, &self.rois)?;
        Ok(pass.loss_backward(&self.targets())?.total)
    }
}

fn network_case(rng: &mut Rng) -> Result<Reports> {
    let net: Network<f64> = Network::build(micro_spec(), &mut rng.fork(1))?;
    let case = NetworkCase::random(&net, rng);
    let grads = net.forward_train(&case.images, &case.rois)?.loss_backward(&case.targets())?.grads;
    let mut out = Vec::new();
    for (path, value) in net.params() {
        let mut probe_net = net.clone();
        let f = |p: &Tensor<f64>| {
            *probe_net.param_mut(&path).expect("path exists") = p.clone();
            case.loss(&probe_net).unwrap_or(f64::NAN)
        };
        let g = grads.get(&path).expect("every parameter has a gradient");
        out.push((path.clone(), check(f, value, g, NETWORK_TOLERANCE)?));
    }
    Ok(out)
}

/// Runs one component over `seeds`, keeping the worst coordinate.
pub fn run_component(component: &str, seeds: &[u64]) -> Result<ComponentResult> {
    let (case, tolerance): (fn(&mut Rng) -> Result<Reports>, f64) = match component {
        "relu" => (relu_case, LAYER_TOLERANCE),
        "conv2d" => (conv_case, LAYER_TOLERANCE),
        "maxpool2d" => (maxpool_case, LAYER_TOLERANCE),
        "roi_pool" => (roi_pool_case, LAYER_TOLERANCE),
        "fully_connected" => (fc_case, LAYER_TOLERANCE),
        "softmax_ce" => (softmax_case, LAYER_TOLERANCE),
        "network" => (network_case, NETWORK_TOLERANCE),
        other => {
            return Err(crate::Error::invalid(format!(
                "unknown component `{other}` (expected one of {})",
                COMPONENTS.join(", ")
            )))
        }
    };
    let mut res = ComponentResult {
        component: component.to_string(),
        seeds: seeds.len(),
        tolerance,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        pass: true,
    };
    for &seed in seeds {
        for (what, r) in case(&mut Rng::new(seed))? {
            res.pass &= r.pass;
            res.max_abs_error = res.max_abs_error.max(r.max_abs_error);
            if r.max_rel_error > res.max_rel_error || res.worst.is_empty() {
                res.max_rel_error = r.max_rel_error;
                res.worst = format!("seed {seed}, {what}");
            }
        }
    }
    Ok(res)
}

pub fn run_suite(seeds: &[u64]) -> Result<Vec<ComponentResult>> {
    COMPONENTS.iter().map(|c| run_component(c, seeds)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_on_a_few_seeds() {
        for r in run_suite(&[1, 2, 3]).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn shared_gradients_are_sums_over_streams() {
        let net: Network<f64> = Network::build(micro_spec(), &mut Rng::new(7)).unwrap();
        let case = NetworkCase::random(&net, &mut Rng::new(8));
        let pass = net.forward_train(&case.images, &case.rois).unwrap();
        let all = pass.loss_backward(&case.targets()).unwrap().grads;
        let mut summed = crate::network::Gradients::default();
        for (t, target) in case.targets() {
            let one = pass.loss_backward(&BTreeMap::from([(t, target)])).unwrap().grads;
            for (p, g) in one.by_path {
                summed.accumulate(p, g).unwrap();
            }
        }
        for (p, g) in &all.by_path {
            let s = summed.get(p).unwrap();
            for (a, b) in g.data().iter().zip(s.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(run_component("dropout", &[1]).is_err());
    }
}
