use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, RankedPrediction};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Elementwise weighted mean of per-model score vectors.
pub fn score_fusion(scores: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() || scores.len() != weights.len() {
        return Err(Error::invalid(format!("{} score vectors but {} weights", scores.len(), weights.len())));
    }
    let dim = scores[0].len();
    if scores.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("score vectors differ in length"));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fusion weights must be non-negative and sum to 1, got {weights:?}")));
    }
    if weights.len() == 1 {
        return Ok(scores[0].to_vec());
    }
    Ok((0..dim).map(|k| scores.iter().zip(weights).map(|(s, w)| w * s[k]).sum()).collect())
}

pub fn uniform_weights(models: usize) -> Vec<f64> {
    vec![1.0 / models as f64; models]
}

/// Every weight vector with entries on a 0.1 grid summing to 1.
pub fn weight_grid(models: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / 10.0).collect());
            cur.pop();
            return;
        }
        for k in (0..=left).rev() {
            cur.push(k);
            rec(left - k, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if models > 0 {
        rec(10, models, &mut Vec::new(), &mut out);
    }
    out
}

/// Per-image class scores of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub score_benign: f64,
    pub score_malicious: f64,
}

impl ImageScore {
    pub fn vector(&self) -> [f64; 2] {
        [self.score_benign, self.score_malicious]
    }
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ImageScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ImageScore>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let s: ImageScore = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: format!("{}: {e}", path.display()),
        })?;
        if !s.score_benign.is_finite() || !s.score_malicious.is_finite() {
            return Err(Error::Parse {
                line: i + 2,
                message: "scores must be finite".into(),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Fuses several models' score lists image by image. Every list must cover
/// the same image ids; the output follows the first list's order.
pub fn fuse_score_lists(lists: &[Vec<ImageScore>], weights: &[f64]) -> Result<Vec<ImageScore>> {
    let first = lists.first().ok_or_else(|| Error::invalid("no score lists to fuse"))?;
    let maps: Vec<BTreeMap<&str, [f64; 2]>> = lists
        .iter()
        .map(|l| l.iter().map(|s| (s.image_id.as_str(), s.vector())).collect())
        .collect();
    for (k, m) in maps.iter().enumerate() {
        if m.len() != first.len() {
            return Err(Error::invalid(format!("score list {k} has {} images, expected {}", m.len(), first.len())));
        }
    }
    first
        .iter()
        .map(|s| {
            let vecs = maps
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    m.get(s.image_id.as_str())
                        .map(|v| &v[..])
                        .ok_or_else(|| Error::invalid(format!("score list {k} has no entry for `{}`", s.image_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let f = score_fusion(&vecs, weights)?;
            Ok(ImageScore {
                image_id: s.image_id.clone(),
                score_benign: f[0],
                score_malicious: f[1],
            })
        })
        .collect()
}

/// Event AP of malicious scores against `labels` (true = malicious).
pub fn event_ap(scores: &[ImageScore], labels: &BTreeMap<String, bool>) -> Result<f64> {
    let preds = scores
        .iter()
        .map(|s| {
            labels
                .get(&s.image_id)
                .map(|&pos| RankedPrediction::new(s.score_malicious, pos))
                .ok_or_else(|| Error::invalid(format!("no event label for `{}`", s.image_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    average_precision(&preds)
}

/// Grid-searches fusion weights for the best event AP on a validation set.
/// Among equal APs the uniform weighting wins, then grid order.
pub fn search_weights(lists: &[Vec<ImageScore>], labels: &BTreeMap<String, bool>) -> Result<(Vec<f64>, f64)> {
    let uniform = uniform_weights(lists.len());
    let mut best = (uniform.clone(), event_ap(&fuse_score_lists(lists, &uniform)?, labels)?);
    for w in weight_grid(lists.len()) {
        let ap = event_ap(&fuse_score_lists(lists, &w)?, labels)?;
        if ap > best.1 {
            best = (w, ap);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeOptions {
    /// Weight of the hinge term against `0.5 * |w|^2`.
    pub c: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
}

impl Default for HingeOptions {
    fn default() -> Self {
        HingeOptions {
            c: 1.0,
            learning_rate: 0.01,
            max_epochs: 1000,
        }
    }
}

/// Binary linear classifier; the score is the signed margin `w.x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Epochs run before stopping.
    pub epochs: usize,
    /// Mean hinge loss on the training set when training stopped.
    pub final_hinge: f64,
}

impl LinearClassifier {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::invalid(format!("feature has {} dims, classifier expects {}", x.len(), self.weights.len())));
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

/// Full-batch subgradient descent on
/// `0.5 * |w|^2 + c * mean_i max(0, 1 - y_i (w.x_i + b))`, from zero.
/// Labels are true for the positive class. Training stops early once the
/// hinge term is exactly zero.
pub fn feature_fusion_train(features: &[Vec<f64>], labels: &[bool], opts: &HingeOptions) -> Result<LinearClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid(format!("{} features but {} labels", features.len(), labels.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::config("feature fusion needs both classes in the training labels"));
    }
    if !(opts.c >= 0.0 && opts.learning_rate > 0.0) {
        return Err(Error::invalid("hinge c must be >= 0 and learning rate > 0"));
    }
    let n = features.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let hinge = |w: &[f64], b: f64| -> (f64, Vec<usize>) {
        let mut total = 0.0;
        let mut active = Vec::new();
        for (i, (x, &y)) in features.iter().zip(labels).enumerate() {
            let y = if y { 1.0 } else { -1.0 };
            let m = y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b);
            if m < 1.0 {
                total += 1.0 - m;
                active.push(i);
            }
        }
        (total / n, active)
    };
    let mut epochs = 0;
    let (mut loss, mut active) = hinge(&w, b);
    while epochs < opts.max_epochs && loss > 0.0 {
        let mut gw: Vec<f64> = w.clone();
        let mut gb = 0.0;
        for &i in &active {
            let y = if labels[i] { 1.0 } else { -1.0 };
            for (g, v) in gw.iter_mut().zip(&features[i]) {
                *g -= opts.c * y * v / n;
            }
            gb -= opts.c * y / n;
        }
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= opts.learning_rate * g;
        }
        b -= opts.learning_rate * gb;
        epochs += 1;
        (loss, active) = hinge(&w, b);
    }
    Ok(LinearClassifier {
        weights: w,
        bias: b,
        epochs,
        final_hinge: loss,
    })
}

pub fn feature_fusion_score(clf: &LinearClassifier, feature: &[f64]) -> Result<f64> {
    clf.score(feature)
}

/// Per-image feature concatenation across models.
pub fn concat_features(per_model: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let n = per_model.first().map(Vec::len).ok_or_else(|| Error::invalid("no feature sets"))?;
    if per_model.iter().any(|m| m.len() != n) {
        return Err(Error::invalid("feature sets cover different numbers of images"));
    }
    Ok((0..n).map(|i| per_model.iter().flat_map(|m| m[i].iter().copied()).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn fusion_examples() {
        let a = [0.3, 0.7];
        assert_eq!(score_fusion(&[&a, &a], &[0.2, 0.8]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(score_fusion(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(score_fusion(&[&[0.123, 0.877], &[0.9, 0.1]], &[1.0, 0.0]).unwrap(), vec![0.123, 0.877]);
        assert_eq!(score_fusion(&[&a], &[1.0]).unwrap(), a.to_vec());
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        assert!(score_fusion(&[&[0.5, 0.5]], &[0.5, 0.5]).is_err());
        assert!(score_fusion(&[&[0.5, 0.5], &[0.5]], &[0.5, 0.5]).is_err());
        assert!(score_fusion(&[&[0.5, 0.5], &[0.5, 0.5]], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn grid_has_all_compositions() {
        assert_eq!(weight_grid(1), vec![vec![1.0]]);
        assert_eq!(weight_grid(2).len(), 11);
        assert_eq!(weight_grid(3).len(), 66);
        assert!(weight_grid(3).iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    fn score(id: &str, m: f64) -> ImageScore {
        ImageScore {
            image_id: id.into(),
            score_benign: 1.0 - m,
            score_malicious: m,
        }
    }

    #[test]
    fn score_lists_align_by_id() {
        let a = vec![score("x", 0.2), score("y", 0.6)];
        let b = vec![score("y", 1.0), score("x", 0.0)];
        let f = fuse_score_lists(&[a.clone(), b], &[0.5, 0.5]).unwrap();
        assert_eq!(f[0].image_id, "x");
        assert!((f[0].score_malicious - 0.1).abs() < 1e-12);
        assert!((f[1].score_malicious - 0.8).abs() < 1e-12);
        assert!(fuse_score_lists(&[a, vec![score("x", 0.1)]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weight_search_prefers_the_informative_model() {
        let labels: BTreeMap<String, bool> = [("a", true), ("b", false), ("c", true), ("d", false)]
            .iter()
            .map(|&(k, v)| (k.to_string(), v))
            .collect();
        let good = vec![score("a", 0.9), score("b", 0.1), score("c", 0.8), score("d", 0.2)];
        let bad = vec![score("a", 0.0), score("b", 1.0), score("c", 0.1), score("d", 0.9)];
        let (w, ap) = search_weights(&[good.clone(), bad], &labels).unwrap();
        assert_eq!(ap, 1.0);
        assert!(w[0] > w[1]);
        let (w, _) = search_weights(&[good.clone(), good], &labels).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn score_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = vec![score("img_0000.png", 0.25), score("b", 0.75)];
        write_scores(&p, &s).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,score_benign,score_malicious\n"));
        assert_eq!(read_scores(&p).unwrap(), s);
        std::fs::write(&p, "image_id,score_benign,score_malicious\nx,0.1,oops\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::Parse { line: 2, .. })));
    }

    fn toy(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = Rng::new(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let pos = i % 2 == 0;
            let shift = if pos { 2.0 } else { -2.0 };
            xs.push(vec![shift + rng.uniform(-0.6, 0.6), 0.5 * shift + rng.uniform(-0.6, 0.6)]);
            ys.push(pos);
        }
        (xs, ys)
    }

    #[test]
    fn separable_toy_reaches_zero_hinge() {
        let (xs, ys) = toy(1);
        let clf = feature_fusion_train(&xs, &ys, &HingeOptions { c: 10.0, learning_rate: 0.1, max_epochs: 1000 }).unwrap();
        assert_eq!(clf.final_hinge, 0.0);
        assert!(clf.epochs <= 1000);
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(clf.score(x).unwrap() > 0.0, y);
        }
    }

    #[test]
    fn duplicated_features_rank_identically() {
        let (xs, ys) = toy(2);
        let opts = HingeOptions { c: 10.0, learning_rate: 0.1, max_epochs: 1000 };
        let single = feature_fusion_train(&xs, &ys, &opts).unwrap();
        let dup = concat_features(&[xs.clone(), xs.clone()]).unwrap();
        let twice = feature_fusion_train(&dup, &ys, &opts).unwrap();
        let order = |s: Vec<f64>| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            idx
        };
        let a: Vec<f64> = xs.iter().map(|x| single.score(x).unwrap()).collect();
        let b: Vec<f64> = dup.iter().map(|x| twice.score(x).unwrap()).collect();
        assert_eq!(order(a), order(b));
        // Both blocks carry the same weights.
        assert_eq!(twice.weights[..2], twice.weights[2..]);
    }

    #[test]
    fn vanishing_c_keeps_weights_near_zero() {
        let (xs, ys) = toy(3);
        let clf = feature_fusion_train(&xs, &ys, &HingeOptions { c: 1e-9, ..Default::default() }).unwrap();
        assert!(clf.weights.iter().all(|w| w.abs() < 1e-8));
        assert!(xs.iter().all(|x| clf.score(x).unwrap().abs() < 1e-8));
    }

    #[test]
    fn single_class_is_a_config_error() {
        let r = feature_fusion_train(&[vec![1.0], vec![2.0]], &[true, true], &HingeOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
